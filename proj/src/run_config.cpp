#include "moie/cli/run_config.hpp"

#include "moie/errors.hpp"
#include "moie/util.hpp"

namespace moie::cli {

void RunConfig::normalize() {
  dataset.seed = seed;
  carve.seed = seed;
}

void RunConfig::validate() const {
  if (dataset_path.empty()) dataset.validate();
  carve.validate();
  shortcut.validate();
  if (out.empty()) throw ConfigError("run config: out must not be empty");
}

shortcut::PipelineConfig RunConfig::pipeline() const {
  shortcut::PipelineConfig p;
  p.blackbox = blackbox;
  p.carve = carve;
  p.shortcut = shortcut;
  p.skip_eliminate = skip_eliminate;
  return p;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"dataset", c.dataset},   {"dataset_path", c.dataset_path},     {"blackbox", c.blackbox},
       {"carve", c.carve},       {"shortcut", c.shortcut},             {"skip_eliminate", c.skip_eliminate},
       {"out", c.out},           {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config: expected a JSON object");
  reject_unknown_keys(j, {"dataset", "dataset_path", "blackbox", "carve", "shortcut", "skip_eliminate", "out", "seed"},
                      "run config");
  try {
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<data::ShortcutSpec>();
    if (j.contains("dataset_path")) c.dataset_path = j.at("dataset_path").get<std::string>();
    if (j.contains("blackbox")) c.blackbox = j.at("blackbox").get<models::BlackboxConfig>();
    if (j.contains("carve")) c.carve = j.at("carve").get<carve::CarveConfig>();
    if (j.contains("shortcut")) c.shortcut = j.at("shortcut").get<shortcut::ShortcutConfig>();
    if (j.contains("skip_eliminate")) c.skip_eliminate = j.at("skip_eliminate").get<bool>();
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return j.get<RunConfig>();
}

std::string config_hash(const RunConfig& c) { return sha256_hex(nlohmann::json(c).dump()); }

}  // namespace moie::cli
