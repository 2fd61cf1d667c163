#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "moie/carve/carve.hpp"
#include "moie/data/dataset.hpp"
#include "moie/models/blackbox.hpp"
#include "moie/shortcut/shortcut.hpp"

namespace moie::cli {

// Everything a run needs. The root seed drives every substream, so
// normalize() copies it into the dataset and carve seeds; the stored config
// of a run is always the normalized one.
struct RunConfig {
  data::ShortcutSpec dataset;
  std::string dataset_path;  // CSV to load instead of generating `dataset`
  models::BlackboxConfig blackbox;
  carve::CarveConfig carve;
  shortcut::ShortcutConfig shortcut;
  bool skip_eliminate = false;
  std::string out = "runs/default";
  std::uint64_t seed = 0;

  void normalize();
  void validate() const;
  shortcut::PipelineConfig pipeline() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
// Rejects unknown keys at every level.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
// SHA-256 of the canonical JSON dump.
std::string config_hash(const RunConfig& c);

}  // namespace moie::cli
