// moie: generate | train-bb | carve | explain | shortcut | evaluate
//
// Every command works inside one run directory (--out, or the positional
// RUN_DIR of explain/evaluate). Exit codes: 0 ok, 1 usage or config error,
// 2 numerical failure, 3 stage-order violation.

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moie/carve/carve.hpp"
#include "moie/cli/run_config.hpp"
#include "moie/data/dataset.hpp"
#include "moie/errors.hpp"
#include "moie/folx/folx.hpp"
#include "moie/models/blackbox.hpp"
#include "moie/shortcut/shortcut.hpp"
#include "moie/util.hpp"

namespace fs = std::filesystem;
using namespace moie;
using cli::RunConfig;

namespace {

constexpr const char* kVersion = "1.0.0";

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  bool force = false;
  bool train_bb = false;
  bool skip_eliminate = false;
  std::string run_dir;
  std::vector<std::size_t> ids;
  std::string split = "test";
};

// ---------------------------------------------------------------- run directory

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : cli::load_run_config(o.config);
  if (!o.out.empty()) c.out = o.out;
  if (o.seed) c.seed = *o.seed;
  if (o.skip_eliminate) c.skip_eliminate = true;
  c.normalize();
  c.validate();
  return c;
}

// Config stored in an existing run directory; the run's exact inputs.
RunConfig stored_config(const fs::path& dir) {
  const fs::path p = dir / "config.json";
  if (!fs::exists(p)) throw ConfigError("no run at " + dir.string() + " (config.json missing)");
  return cli::load_run_config(p);
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_file(p, j.dump(2) + "\n"); }

void refuse_overwrite(const fs::path& p, bool force) {
  if (fs::exists(p) && !force) throw ConfigError(p.string() + " already exists; pass --force to overwrite");
}

fs::path dataset_csv(const RunConfig& c) {
  return c.dataset_path.empty() ? fs::path(c.out) / "dataset.csv" : fs::path(c.dataset_path);
}

data::Dataset load_dataset(const RunConfig& c) {
  const fs::path p = dataset_csv(c);
  if (!fs::exists(p)) {
    throw ConfigError("no dataset at " + p.string() + "; run `moie generate --out " + c.out +
                      "` first or set dataset_path in the config");
  }
  return data::load_csv(p);
}

models::Blackbox load_blackbox(const fs::path& dir) {
  const fs::path p = dir / "blackbox.json";
  if (!fs::exists(p)) {
    throw ConfigError("no blackbox at " + p.string() + "; run `moie train-bb` first or pass --train-bb");
  }
  return models::Blackbox::from_json(nlohmann::json::parse(read_file(p)));
}

carve::CarveState load_state(const fs::path& dir) {
  const fs::path p = dir / "carve_state.json";
  if (!fs::exists(p)) throw ConfigError("no carved model at " + p.string() + "; run `moie carve` first");
  return carve::state_from_json(nlohmann::json::parse(read_file(p)));
}

nlohmann::json versions() {
  return {{"moie", kVersion},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"compiler", __VERSION__}};
}

// Config, input hashes and the hash of every artifact present in the run
// directory; enough to reproduce and check a run bit for bit.
void write_manifest(const RunConfig& c, const std::vector<std::string>& artifacts) {
  const fs::path dir = c.out;
  nlohmann::json files = nlohmann::json::object();
  for (const auto& a : artifacts)
    if (fs::exists(dir / a)) files[a] = sha256_hex(read_file(dir / a));
  const fs::path csv = dataset_csv(c);
  const nlohmann::json m = {{"config", c},
                            {"config_sha256", cli::config_hash(c)},
                            {"dataset", csv.string()},
                            {"dataset_sha256", fs::exists(csv) ? sha256_hex(read_file(csv)) : ""},
                            {"artifacts", files},
                            {"versions", versions()}};
  write_json(dir / "manifest.json", m);
}

void begin_run(const RunConfig& c) {
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "config.json", c);
}

// ---------------------------------------------------------------- commands

std::string group_table(const data::Dataset& ds) {
  std::ostringstream os;
  os << "| split |";
  for (std::size_t g = 0; g < ds.n_groups; ++g) os << " g" << g << " (y=" << g / 2 << ", s=" << g % 2 << ") |";
  os << " total |\n|---|";
  for (std::size_t g = 0; g <= ds.n_groups; ++g) os << "---|";
  os << "\n";
  for (auto sp : {data::Split::train, data::Split::val, data::Split::test}) {
    std::vector<std::size_t> counts(ds.n_groups, 0);
    std::size_t total = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.split[i] != sp) continue;
      ++counts[static_cast<std::size_t>(ds.group[i])];
      ++total;
    }
    os << "| " << data::to_string(sp) << " |";
    for (auto n : counts) os << " " << n << " |";
    os << " " << total << " |\n";
  }
  return os.str();
}

int cmd_generate(const Options& o) {
  RunConfig c = resolve_config(o);
  c.dataset_path.clear();
  const fs::path csv = fs::path(c.out) / "dataset.csv";
  refuse_overwrite(csv, o.force);
  begin_run(c);
  const auto g = data::generate(c.dataset);
  data::save_csv(g.data, csv);
  data::save_sidecar(g.info, data::sidecar_path(csv));
  write_manifest(c, {"dataset.csv", "dataset.json"});
  std::cout << "wrote " << g.data.size() << " rows to " << csv.string() << "\n\n" << group_table(g.data);
  return 0;
}

models::Blackbox train_and_save_blackbox(const RunConfig& c, const data::Dataset& ds) {
  const auto r = models::train_blackbox(ds, c.blackbox, c.seed);
  const fs::path dir = c.out;
  write_json(dir / "blackbox.json", r.model.to_json());
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : r.history) {
    hist.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"train_accuracy", e.train_accuracy},
                    {"val_accuracy", e.val_accuracy}});
  }
  const auto part = ds.split_view(data::Split::test);
  const auto gm = shortcut::group_metrics(models::argmax_rows(r.model.logits(part)), part.y, part.group, part.n_groups);
  write_json(dir / "blackbox_report.json", {{"history", hist}, {"test", shortcut::to_json(gm)}});
  std::cout << "blackbox: test accuracy " << fixed(gm.average, 4) << ", worst group " << fixed(gm.worst, 4)
            << " (group " << gm.worst_group << ")\n";
  return r.model;
}

int cmd_train_bb(const Options& o) {
  const RunConfig c = resolve_config(o);
  refuse_overwrite(fs::path(c.out) / "blackbox.json", o.force);
  const auto ds = load_dataset(c);
  begin_run(c);
  train_and_save_blackbox(c, ds);
  write_manifest(c, {"dataset.json", "blackbox.json", "blackbox_report.json"});
  return 0;
}

int cmd_carve(const Options& o) {
  const RunConfig c = resolve_config(o);
  const fs::path dir = c.out;
  refuse_overwrite(dir / "carve_state.json", o.force);
  const auto ds = load_dataset(c);
  begin_run(c);
  const models::Blackbox bb = o.train_bb ? train_and_save_blackbox(c, ds) : load_blackbox(dir);
  const auto state = carve::run_carving(bb, ds, c.carve);
  write_json(dir / "carve_state.json", carve::to_json(state));
  const auto rep = carve::evaluate(state, ds, c.shortcut.eval_split);
  write_json(dir / "carve_report.json", carve::to_json(rep));
  write_file(dir / "carve_report.md", carve::to_markdown(rep));
  write_manifest(c, {"dataset.json", "blackbox.json", "blackbox_report.json", "carve_state.json",
                     "carve_report.json", "carve_report.md"});
  std::cout << carve::to_markdown(rep);
  return 0;
}

int cmd_evaluate(const Options& o) {
  const fs::path dir = o.run_dir;
  const RunConfig c = stored_config(dir);
  const auto ds = load_dataset(c);
  const auto state = load_state(dir);
  const auto split = data::split_from_string(o.split);
  const auto rep = carve::evaluate(state, ds, split);
  write_json(dir / ("evaluation_" + o.split + ".json"), carve::to_json(rep));
  std::cout << carve::to_markdown(rep);
  return 0;
}

int cmd_explain(const Options& o) {
  const fs::path dir = o.run_dir;
  const RunConfig c = stored_config(dir);
  const auto ds = load_dataset(c);
  const auto state = load_state(dir);
  if (o.ids.empty()) throw ConfigError("explain: give at least one sample id");
  for (auto id : o.ids)
    if (id >= ds.size()) throw ConfigError("explain: sample id " + std::to_string(id) + " is not in the dataset (" +
                                           std::to_string(ds.size()) + " rows)");

  const auto rules = shortcut::extract_rules(state, ds, c.carve.attention_threshold);
  const auto rows = ds.subset(o.ids);
  const auto in = carve::compute_inputs(state, rows);
  const auto preds = carve::moie_predict(state, rows, carve::PredictMode::moie_plus_r);
  for (std::size_t i = 0; i < o.ids.size(); ++i) {
    std::cout << "sample " << o.ids[i] << " (" << data::to_string(rows.split[i]) << "): true " << rows.y[i]
              << ", predicted " << preds[i].label << "\n";
    if (preds[i].destination < 0) {
      std::cout << "  destination: residual\n  explanation: unexplained (residual)\n";
      continue;
    }
    const auto k = static_cast<std::size_t>(preds[i].destination);
    const auto& er = rules[k - 1];
    std::cout << "  destination: expert_" << k << "\n";
    const folx::FOLRule* rule = folx::find_rule(er.rules, preds[i].label);
    const auto bits = folx::binarize(in.concepts, static_cast<Eigen::Index>(i));
    if (!rule) {
      std::cout << "  explanation: none (expert_" << k << " never predicts class " << preds[i].label
                << " on train)\n";
      continue;
    }
    const auto local = folx::local_explanation(*rule, bits);
    std::cout << "  explanation: " << folx::to_text(local.conjunction, er.vocab)
              << (local.matched ? "" : "  (no rule conjunction holds; sample pattern shown)") << "\n";
  }
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) throw ConfigError("--seeds expects A..B, got '" + s + "'");
  std::uint64_t a = 0, b = 0;
  try {
    a = std::stoull(s.substr(0, dots));
    b = std::stoull(s.substr(dots + 2));
  } catch (const std::exception&) {
    throw ConfigError("--seeds expects A..B, got '" + s + "'");
  }
  if (b < a) throw ConfigError("--seeds: " + s + " is an empty range");
  std::vector<std::uint64_t> out;
  for (auto v = a; v <= b; ++v) out.push_back(v);
  return out;
}

int cmd_shortcut(const Options& o) {
  const RunConfig base = resolve_config(o);
  const bool sweep = !o.seeds.empty();
  const auto seeds = sweep ? parse_seeds(o.seeds) : std::vector<std::uint64_t>{base.seed};
  const fs::path root = base.out;
  refuse_overwrite(root / (sweep ? "summary.json" : "shortcut.json"), o.force);

  std::vector<shortcut::ShortcutReport> reports;
  for (auto seed : seeds) {
    RunConfig c = base;
    c.seed = seed;
    if (sweep) c.out = (root / ("seed_" + std::to_string(seed))).string();
    c.normalize();
    const fs::path dir = c.out;
    if (sweep) refuse_overwrite(dir / "shortcut.json", o.force);
    begin_run(c);
    data::Dataset ds;
    if (c.dataset_path.empty()) {
      const auto g = data::generate(c.dataset);
      data::save_csv(g.data, dir / "dataset.csv");
      data::save_sidecar(g.info, data::sidecar_path(dir / "dataset.csv"));
      ds = g.data;
    } else {
      ds = load_dataset(c);
    }
    // Every completed stage is written at once, so a later failure keeps it.
    const auto save = [&](const shortcut::ShortcutReport& r) {
      write_json(dir / "shortcut.json", shortcut::to_json(r));
      write_file(dir / "shortcut.md", shortcut::to_markdown(r));
    };
    shortcut::PipelineArtifacts art;
    try {
      reports.push_back(shortcut::run_pipeline(ds, c.pipeline(), seed, save, &art));
    } catch (...) {
      write_manifest(c, {"dataset.csv", "dataset.json", "shortcut.json", "shortcut.md"});
      throw;
    }
    if (art.biased_blackbox) write_json(dir / "blackbox.json", art.biased_blackbox->to_json());
    if (art.robust) write_json(dir / "carve_state.json", carve::to_json(*art.robust));
    write_manifest(c, {"dataset.csv", "dataset.json", "blackbox.json", "carve_state.json", "shortcut.json",
                       "shortcut.md"});
    std::cout << shortcut::to_markdown(reports.back()) << "\n";
  }
  if (sweep) {
    write_json(root / "config.json", base);
    write_json(root / "summary.json", shortcut::seeds_summary(reports));
    write_file(root / "summary.md", shortcut::seeds_markdown(reports));
    std::cout << shortcut::seeds_markdown(reports);
  }
  return 0;
}

int run_guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const StageOrderError& e) {
    std::cerr << "stage order error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Carve a blackbox classifier into interpretable experts and remove shortcut concepts"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options o;

  const auto run_flags = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run config JSON (unknown keys are rejected)")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Run directory (overrides the config)");
    sub->add_option("--seed", o.seed, "Root seed (overrides the config)");
    sub->add_flag("--force", o.force, "Overwrite existing outputs");
  };

  auto* gen = app.add_subcommand("generate", "Write the synthetic dataset and its sidecar");
  run_flags(gen);
  auto* tbb = app.add_subcommand("train-bb", "Train the blackbox on the run's dataset");
  run_flags(tbb);
  auto* carve_cmd = app.add_subcommand("carve", "Carve experts and the residual from the blackbox");
  run_flags(carve_cmd);
  carve_cmd->add_flag("--train-bb", o.train_bb, "Train the blackbox first instead of loading it");
  auto* sc = app.add_subcommand("shortcut", "Detect, eliminate and verify shortcut concepts");
  run_flags(sc);
  sc->add_option("--seeds", o.seeds, "Seed sweep A..B with per-seed and mean/std summary")->excludes("--seed");
  sc->add_flag("--skip-eliminate", o.skip_eliminate, "Skip elimination (verification then fails)");
  auto* ex = app.add_subcommand("explain", "Local explanations for dataset rows");
  ex->add_option("run_dir", o.run_dir, "Carved run directory")->required()->check(CLI::ExistingDirectory);
  ex->add_option("ids", o.ids, "Dataset row ids")->required();
  auto* ev = app.add_subcommand("evaluate", "Per-destination report of a carved run");
  ev->add_option("run_dir", o.run_dir, "Carved run directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", o.split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*gen) return run_guarded([&] { return cmd_generate(o); });
  if (*tbb) return run_guarded([&] { return cmd_train_bb(o); });
  if (*carve_cmd) return run_guarded([&] { return cmd_carve(o); });
  if (*sc) return run_guarded([&] { return cmd_shortcut(o); });
  if (*ex) return run_guarded([&] { return cmd_explain(o); });
  if (*ev) return run_guarded([&] { return cmd_evaluate(o); });
  return 1;
}
