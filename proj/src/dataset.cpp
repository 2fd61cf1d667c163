#include "moie/data/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "moie/errors.hpp"
#include "moie/rng.hpp"
#include "moie/util.hpp"

namespace moie::data {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

// ---------------------------------------------------------------------------
// Spec

namespace {

std::size_t core_assignments(const ShortcutSpec& spec) {
  return std::size_t{1} << spec.n_core_concepts;
}

}  // namespace

int apply_label_rule(const ShortcutSpec& spec, const std::vector<int>& core) {
  const auto ones = static_cast<std::size_t>(std::count(core.begin(), core.end(), 1));
  const std::string& r = spec.label_rule;
  if (r == "majority") return 2 * ones > core.size() ? 1 : 0;  // ties -> class 0
  if (r == "parity") return static_cast<int>(ones % 2);
  if (r == "any") return ones > 0 ? 1 : 0;
  if (r == "all") return !core.empty() && ones == core.size() ? 1 : 0;
  if (r == "first") return core.empty() ? 0 : core[0];
  if (r == "table") {
    std::size_t idx = 0;
    for (std::size_t j = 0; j < core.size(); ++j) idx |= static_cast<std::size_t>(core[j] != 0) << j;
    return spec.truth_table.at(idx);
  }
  throw ConfigError("unknown label_rule '" + r + "'");
}

void ShortcutSpec::validate() const {
  if (n_core_concepts == 0) throw ConfigError("n_core_concepts must be >= 1");
  if (n_core_concepts > 20) throw ConfigError("n_core_concepts must be <= 20");
  if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (n_spurious_concepts > 0 && n_classes != 2) {
    throw ConfigError("spurious concepts are only supported for n_classes == 2");
  }
  if (feature_dim < n_concepts()) {
    throw ConfigError("feature_dim (" + std::to_string(feature_dim) +
                      ") must be >= n_concepts for a full-rank mixing matrix");
  }
  for (double rho : {train_correlation, test_correlation}) {
    if (!(rho >= 0.5 && rho <= 1.0)) {
      throw ConfigError("correlations must lie in [0.5, 1.0], got " + format_double(rho));
    }
  }
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (!(spurious_scale > 0.0)) throw ConfigError("spurious_scale must be > 0");
  double total = 0.0;
  for (double f : split_fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be >= 0");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  if (label_rule == "table") {
    if (truth_table.size() != core_assignments(*this)) {
      throw ConfigError("truth_table must have 2^n_core_concepts entries");
    }
    for (int v : truth_table) {
      if (v < 0 || static_cast<std::size_t>(v) >= n_classes) {
        throw ConfigError("truth_table entry outside [0, n_classes)");
      }
    }
  }
  // Reject rules that are constant over the whole hypercube.
  std::vector<int> core(n_core_concepts);
  const int first = apply_label_rule(*this, core);
  bool varies = false;
  for (std::size_t a = 1; a < core_assignments(*this) && !varies; ++a) {
    for (std::size_t j = 0; j < n_core_concepts; ++j) core[j] = static_cast<int>((a >> j) & 1U);
    varies = apply_label_rule(*this, core) != first;
  }
  if (!varies) {
    throw ConfigError("label_rule '" + label_rule + "' is constant over all core assignments");
  }
}

void to_json(nlohmann::json& j, const ShortcutSpec& s) {
  j = {{"n_samples", s.n_samples},
       {"n_core_concepts", s.n_core_concepts},
       {"n_spurious_concepts", s.n_spurious_concepts},
       {"n_classes", s.n_classes},
       {"feature_dim", s.feature_dim},
       {"train_correlation", s.train_correlation},
       {"test_correlation", s.test_correlation},
       {"label_rule", s.label_rule},
       {"truth_table", s.truth_table},
       {"noise_std", s.noise_std},
       {"spurious_scale", s.spurious_scale},
       {"split_fractions", s.split_fractions},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, ShortcutSpec& s) {
  reject_unknown_keys(j,
                      {"n_samples", "n_core_concepts", "n_spurious_concepts", "n_classes",
                       "feature_dim", "train_correlation", "test_correlation", "label_rule",
                       "truth_table", "noise_std", "spurious_scale", "split_fractions", "seed"},
                      "dataset spec");
  ShortcutSpec d;
  s.n_samples = j.value("n_samples", d.n_samples);
  s.n_core_concepts = j.value("n_core_concepts", d.n_core_concepts);
  s.n_spurious_concepts = j.value("n_spurious_concepts", d.n_spurious_concepts);
  s.n_classes = j.value("n_classes", d.n_classes);
  s.feature_dim = j.value("feature_dim", d.feature_dim);
  s.train_correlation = j.value("train_correlation", d.train_correlation);
  s.test_correlation = j.value("test_correlation", d.test_correlation);
  s.label_rule = j.value("label_rule", d.label_rule);
  s.truth_table = j.value("truth_table", d.truth_table);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.spurious_scale = j.value("spurious_scale", d.spurious_scale);
  s.split_fractions = j.value("split_fractions", d.split_fractions);
  s.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------
// Dataset helpers

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == s) out.push_back(i);
  }
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Dataset out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.X.resize(n, X.cols());
  out.C.resize(n, C.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
    out.X.row(i) = X.row(r);
    out.C.row(i) = C.row(r);
    out.y.push_back(y[static_cast<std::size_t>(r)]);
    out.group.push_back(group[static_cast<std::size_t>(r)]);
    out.split.push_back(split[static_cast<std::size_t>(r)]);
  }
  out.concept_names = concept_names;
  out.n_classes = n_classes;
  out.n_groups = n_groups;
  return out;
}

Matrix Dataset::concept_columns(const std::vector<std::size_t>& concepts) const {
  Matrix out(C.rows(), static_cast<Eigen::Index>(concepts.size()));
  for (std::size_t k = 0; k < concepts.size(); ++k) {
    if (concepts[k] >= n_concepts()) {
      throw ConfigError("concept index " + std::to_string(concepts[k]) + " out of range");
    }
    out.col(static_cast<Eigen::Index>(k)) = C.col(static_cast<Eigen::Index>(concepts[k]));
  }
  return out;
}

std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& fractions) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = fractions[k] * static_cast<double>(n);
    // Guard against 0.7 * 10 = 6.9999999.
    counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[k] = exact - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k) {
      if (rem[k] > rem[best]) best = k;
    }
    ++counts[best];
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

Matrix draw_mixing(const ShortcutSpec& spec, Rng& rng) {
  const auto d = static_cast<Eigen::Index>(spec.feature_dim);
  const auto k = static_cast<Eigen::Index>(spec.n_concepts());
  for (int attempt = 0; attempt < 100; ++attempt) {
    Matrix a(d, k + 1);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = 2.0 * uniform01(rng) - 1.0;
    a.middleCols(static_cast<Eigen::Index>(spec.n_core_concepts),
                 static_cast<Eigen::Index>(spec.n_spurious_concepts)) *= spec.spurious_scale;
    Eigen::ColPivHouseholderQR<Matrix> qr(a.leftCols(k));
    if (qr.rank() == k) return a;
  }
  throw NumericalError("could not draw a full-column-rank mixing matrix");
}

void assign_groups(Dataset& ds, std::size_t n_core, std::size_t n_spurious) {
  ds.group.resize(ds.size());
  if (n_spurious == 0) {
    ds.n_groups = ds.n_classes;
    for (std::size_t i = 0; i < ds.size(); ++i) ds.group[i] = ds.y[i];
    return;
  }
  ds.n_groups = ds.n_classes * 2;
  const auto s = static_cast<Eigen::Index>(n_core);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ds.group[i] = ds.y[i] * 2 + static_cast<int>(ds.C(static_cast<Eigen::Index>(i), s));
  }
}

}  // namespace

Generated generate(const ShortcutSpec& spec) {
  spec.validate();
  Rng rng = substream(spec.seed, "data");
  const std::size_t n = spec.n_samples;
  const std::size_t kc = spec.n_core_concepts;
  const std::size_t ks = spec.n_spurious_concepts;

  Generated out;
  Dataset& ds = out.data;
  ds.n_classes = spec.n_classes;

  // Split tags first: the spurious correlation depends on the split.
  const auto counts = apportion(n, spec.split_fractions);
  ds.split.reserve(n);
  for (std::size_t k = 0; k < 3; ++k) ds.split.insert(ds.split.end(), counts[k], static_cast<Split>(k));
  std::shuffle(ds.split.begin(), ds.split.end(), rng);

  ds.C = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kc + ks));
  ds.y.resize(n);
  std::vector<int> core(kc);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < kc; ++j) {
      core[j] = uniform01(rng) < 0.5 ? 1 : 0;
      ds.C(r, static_cast<Eigen::Index>(j)) = core[j];
    }
    ds.y[i] = apply_label_rule(spec, core);
    const double rho = ds.split[i] == Split::train ? spec.train_correlation : spec.test_correlation;
    // One background factor; its concepts alternate polarity (land, water, ...).
    if (ks > 0) {
      const int bg = uniform01(rng) < rho ? ds.y[i] : 1 - ds.y[i];
      for (std::size_t j = 0; j < ks; ++j) ds.C(r, static_cast<Eigen::Index>(kc + j)) = j % 2 == 0 ? bg : 1 - bg;
    }
  }

  const Matrix mixing = draw_mixing(spec, rng);
  Matrix augmented(static_cast<Eigen::Index>(n), ds.C.cols() + 1);
  augmented << ds.C, Matrix::Ones(static_cast<Eigen::Index>(n), 1);
  ds.X = augmented * mixing.transpose();
  if (spec.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (Eigen::Index i = 0; i < ds.X.size(); ++i) ds.X.data()[i] += noise(rng);
  }

  for (std::size_t j = 0; j < kc; ++j) ds.concept_names.push_back("core_" + std::to_string(j));
  for (std::size_t j = 0; j < ks; ++j) ds.concept_names.push_back("background_" + std::to_string(j));
  assign_groups(ds, kc, ks);

  out.info.spec = spec;
  out.info.concept_names = ds.concept_names;
  out.info.spurious_mask.assign(kc + ks, false);
  for (std::size_t j = 0; j < ks; ++j) out.info.spurious_mask[kc + j] = true;
  out.info.mixing = mixing;
  return out;
}

Dataset split_dataset(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::vector<std::vector<std::size_t>> by_group(ds.n_groups);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int g = ds.group[i];
    if (g < 0 || static_cast<std::size_t>(g) >= ds.n_groups) {
      throw ConfigError("group id " + std::to_string(g) + " out of range at row " + std::to_string(i));
    }
    by_group[static_cast<std::size_t>(g)].push_back(i);
  }
  Rng rng = substream(seed, "split");
  Dataset out = ds;
  for (std::size_t g = 0; g < by_group.size(); ++g) {
    auto& rows = by_group[g];
    if (rows.empty()) continue;
    if (rows.size() < 3) {
      throw ConfigError("group " + std::to_string(g) + " has only " + std::to_string(rows.size()) +
                        " rows; stratified splitting needs at least 3");
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto counts = apportion(rows.size(), fractions);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t c = 0; c < counts[k]; ++c) out.split[rows[pos++]] = static_cast<Split>(k);
    }
  }
  return out;
}

std::vector<std::array<std::size_t, 3>> group_split_counts(const Dataset& ds) {
  std::vector<std::array<std::size_t, 3>> counts(ds.n_groups, {0, 0, 0});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    ++counts.at(static_cast<std::size_t>(ds.group[i]))[static_cast<std::size_t>(ds.split[i])];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// CSV

std::string to_csv(const Dataset& ds) {
  std::string out;
  const std::size_t d = ds.feature_dim();
  const std::size_t k = ds.n_concepts();
  for (std::size_t j = 0; j < d; ++j) out += "x" + std::to_string(j) + ",";
  for (std::size_t j = 0; j < k; ++j) out += "c" + std::to_string(j) + ",";
  out += "y,g,split\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < d; ++j) {
      out += format_double(ds.X(r, static_cast<Eigen::Index>(j)));
      out += ',';
    }
    for (std::size_t j = 0; j < k; ++j) {
      out += ds.C(r, static_cast<Eigen::Index>(j)) != 0.0 ? '1' : '0';
      out += ',';
    }
    out += std::to_string(ds.y[i]) + "," + std::to_string(ds.group[i]) + "," + to_string(ds.split[i]) + "\n";
  }
  return out;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) { write_file(path, to_csv(ds)); }

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      f.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  f.push_back(cur);
  return f;
}

[[noreturn]] void fail(std::size_t line, const std::string& msg) {
  throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) fail(line, "bad number '" + s + "'");
  return v;
}

int parse_int(const std::string& s, std::size_t line) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) fail(line, "bad integer '" + s + "'");
  return v;
}

}  // namespace

Dataset parse_csv(const std::string& text, const std::optional<DatasetInfo>& info) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(1, "missing header");
  const auto header = split_fields(line);

  std::size_t d = 0;
  while (d < header.size() && header[d] == "x" + std::to_string(d)) ++d;
  std::size_t k = 0;
  while (d + k < header.size() && header[d + k] == "c" + std::to_string(k)) ++k;
  const std::size_t expect_concepts = info ? info->concept_names.size() : k;
  if (info && d != info->spec.feature_dim) {
    fail(1, "expected " + std::to_string(info->spec.feature_dim) + " feature columns, found " +
                std::to_string(d));
  }
  if (k < expect_concepts) {
    fail(1, "missing concept column c" + std::to_string(k) +
                (info ? " (" + info->concept_names[k] + ")" : std::string()));
  }
  if (k > expect_concepts) fail(1, "unexpected concept column c" + std::to_string(expect_concepts));
  const std::vector<std::string> tail{"y", "g", "split"};
  if (header.size() != d + k + 3 || !std::equal(tail.begin(), tail.end(), header.begin() + static_cast<long>(d + k))) {
    const std::size_t bad = std::min(header.size(), d + k);
    fail(1, "malformed header at column " + std::to_string(bad + 1) + " ('" +
                (bad < header.size() ? header[bad] : std::string("<end>")) + "')");
  }

  std::vector<std::vector<double>> xs;
  std::vector<std::vector<double>> cs;
  Dataset ds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_fields(line);
    if (f.size() != header.size()) {
      fail(lineno, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
    }
    std::vector<double> x(d), c(k);
    for (std::size_t j = 0; j < d; ++j) x[j] = parse_double(f[j], lineno);
    for (std::size_t j = 0; j < k; ++j) {
      const int v = parse_int(f[d + j], lineno);
      if (v != 0 && v != 1) fail(lineno, "concept c" + std::to_string(j) + " must be 0 or 1");
      c[j] = v;
    }
    xs.push_back(std::move(x));
    cs.push_back(std::move(c));
    ds.y.push_back(parse_int(f[d + k], lineno));
    ds.group.push_back(parse_int(f[d + k + 1], lineno));
    try {
      ds.split.push_back(split_from_string(f[d + k + 2]));
    } catch (const ConfigError& e) {
      fail(lineno, e.what());
    }
    if (ds.y.back() < 0) fail(lineno, "negative label");
    if (ds.group.back() < 0) fail(lineno, "negative group id");
  }

  const auto n = static_cast<Eigen::Index>(xs.size());
  ds.X.resize(n, static_cast<Eigen::Index>(d));
  ds.C.resize(n, static_cast<Eigen::Index>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) ds.X(i, static_cast<Eigen::Index>(j)) = xs[static_cast<std::size_t>(i)][j];
    for (std::size_t j = 0; j < k; ++j) ds.C(i, static_cast<Eigen::Index>(j)) = cs[static_cast<std::size_t>(i)][j];
  }
  if (info) {
    ds.concept_names = info->concept_names;
    ds.n_classes = info->spec.n_classes;
    ds.n_groups = info->spec.n_spurious_concepts > 0 ? ds.n_classes * 2 : ds.n_classes;
  } else {
    for (std::size_t j = 0; j < k; ++j) ds.concept_names.push_back("c" + std::to_string(j));
    const int max_y = ds.y.empty() ? 1 : *std::max_element(ds.y.begin(), ds.y.end());
    const int max_g = ds.group.empty() ? 1 : *std::max_element(ds.group.begin(), ds.group.end());
    ds.n_classes = std::max<std::size_t>(2, static_cast<std::size_t>(max_y) + 1);
    ds.n_groups = std::max<std::size_t>(ds.n_classes, static_cast<std::size_t>(max_g) + 1);
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (static_cast<std::size_t>(ds.y[i]) >= ds.n_classes) fail(i + 2, "label out of range");
    if (static_cast<std::size_t>(ds.group[i]) >= ds.n_groups) fail(i + 2, "group id out of range");
  }
  return ds;
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  p.replace_extension(".json");
  return p;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::optional<DatasetInfo> info;
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) info = load_sidecar(side);
  return parse_csv(read_file(path), info);
}

nlohmann::json to_json(const DatasetInfo& info) {
  nlohmann::json mixing = nlohmann::json::array();
  for (Eigen::Index i = 0; i < info.mixing.rows(); ++i) {
    std::vector<double> row(info.mixing.row(i).data(), info.mixing.row(i).data() + info.mixing.cols());
    mixing.push_back(row);
  }
  nlohmann::json spec;
  to_json(spec, info.spec);
  return {{"spec", spec},
          {"concept_names", info.concept_names},
          {"spurious_mask", info.spurious_mask},
          {"mixing", mixing}};
}

DatasetInfo info_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"spec", "concept_names", "spurious_mask", "mixing"}, "dataset sidecar");
  DatasetInfo info;
  try {
    from_json(j.at("spec"), info.spec);
    info.concept_names = j.at("concept_names").get<std::vector<std::string>>();
    info.spurious_mask = j.at("spurious_mask").get<std::vector<bool>>();
    const auto rows = j.at("mixing").get<std::vector<std::vector<double>>>();
    info.mixing.resize(static_cast<Eigen::Index>(rows.size()),
                       rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != static_cast<std::size_t>(info.mixing.cols())) {
        throw ConfigError("dataset sidecar: ragged mixing matrix");
      }
      for (std::size_t c = 0; c < rows[i].size(); ++c) {
        info.mixing(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset sidecar: ") + e.what());
  }
  if (info.concept_names.size() != info.spec.n_concepts() ||
      info.spurious_mask.size() != info.spec.n_concepts()) {
    throw ConfigError("dataset sidecar: concept_names/spurious_mask do not match the spec");
  }
  return info;
}

void save_sidecar(const DatasetInfo& info, const std::filesystem::path& path) {
  write_file(path, to_json(info).dump(2) + "\n");
}

DatasetInfo load_sidecar(const std::filesystem::path& path) {
  try {
    return info_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "': " + e.what());
  }
}

}  // namespace moie::data
