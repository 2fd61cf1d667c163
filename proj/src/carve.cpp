#include "moie/carve/carve.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "moie/diff/loss.hpp"
#include "moie/diff/ops.hpp"
#include "moie/errors.hpp"
#include "moie/rng.hpp"
#include "moie/util.hpp"

namespace moie::carve {

using models::Blackbox;
using models::EntropyExpert;
using models::Selector;

// ---------------------------------------------------------------- config

double CarveConfig::tau_at(std::size_t k) const {
  if (k == 0 || k > tau.size()) throw ConfigError("no coverage target for iteration " + std::to_string(k));
  return tau[k - 1];
}

double CarveConfig::lambda_s_at(std::size_t k) const {
  if (lambda_s.size() == 1) return lambda_s[0];
  if (k == 0 || k > lambda_s.size()) throw ConfigError("no lambda_s for iteration " + std::to_string(k));
  return lambda_s[k - 1];
}

void CarveConfig::validate() const {
  if (max_iterations == 0) throw ConfigError("carve: max_iterations must be at least 1");
  if (tau.size() < max_iterations) {
    throw ConfigError("carve: tau lists " + std::to_string(tau.size()) + " targets for " +
                      std::to_string(max_iterations) + " iterations");
  }
  for (double t : tau)
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("carve: every tau must lie in (0, 1]");
  if (lambda_s.empty() || (lambda_s.size() != 1 && lambda_s.size() < max_iterations)) {
    throw ConfigError("carve: lambda_s needs one value or one per iteration");
  }
  for (double l : lambda_s)
    if (!(l > 0.0)) throw ConfigError("carve: lambda_s must be positive");
  if (!(coverage_stop > 0.0 && coverage_stop <= 1.0)) throw ConfigError("carve: coverage_stop must lie in (0, 1]");
  if (alpha_kd < 0.0 || alpha_kd > 1.0) throw ConfigError("carve: alpha_kd must lie in [0, 1]");
  if (!(temp_kd > 0.0)) throw ConfigError("carve: temp_kd must be positive");
  if (!(temp_lens > 0.0)) throw ConfigError("carve: temp_lens must be positive");
  if (lambda_lens < 0.0) throw ConfigError("carve: lambda_lens must be non-negative");
  if (!(lr_expert > 0.0) || !(lr_residual > 0.0)) throw ConfigError("carve: learning rates must be positive");
  if (batch_size < 2) throw ConfigError("carve: batch_size must be at least 2");
  if (concept_gate < 0.0 || concept_gate > 1.0) throw ConfigError("carve: concept_gate must lie in [0, 1]");
}

std::vector<std::string> CarveConfig::preset_names() {
  return {"synthetic", "cub_resnet", "cub_vit", "awa2_resnet", "awa2_vit", "ham10000", "mimic_cxr"};
}

CarveConfig CarveConfig::preset(const std::string& name) {
  CarveConfig c;
  const auto experts = [&c](std::vector<double> tau) {
    c.max_iterations = tau.size();
    c.tau = std::move(tau);
  };
  if (name == "synthetic") return c;
  c.lambda_lens = 1e-4;
  c.temp_kd = 10.0;
  c.expert_hidden = {10};
  c.lambda_s = {32.0};
  c.lr_expert = 0.01;
  if (name == "cub_resnet" || name == "cub_vit") {
    experts(std::vector<double>(6, 0.2));
    c.batch_size = 16;
    c.alpha_kd = name == "cub_vit" ? 0.99 : 0.9;
    c.temp_lens = name == "cub_vit" ? 6.0 : 0.7;
  } else if (name == "awa2_resnet") {
    experts({0.4, 0.35, 0.35, 0.25});
    c.batch_size = 30;
    c.lr_expert = 0.001;
    c.alpha_kd = 0.9;
    c.temp_lens = 0.7;
  } else if (name == "awa2_vit") {
    experts(std::vector<double>(6, 0.2));
    c.batch_size = 30;
    c.alpha_kd = 0.99;
    c.temp_lens = 6.0;
  } else if (name == "ham10000") {
    experts({0.4, 0.2, 0.2, 0.2, 0.1, 0.1});
    c.batch_size = 32;
    c.alpha_kd = 0.9;
    c.lambda_s = {64.0};
    c.temp_lens = 0.7;
  } else if (name == "mimic_cxr") {
    experts({0.6, 0.2, 0.15});
    c.batch_size = 1028;
    c.alpha_kd = 0.99;
    c.temp_kd = 20.0;
    c.expert_hidden = {20, 20};
    c.lambda_s = {96.0, 128.0, 256.0};
    c.temp_lens = 7.6;
  } else {
    throw ConfigError("unknown carve preset '" + name + "'");
  }
  return c;
}

namespace {

std::string optim_name(diff::OptimKind k) { return k == diff::OptimKind::adam ? "adam" : "sgd"; }

diff::OptimKind optim_from(const std::string& s) {
  if (s == "adam") return diff::OptimKind::adam;
  if (s == "sgd") return diff::OptimKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const CarveConfig& c) {
  j = {{"max_iterations", c.max_iterations},
       {"tau", c.tau},
       {"lambda_s", c.lambda_s},
       {"alpha_kd", c.alpha_kd},
       {"temp_kd", c.temp_kd},
       {"lambda_lens", c.lambda_lens},
       {"temp_lens", c.temp_lens},
       {"expert_hidden", c.expert_hidden},
       {"selector_hidden", c.selector_hidden},
       {"optimizer", optim_name(c.optimizer)},
       {"lr_expert", c.lr_expert},
       {"lr_residual", c.lr_residual},
       {"epochs_expert", c.epochs_expert},
       {"epochs_residual", c.epochs_residual},
       {"batch_size", c.batch_size},
       {"coverage_stop", c.coverage_stop},
       {"coverage_tolerance", c.coverage_tolerance},
       {"concept_gate", c.concept_gate},
       {"attention_threshold", c.attention_threshold},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CarveConfig& c) {
  reject_unknown_keys(j,
                      {"preset", "max_iterations", "tau", "lambda_s", "alpha_kd", "temp_kd", "lambda_lens",
                       "temp_lens", "expert_hidden", "selector_hidden", "optimizer", "lr_expert", "lr_residual",
                       "epochs_expert", "epochs_residual", "batch_size", "coverage_stop", "coverage_tolerance",
                       "concept_gate", "attention_threshold", "seed"},
                      "carve config");
  try {
    if (j.contains("preset")) c = CarveConfig::preset(j.at("preset").get<std::string>());
    const auto get = [&j](const char* key, auto& out) {
      if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
    };
    get("max_iterations", c.max_iterations);
    get("tau", c.tau);
    if (j.contains("lambda_s")) {
      c.lambda_s = j.at("lambda_s").is_array() ? j.at("lambda_s").get<std::vector<double>>()
                                               : std::vector<double>{j.at("lambda_s").get<double>()};
    }
    get("alpha_kd", c.alpha_kd);
    get("temp_kd", c.temp_kd);
    get("lambda_lens", c.lambda_lens);
    get("temp_lens", c.temp_lens);
    get("expert_hidden", c.expert_hidden);
    get("selector_hidden", c.selector_hidden);
    if (j.contains("optimizer")) c.optimizer = optim_from(j.at("optimizer").get<std::string>());
    get("lr_expert", c.lr_expert);
    get("lr_residual", c.lr_residual);
    get("epochs_expert", c.epochs_expert);
    get("epochs_residual", c.epochs_residual);
    get("batch_size", c.batch_size);
    get("coverage_stop", c.coverage_stop);
    get("coverage_tolerance", c.coverage_tolerance);
    get("concept_gate", c.concept_gate);
    get("attention_threshold", c.attention_threshold);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("carve config: ") + e.what());
  }
  if (j.contains("tau") && !j.contains("max_iterations")) c.max_iterations = c.tau.size();
  c.validate();
}

// ---------------------------------------------------------------- primitives

const diff::Mlp& CarveState::head(std::size_t k) const {
  if (k == 0) return blackbox.head;
  if (k > iterations.size()) throw StageOrderError("no residual head for iteration " + std::to_string(k));
  return iterations[k - 1].residual_head;
}

double cumulative_weight(const std::vector<double>& pis, std::size_t k) {
  if (k == 0 || k > pis.size()) throw ConfigError("cumulative_weight: k out of range");
  for (double p : pis) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("cumulative_weight: selector output outside [0, 1]");
  }
  double w = pis[k - 1];
  for (std::size_t i = 0; i + 1 < k; ++i) w *= 1.0 - pis[i];
  return w;
}

Tensor cumulative_weight(const Tensor& pi_k, const Matrix& prev_residual) {
  return diff::mul(pi_k, Tensor::constant(prev_residual));
}

double selective_risk(const std::vector<double>& weighted_losses, const std::vector<double>& coverage) {
  if (weighted_losses.empty() || weighted_losses.size() != coverage.size()) {
    throw ShapeError("selective_risk: need equally many losses and coverages, at least one");
  }
  const double m = static_cast<double>(coverage.size());
  const double zeta = std::accumulate(coverage.begin(), coverage.end(), 0.0) / m;
  if (!(zeta > 0.0)) throw NumericalError("selective_risk: zero coverage (selector collapsed)");
  return std::accumulate(weighted_losses.begin(), weighted_losses.end(), 0.0) / m / zeta;
}

Tensor selective_risk(const Tensor& weighted_losses, const Tensor& coverage) {
  const Tensor zeta = diff::mean(coverage);
  if (!(zeta.item() > 0.0)) throw NumericalError("selective_risk: zero coverage (selector collapsed)");
  return diff::div(diff::mean(weighted_losses), zeta);
}

Matrix residual_logits(const Matrix& f_prev, const Matrix& g) {
  if (f_prev.rows() != g.rows() || f_prev.cols() != g.cols()) {
    throw ShapeError("residual_logits: " + diff::shape_str(f_prev) + " vs " + diff::shape_str(g));
  }
  return f_prev - g;
}

Tensor residual_logits(const Tensor& f_prev, const Tensor& g) { return diff::sub(f_prev, g); }

Route route(const std::vector<double>& pis, std::size_t index) {
  Route r;
  r.index = index;
  r.pis = pis;
  for (std::size_t k = 0; k < pis.size(); ++k) {
    if (pis[k] >= 0.5) {
      r.destination = static_cast<int>(k + 1);
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------- helpers

namespace {

constexpr std::size_t kChunk = 1024;

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<int> take(const std::vector<int>& v, const std::vector<std::size_t>& rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = v[rows[i]];
  return out;
}

// Applies a row-wise model in fixed chunks, possibly in parallel.
template <typename Fn>
Matrix map_rows(const Matrix& in, Eigen::Index out_cols, Fn fn) {
  Matrix out(in.rows(), out_cols);
  parallel_chunks(static_cast<std::size_t>(in.rows()), kChunk, [&](std::size_t b, std::size_t e) {
    const auto rb = static_cast<Eigen::Index>(b);
    const auto n = static_cast<Eigen::Index>(e - b);
    out.middleRows(rb, n) = fn(Matrix(in.middleRows(rb, n)));
  });
  return out;
}

// Selector outputs [n, K] for the given concept rows.
Matrix all_pis(const CarveState& state, const Matrix& concepts, std::size_t upto) {
  Matrix pis(concepts.rows(), static_cast<Eigen::Index>(upto));
  for (std::size_t k = 0; k < upto; ++k) {
    const auto& sel = state.iterations[k].selector;
    pis.col(static_cast<Eigen::Index>(k)) = map_rows(concepts, 1, [&](const Matrix& c) { return sel.infer(c); });
  }
  return pis;
}

std::vector<int> destinations(const Matrix& pis) {
  std::vector<int> out(static_cast<std::size_t>(pis.rows()), -1);
  for (Eigen::Index i = 0; i < pis.rows(); ++i) {
    for (Eigen::Index k = 0; k < pis.cols(); ++k) {
      if (pis(i, k) >= 0.5) {
        out[static_cast<std::size_t>(i)] = static_cast<int>(k + 1);
        break;
      }
    }
  }
  return out;
}

// prod_{i<k}(1 - pi^i) per row, as a column.
Matrix prev_residual(const Matrix& pis, std::size_t k) {
  Matrix out = Matrix::Ones(pis.rows(), 1);
  for (std::size_t i = 0; i + 1 < k; ++i) out.array() *= 1.0 - pis.col(static_cast<Eigen::Index>(i)).array();
  return out;
}

diff::Optimizer make_optimizer(const CarveConfig& cfg, double lr, std::vector<diff::NamedParameter> params) {
  diff::OptimConfig oc;
  oc.kind = cfg.optimizer;
  oc.lr = lr;
  return diff::Optimizer(oc, std::move(params));
}

void check_finite(double v, const std::string& what, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    throw NumericalError(what + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch));
  }
}

}  // namespace

Inputs compute_inputs(const CarveState& state, const data::Dataset& ds) {
  const Matrix meta = state.blackbox.metadata(ds);
  Inputs in;
  in.phi = Matrix(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(state.blackbox.repr_dim()));
  parallel_chunks(ds.size(), kChunk, [&](std::size_t b, std::size_t e) {
    const auto rb = static_cast<Eigen::Index>(b);
    const auto n = static_cast<Eigen::Index>(e - b);
    in.phi.middleRows(rb, n) = state.blackbox.phi_infer(ds.X.middleRows(rb, n), meta.middleRows(rb, n));
  });
  const auto k = static_cast<Eigen::Index>(state.projector.included_indices().size());
  in.concepts = map_rows(in.phi, k, [&](const Matrix& p) { return models::project(state.projector, p); });
  return in;
}

std::vector<Route> route_all(const CarveState& state, const Matrix& concepts) {
  const Matrix pis = all_pis(state, concepts, state.n_iterations());
  std::vector<Route> out(static_cast<std::size_t>(pis.rows()));
  for (Eigen::Index i = 0; i < pis.rows(); ++i) {
    std::vector<double> p(pis.row(i).data(), pis.row(i).data() + pis.cols());
    out[static_cast<std::size_t>(i)] = route(p, static_cast<std::size_t>(i));
  }
  return out;
}

std::vector<Prediction> moie_predict(const CarveState& state, const data::Dataset& ds, PredictMode mode) {
  const Inputs in = compute_inputs(state, ds);
  const auto dest = destinations(all_pis(state, in.concepts, state.n_iterations()));
  std::vector<Prediction> out(ds.size());
  std::vector<std::vector<std::size_t>> by_dest(state.n_iterations() + 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out[i].destination = dest[i];
    by_dest[dest[i] < 0 ? 0 : static_cast<std::size_t>(dest[i])].push_back(i);
  }
  for (std::size_t k = 1; k <= state.n_iterations(); ++k) {
    if (by_dest[k].empty()) continue;
    const auto pred = models::argmax_rows(
        models::entropy_infer(state.iterations[k - 1].expert, take_rows(in.concepts, by_dest[k])));
    for (std::size_t j = 0; j < by_dest[k].size(); ++j) out[by_dest[k][j]].label = pred[j];
  }
  if (mode == PredictMode::moie_plus_r && !by_dest[0].empty()) {
    const diff::Mlp& head = state.head(state.n_iterations());
    const auto pred = models::argmax_rows(head.infer(take_rows(in.phi, by_dest[0])));
    for (std::size_t j = 0; j < by_dest[0].size(); ++j) out[by_dest[0][j]].label = pred[j];
  }
  return out;
}

// ---------------------------------------------------------------- training

void carve_iteration(CarveState& state, const data::Dataset& ds, std::size_t k, const CarveConfig& cfg) {
  cfg.validate();
  if (k != state.n_iterations() + 1) {
    throw StageOrderError("carve_iteration: iteration " + std::to_string(k) + " requested after " +
                          std::to_string(state.n_iterations()) + " completed");
  }
  const auto tr = ds.indices(data::Split::train);
  if (tr.empty()) throw ConfigError("carve: dataset has no train split");
  const Inputs all = compute_inputs(state, ds);
  const Matrix phi = take_rows(all.phi, tr);
  const Matrix conc = take_rows(all.concepts, tr);
  const std::vector<int> y = take(ds.y, tr);
  const auto n = tr.size();
  const diff::Mlp& prev_head = state.head(k - 1);
  const Matrix teacher = prev_head.infer(phi);
  const Matrix prev = prev_residual(all_pis(state, conc, k - 1), k);

  const double tau = cfg.tau_at(k);
  const double lambda_s = cfg.lambda_s_at(k);
  const diff::DistillParams kd{cfg.alpha_kd, cfg.temp_kd};
  const std::string tag = std::to_string(k);

  Rng init = substream(cfg.seed, "init.carve." + tag);
  Iteration it{Selector::create(conc.cols(), cfg.selector_hidden, init),
               EntropyExpert::create(conc.cols(), ds.n_classes, cfg.expert_hidden, cfg.temp_lens, init),
               prev_head.clone(),
               {}};
  auto opt = make_optimizer(cfg, cfg.lr_expert,
                            diff::concat(it.selector.body.parameters("selector."), it.expert.parameters("expert.")));

  Rng shuffle = substream(cfg.seed, "shuffle.carve." + tag);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::min(cfg.batch_size, n);
  const auto batch_rows = [&](std::size_t start) {
    return std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
  };

  double last_risk = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_expert; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    std::size_t batch = 0;
    for (std::size_t start = 0; start < n; start += bs, ++batch) {
      const auto rows = batch_rows(start);
      const Tensor c = Tensor::constant(take_rows(conc, rows));
      const Tensor w = cumulative_weight(it.selector.forward(c), take_rows(prev, rows));
      const Tensor per = diff::kd_loss_per_sample(models::entropy_forward(it.expert, c), take_rows(teacher, rows),
                                                  take(y, rows), kd);
      const Tensor zeta = diff::mean(w);
      if (!(zeta.item() > 0.0)) {
        // Every sample in the batch is already absorbed by earlier experts.
        continue;
      }
      const Tensor risk = selective_risk(diff::mul(w, per), w);
      const Tensor shortfall = diff::relu(diff::add_scalar(diff::scale(zeta, -1.0), tau));
      Tensor loss = diff::add(risk, diff::scale(diff::square(shortfall), lambda_s));
      if (cfg.lambda_lens > 0) loss = diff::add(loss, diff::scale(models::attention_entropy(it.expert), cfg.lambda_lens));
      check_finite(loss.item(), "carve iteration " + tag, epoch, batch);
      diff::backward(loss);
      opt.step();
      last_risk = risk.item();
    }
  }

  // Residual head h^k distilled from r^k = f^{k-1} - pi^k g^k on what is left.
  // Gating by pi^k keeps g^k's untrained output on uncovered samples out of
  // the target; on covered samples it is the plain difference.
  const Matrix g = models::entropy_infer(it.expert, conc);
  const Matrix pi_k = it.selector.infer(conc);
  const Matrix r = residual_logits(teacher, Matrix(g.array().colwise() * pi_k.col(0).array()));
  const Matrix w_res = (prev.array() * (1.0 - pi_k.array())).matrix();
  auto ropt = make_optimizer(cfg, cfg.lr_residual, it.residual_head.parameters("residual."));
  Rng rshuffle = substream(cfg.seed, "shuffle.residual." + tag);
  double last_res = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_residual; ++epoch) {
    std::shuffle(order.begin(), order.end(), rshuffle);
    std::size_t batch = 0;
    for (std::size_t start = 0; start < n; start += bs, ++batch) {
      const auto rows = batch_rows(start);
      const Matrix wb = take_rows(w_res, rows);
      const double wsum = wb.sum();
      if (!(wsum > 1e-12)) continue;
      const Tensor student = it.residual_head.forward(Tensor::constant(take_rows(phi, rows)));
      const Tensor per = diff::kd_loss_per_sample(student, take_rows(r, rows), take(y, rows), kd);
      const Tensor loss = diff::scale(diff::sum(diff::mul(per, Tensor::constant(wb))), 1.0 / wsum);
      check_finite(loss.item(), "residual " + tag, epoch, batch);
      diff::backward(loss);
      ropt.step();
      last_res = loss.item();
    }
  }

  // Bookkeeping on the train split.
  auto& rec = it.record;
  rec.k = k;
  rec.tau = tau;
  rec.lambda_s = lambda_s;
  rec.zeta = (pi_k.array() * prev.array()).mean();
  rec.final_selective_risk = last_risk;
  rec.final_residual_loss = last_res;
  rec.coverage_shortfall = rec.zeta < tau - cfg.coverage_tolerance;
  state.iterations.push_back(std::move(it));

  const auto dest = destinations(all_pis(state, conc, k));
  std::vector<std::size_t> mine;
  std::size_t covered = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (dest[i] > 0) ++covered;
    if (dest[i] == static_cast<int>(k)) mine.push_back(i);
  }
  auto& stored = state.iterations.back().record;
  stored.hard_coverage = static_cast<double>(mine.size()) / static_cast<double>(n);
  stored.cumulative_coverage = static_cast<double>(covered) / static_cast<double>(n);
  if (!mine.empty()) {
    const auto pred = models::argmax_rows(take_rows(g, mine));
    const auto teach = models::argmax_rows(take_rows(teacher, mine));
    std::size_t ok = 0, agree = 0;
    for (std::size_t j = 0; j < mine.size(); ++j) {
      ok += pred[j] == y[mine[j]];
      agree += pred[j] == teach[j];
    }
    stored.expert_train_accuracy = static_cast<double>(ok) / static_cast<double>(mine.size());
    stored.expert_fidelity = static_cast<double>(agree) / static_cast<double>(mine.size());
  }
  state.cumulative_coverage = stored.cumulative_coverage;
}

CarveState run_carving(const Blackbox& bb, const data::Dataset& ds, const CarveConfig& cfg) {
  cfg.validate();
  CarveState state;
  state.blackbox = bb.clone();
  models::ProbeConfig pc;
  pc.gate = cfg.concept_gate;
  state.projector = models::train_projector(state.blackbox.features(ds), ds, pc);
  for (std::size_t k = 1; k <= cfg.max_iterations; ++k) {
    carve_iteration(state, ds, k, cfg);
    if (state.cumulative_coverage >= cfg.coverage_stop) break;
  }
  return state;
}

// ---------------------------------------------------------------- reports

IterationReport evaluate(const CarveState& state, const data::Dataset& ds, data::Split split) {
  const auto rows = ds.indices(split);
  if (rows.empty()) throw ConfigError("evaluate: split '" + data::to_string(split) + "' is empty");
  const data::Dataset part = ds.subset(rows);
  const Inputs in = compute_inputs(state, part);
  const auto dest = destinations(all_pis(state, in.concepts, state.n_iterations()));
  const std::size_t n = part.size();
  const std::size_t K = state.n_iterations();

  IterationReport rep;
  rep.split = data::to_string(split);
  rep.n = n;
  const Matrix f0 = state.blackbox.head.infer(in.phi);
  const auto f0_pred = models::argmax_rows(f0);
  const auto fk_pred = models::argmax_rows(state.head(K).infer(in.phi));

  std::vector<std::vector<std::size_t>> by_dest(K + 1);
  for (std::size_t i = 0; i < n; ++i) by_dest[dest[i] < 0 ? 0 : static_cast<std::size_t>(dest[i])].push_back(i);

  std::size_t correct_all = 0, correct_covered = 0, covered = 0, f0_ok = 0;
  for (std::size_t i = 0; i < n; ++i) f0_ok += f0_pred[i] == part.y[i];
  const auto fill = [&](DestinationReport& d, std::size_t ok) {
    d.coverage = static_cast<double>(d.count) / static_cast<double>(n);
    d.accuracy = d.count ? static_cast<double>(ok) / static_cast<double>(d.count) : 0.0;
    d.proportional_accuracy = d.accuracy * d.coverage;
  };
  for (std::size_t k = 1; k <= K; ++k) {
    DestinationReport d;
    d.name = "expert_" + std::to_string(k);
    d.count = by_dest[k].size();
    std::size_t ok = 0;
    if (d.count) {
      const auto pred = models::argmax_rows(models::entropy_infer(state.iterations[k - 1].expert,
                                                                  take_rows(in.concepts, by_dest[k])));
      for (std::size_t j = 0; j < d.count; ++j) ok += pred[j] == part.y[by_dest[k][j]];
    }
    fill(d, ok);
    covered += d.count;
    correct_covered += ok;
    rep.destinations.push_back(d);
  }
  DestinationReport res;
  res.name = "residual";
  res.count = by_dest[0].size();
  std::size_t res_ok = 0, res_f0_ok = 0;
  for (auto i : by_dest[0]) {
    res_ok += fk_pred[i] == part.y[i];
    res_f0_ok += f0_pred[i] == part.y[i];
  }
  fill(res, res_ok);
  rep.destinations.push_back(res);
  correct_all = correct_covered + res_ok;

  const auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  rep.blackbox_accuracy = frac(f0_ok, n);
  rep.residual_blackbox_accuracy = frac(res_f0_ok, res.count);
  rep.moie_coverage = frac(covered, n);
  rep.moie_accuracy = frac(correct_covered, covered);
  rep.moie_plus_r_accuracy = frac(correct_all, n);
  for (const auto& it : state.iterations) rep.training.push_back(it.record);
  return rep;
}

nlohmann::json to_json(const IterationRecord& r) {
  return {{"k", r.k},
          {"tau", r.tau},
          {"lambda_s", r.lambda_s},
          {"zeta", r.zeta},
          {"hard_coverage", r.hard_coverage},
          {"cumulative_coverage", r.cumulative_coverage},
          {"coverage_shortfall", r.coverage_shortfall},
          {"expert_train_accuracy", r.expert_train_accuracy},
          {"expert_fidelity", r.expert_fidelity},
          {"final_selective_risk", r.final_selective_risk},
          {"final_residual_loss", r.final_residual_loss}};
}

namespace {

IterationRecord record_from_json(const nlohmann::json& j) {
  IterationRecord r;
  r.k = j.at("k").get<std::size_t>();
  r.tau = j.at("tau").get<double>();
  r.lambda_s = j.at("lambda_s").get<double>();
  r.zeta = j.at("zeta").get<double>();
  r.hard_coverage = j.at("hard_coverage").get<double>();
  r.cumulative_coverage = j.at("cumulative_coverage").get<double>();
  r.coverage_shortfall = j.at("coverage_shortfall").get<bool>();
  r.expert_train_accuracy = j.at("expert_train_accuracy").get<double>();
  r.expert_fidelity = j.at("expert_fidelity").get<double>();
  r.final_selective_risk = j.at("final_selective_risk").get<double>();
  r.final_residual_loss = j.at("final_residual_loss").get<double>();
  return r;
}

}  // namespace

nlohmann::json to_json(const IterationReport& r) {
  nlohmann::json dests = nlohmann::json::array();
  for (const auto& d : r.destinations) {
    dests.push_back({{"name", d.name},
                     {"count", d.count},
                     {"coverage", d.coverage},
                     {"accuracy", d.accuracy},
                     {"proportional_accuracy", d.proportional_accuracy}});
  }
  nlohmann::json training = nlohmann::json::array();
  for (const auto& t : r.training) training.push_back(to_json(t));
  return {{"split", r.split},
          {"n", r.n},
          {"destinations", dests},
          {"blackbox_accuracy", r.blackbox_accuracy},
          {"residual_blackbox_accuracy", r.residual_blackbox_accuracy},
          {"moie_coverage", r.moie_coverage},
          {"moie_accuracy", r.moie_accuracy},
          {"moie_plus_r_accuracy", r.moie_plus_r_accuracy},
          {"training", training}};
}

std::string to_markdown(const IterationReport& r) {
  std::ostringstream os;
  os << "### Routing on " << r.split << " (n = " << r.n << ")\n\n";
  os << "| destination | count | coverage | accuracy | proportional accuracy |\n";
  os << "|---|---:|---:|---:|---:|\n";
  for (const auto& d : r.destinations) {
    os << "| " << d.name << " | " << d.count << " | " << fixed(d.coverage, 4) << " | " << fixed(d.accuracy, 4)
       << " | " << fixed(d.proportional_accuracy, 4) << " |\n";
  }
  os << "\n- blackbox accuracy: " << fixed(r.blackbox_accuracy, 4) << "\n";
  os << "- blackbox accuracy on residual samples: " << fixed(r.residual_blackbox_accuracy, 4) << "\n";
  os << "- MoIE coverage / accuracy: " << fixed(r.moie_coverage, 4) << " / " << fixed(r.moie_accuracy, 4) << "\n";
  os << "- MoIE+R accuracy: " << fixed(r.moie_plus_r_accuracy, 4) << "\n";
  if (!r.training.empty()) {
    os << "\n| k | tau | zeta | hard coverage | cumulative | shortfall |\n|---:|---:|---:|---:|---:|---|\n";
    for (const auto& t : r.training) {
      os << "| " << t.k << " | " << fixed(t.tau, 2) << " | " << fixed(t.zeta, 4) << " | " << fixed(t.hard_coverage, 4)
         << " | " << fixed(t.cumulative_coverage, 4) << " | " << (t.coverage_shortfall ? "yes" : "no") << " |\n";
    }
  }
  return os.str();
}

nlohmann::json to_json(const CarveState& s) {
  nlohmann::json its = nlohmann::json::array();
  for (const auto& it : s.iterations) {
    its.push_back({{"selector", it.selector.to_json()},
                   {"expert", it.expert.to_json()},
                   {"residual_head", it.residual_head.to_json()},
                   {"record", to_json(it.record)}});
  }
  return {{"blackbox", s.blackbox.to_json()},
          {"projector", s.projector.to_json()},
          {"iterations", its},
          {"cumulative_coverage", s.cumulative_coverage}};
}

CarveState state_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"blackbox", "projector", "iterations", "cumulative_coverage"}, "carve state");
  CarveState s;
  try {
    s.blackbox = Blackbox::from_json(j.at("blackbox"));
    s.projector = models::Projector::from_json(j.at("projector"));
    for (const auto& ij : j.at("iterations")) {
      s.iterations.push_back({Selector::from_json(ij.at("selector")), EntropyExpert::from_json(ij.at("expert")),
                              diff::Mlp::from_json(ij.at("residual_head")), record_from_json(ij.at("record"))});
    }
    s.cumulative_coverage = j.at("cumulative_coverage").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed carve state: ") + e.what());
  }
  return s;
}

}  // namespace moie::carve
