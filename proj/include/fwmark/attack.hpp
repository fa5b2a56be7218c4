/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fwmark/data.hpp"
#include "fwmark/model.hpp"
#include "fwmark/ops.hpp"
#include "fwmark/optim.hpp"
#include "fwmark/train.hpp"
#include "fwmark/watermark.hpp"

namespace fwmark {

// ---------------------------------------------------------------------------
// BIM

struct BimConfig {
  float epsilon = 0.1f;
  float alpha = 0.025f;
  std::size_t iterations = 10;
  bool targeted = true;

  void validate() const {
    if (!(epsilon >= 0)) throw ConfigError("bim: epsilon must be >= 0");
    if (iterations > 0 && !(alpha > 0))
      throw ConfigError("bim: step size must be > 0 when iterating");
  }
};

inline void to_json(nlohmann::json& j, const BimConfig& c) {
  j = {{"epsilon", c.epsilon},
       {"alpha", c.alpha},
       {"iterations", c.iterations},
       {"targeted", c.targeted}};
}

namespace detail {

// Projects v into [x-eps, x+eps] and [-1,1] such that |v - x| <= eps also
// holds when the difference is evaluated in float.
inline float project_linf(float v, float x, float eps) {
  v = std::clamp(v, x - eps, x + eps);
  v = std::clamp(v, -1.0f, 1.0f);
  while (std::abs(v - x) > eps) v = std::nextafter(v, x);
  return v;
}

}  // namespace detail

// Iterative sign-gradient perturbation within an L-inf ball. `labels` are
// the true labels (untargeted: ascend their loss) or the targets
// (targeted: descend the target loss).
inline Tensor bim_craft(const ClassifierModel& c, const Tensor& x,
                        std::span<const int> labels, const BimConfig& cfg) {
  cfg.validate();
  if (labels.size() != x.dim(0))
    throw DimensionError("bim: label count does not match batch");
  Tensor adv = x.clone();
  adv.set_requires_grad(false);
  if (cfg.iterations == 0 || cfg.epsilon == 0) return adv;

  ClassifierModel frozen = c.clone();
  frozen.set_trainable(false);
  const float dir = cfg.targeted ? -1.0f : 1.0f;
  for (std::size_t b = 0; b < x.dim(0); b += kEvalBatch) {
    const std::size_t e = std::min(x.dim(0), b + kEvalBatch);
    const std::size_t per = x.numel() / x.dim(0);
    const float* x0 = x.ptr() + b * per;
    float* out = adv.ptr() + b * per;
    std::span<const int> yb = labels.subspan(b, e - b);
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
      Tensor xt = slice_rows(adv, b, e);
      xt.set_requires_grad(true);
      Tape tape;
      auto rec = tape.record();
      Tensor loss = softmax_cross_entropy(frozen.forward(xt), yb);
      backward(loss, tape);
      auto g = xt.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float s = g[i] > 0 ? 1.0f : (g[i] < 0 ? -1.0f : 0.0f);
        out[i] = detail::project_linf(out[i] + dir * cfg.alpha * s, x0[i],
                                      cfg.epsilon);
      }
    }
  }
  return adv;
}

// ---------------------------------------------------------------------------
// Poisoning

inline std::vector<int> shifted_targets(std::span<const int> labels,
                                        std::size_t classes) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    out[i] = static_cast<int>((std::size_t(labels[i]) + 1) % classes);
  return out;
}

// Seed-chosen, sorted subset of round(fraction * n) indices.
inline std::vector<std::size_t> poison_indices(std::size_t n, double fraction,
                                               std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw ConfigError("poison fraction must lie in [0,1]");
  const auto k = static_cast<std::size_t>(std::llround(fraction * double(n)));
  Rng rng(mix_seed(seed, 0x9015));
  std::vector<std::size_t> perm = rng.permutation(n);
  perm.resize(k);
  std::sort(perm.begin(), perm.end());
  return perm;
}

// clean followed by BIM copies of a seed-chosen subset, each labeled with
// target_of(source label). An empty target map means (y + 1) mod M.
inline Dataset build_poisoned_dataset(const Dataset& clean,
                                      const ClassifierModel& c,
                                      const BimConfig& bim, double fraction,
                                      std::uint64_t seed,
                                      std::span<const int> target_map = {}) {
  const std::vector<std::size_t> idx = poison_indices(clean.size(), fraction, seed);
  if (fraction == 0.0) {
    Dataset out = clean;
    out.images = clean.images.clone();
    return out;
  }
  if (idx.empty()) throw DataError("poison fraction selects no samples");
  if (!target_map.empty() && target_map.size() != clean.classes)
    throw ConfigError("target map must have one entry per class");

  Dataset src = subset(clean, idx, "poison");
  std::vector<int> targets;
  if (target_map.empty()) {
    targets = shifted_targets(src.labels, clean.classes);
  } else {
    for (int y : src.labels) targets.push_back(target_map[std::size_t(y)]);
  }
  for (int t : targets)
    if (t < 0 || std::size_t(t) >= clean.classes)
      throw IndexError("poison target out of range");

  BimConfig cfg = bim;
  cfg.targeted = true;
  src.images = bim_craft(c, src.images, targets, cfg);
  src.labels = targets;
  Dataset out = concat(clean, src);
  out.split = clean.split + "+poison";
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning with a sensitivity recorder

enum class FineTuneMode { full, last_layer };

NLOHMANN_JSON_SERIALIZE_ENUM(FineTuneMode, {{FineTuneMode::full, "full"},
                                            {FineTuneMode::last_layer,
                                             "last_layer"}})

inline FineTuneMode parse_fine_tune_mode(const std::string& s) {
  if (s == "full") return FineTuneMode::full;
  if (s == "last_layer" || s == "last-layer") return FineTuneMode::last_layer;
  throw ConfigError("unknown fine-tune mode '" + s +
                    "' (expected full or last_layer)");
}

struct FineTuneConfig {
  FineTuneMode mode = FineTuneMode::full;
  std::size_t epochs = 60;
  std::size_t batch = 32;
  OptimizerConfig optimizer = OptimizerConfig::sgd(1e-3f, 0.9f);
  double poison_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("fine-tuning needs at least one epoch");
    if (!(poison_fraction >= 0 && poison_fraction <= 1))
      throw ConfigError("poison fraction must lie in [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const FineTuneConfig& c) {
  j = {{"mode", c.mode},
       {"epochs", c.epochs},
       {"batch", c.batch},
       {"optimizer", c.optimizer},
       {"poison_fraction", c.poison_fraction},
       {"seed", c.seed}};
}

// Images with the labels an intact classifier must reproduce.
struct TriggerProbe {
  std::string name;
  Tensor images;
  std::vector<int> labels;
};

inline TriggerProbe probe_from(const TriggerSet& ts, std::string name = "triggers") {
  return {std::move(name), ts.images, ts.key.labels};
}

struct SensitivityRecord {
  std::size_t epoch = 0;
  std::vector<double> acc_tri;  // one per probe
  double test_acc = std::numeric_limits<double>::quiet_NaN();
  std::string param_hash;
  std::string masked_hash;  // parameters below the trainable boundary
};

struct SensitivityTrace {
  FineTuneMode mode = FineTuneMode::full;
  std::vector<std::string> probes;
  std::vector<double> initial_acc_tri;
  std::vector<SensitivityRecord> records;
  std::string initial_masked_hash;

  double mean_acc_tri(std::size_t probe = 0) const {
    double s = 0;
    for (const auto& r : records) s += r.acc_tri.at(probe);
    return records.empty() ? 0.0 : s / double(records.size());
  }
  // True if AccTri never moved from its pre-attack value.
  bool no_drop(std::size_t probe = 0) const {
    return std::all_of(records.begin(), records.end(), [&](const auto& r) {
      return r.acc_tri.at(probe) == initial_acc_tri.at(probe);
    });
  }
  bool masked_hash_constant() const {
    return std::all_of(records.begin(), records.end(), [&](const auto& r) {
      return r.masked_hash == initial_masked_hash;
    });
  }
};

inline constexpr std::size_t kHashPrefix = 16;

inline std::string masked_hash_hex(const Model& m, std::size_t end_layer) {
  Sha256 h;
  for (std::size_t i = 0; i < end_layer; ++i)
    for (const Tensor& p : m.layers()[i].params()) h.update_pod(p.data());
  return to_hex(h.finish());
}

inline double probe_accuracy(const Model& m, const TriggerProbe& p) {
  return score_predictions(predict(m, p.images), p.labels).acc_tri;
}

inline std::string trace_csv(const SensitivityTrace& t, std::size_t probe = 0) {
  std::ostringstream os;
  os << "epoch,acc_tri,test_acc,param_hash_prefix\n";
  os << std::setprecision(10);
  for (const auto& r : t.records)
    os << r.epoch << ',' << r.acc_tri.at(probe) << ',' << r.test_acc << ','
       << r.param_hash.substr(0, kHashPrefix) << '\n';
  return os.str();
}

inline nlohmann::json trace_json(const SensitivityTrace& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.records)
    rows.push_back({{"epoch", r.epoch},
                    {"acc_tri", r.acc_tri},
                    {"test_acc", std::isnan(r.test_acc) ? nlohmann::json()
                                                        : nlohmann::json(r.test_acc)},
                    {"param_hash", r.param_hash},
                    {"masked_hash", r.masked_hash}});
  nlohmann::json mean = nlohmann::json::array(), drop = nlohmann::json::array();
  for (std::size_t p = 0; p < t.probes.size(); ++p) {
    mean.push_back(t.mean_acc_tri(p));
    drop.push_back(t.no_drop(p));
  }
  return {{"mode", t.mode},
          {"probes", t.probes},
          {"initial_acc_tri", t.initial_acc_tri},
          {"mean_acc_tri", mean},
          {"no_drop", drop},
          {"masked_hash_constant", t.masked_hash_constant()},
          {"records", rows}};
}

struct FineTuneResult {
  ClassifierModel model;
  SensitivityTrace trace;
};

// Fine-tunes a private copy of c. In last_layer mode only layers from
// last_block_index train; their frozen input activations are computed once.
inline FineTuneResult fine_tune(const ClassifierModel& c, const Dataset& data,
                                const FineTuneConfig& cfg,
                                std::span<const TriggerProbe> probes = {},
                                const Dataset* test = nullptr) {
  cfg.validate();
  ClassifierModel m = c.clone();
  const std::size_t first =
      cfg.mode == FineTuneMode::full ? 0 : m.last_block_index();
  m.set_trainable_from(first);

  Tensor inputs = data.images;
  if (first > 0) {
    std::vector<float> feats;
    Shape fshape;
    for (std::size_t b = 0; b < data.size(); b += kEvalBatch) {
      const std::size_t e = std::min(data.size(), b + kEvalBatch);
      Tensor f = m.forward_range(slice_rows(data.images, b, e), 0, first);
      fshape = f.shape();
      feats.insert(feats.end(), f.data().begin(), f.data().end());
    }
    fshape[0] = data.size();
    inputs = Tensor(fshape, std::move(feats));
  }

  SensitivityTrace trace;
  trace.mode = cfg.mode;
  trace.initial_masked_hash = masked_hash_hex(m, first);
  for (const auto& p : probes) {
    trace.probes.push_back(p.name);
    trace.initial_acc_tri.push_back(probe_accuracy(m, p));
  }

  Optimizer opt(m.parameters(first), cfg.optimizer);
  Batcher batcher(data.size(), cfg.batch, mix_seed(cfg.seed, 0xf7));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    train_epoch(m, first, inputs, data.labels, batcher, e, opt);
    SensitivityRecord r;
    r.epoch = e + 1;
    for (const auto& p : probes) r.acc_tri.push_back(probe_accuracy(m, p));
    if (test) r.test_acc = accuracy(m, *test);
    r.param_hash = parameter_hash_hex(m);
    r.masked_hash = masked_hash_hex(m, first);
    trace.records.push_back(std::move(r));
  }
  m.set_trainable(false);
  return {std::move(m), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Loss-component ablation

struct AblationArm {
  std::string name;
  float a = 0;
  bool include_ce = true;
  bool trained = true;
  bool key_required = true;  // must reproduce the key
  GeneratorRun run;
  TriggerSet triggers;
  Tensor probs;  // [n,M] softmax of C on the triggers
  std::vector<int> reference_labels;
  double mean_top1 = 0;
  double mean_variance = 0;
  std::optional<std::string> failure;
};

struct AblationConfig {
  float a = 200.0f;
  std::size_t epochs = 300;
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-3f);
  std::uint64_t generator_seed = 0;
};

inline void summarize_probs(AblationArm& arm) {
  const std::size_t n = arm.probs.dim(0), k = arm.probs.dim(1);
  double top = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = arm.probs.data().subspan(i * k, k);
    top += *std::max_element(row.begin(), row.end());
  }
  arm.mean_top1 = top / double(n);
  arm.mean_variance = variance_regularizer(arm.probs).item();
}

// G_non (untrained), G_cla (CE only), G_full (CE + a Var), G_var (a Var only),
// all from the same initial generator. Reference labels are the key for
// G_cla/G_full and the classifier's own predictions for G_non/G_var.
inline std::vector<AblationArm> ablation_suite(const ClassifierModel& c,
                                               const SecretKey& key,
                                               const AblationConfig& cfg) {
  const Digest before = parameter_hash(c);
  const GeneratorModel base = build_generator(c.input_shape(), cfg.generator_seed);
  std::vector<AblationArm> arms(4);
  arms[0].name = "G_non";
  arms[0].trained = false;
  arms[0].key_required = false;
  arms[1].name = "G_cla";
  arms[2].name = "G_full";
  arms[2].a = cfg.a;
  arms[3].name = "G_var";
  arms[3].a = cfg.a;
  arms[3].include_ce = false;
  arms[3].key_required = false;

  for (AblationArm& arm : arms) {
    GeneratorModel g = base.clone();
    if (arm.trained) {
      FragileLossConfig fc{arm.a, cfg.epochs, cfg.optimizer, arm.include_ce};
      arm.run = train_generator(g, c, key, fc, false);
      if (arm.key_required && arm.run.matches != key.n)
        arm.failure = "AccTri " + std::to_string(arm.run.acc_tri) + " after " +
                      std::to_string(cfg.epochs) + " epochs";
    }
    TriggerProvenance prov;
    prov.classifier_hash = to_hex(before);
    prov.a = arm.a;
    prov.epochs = arm.trained ? cfg.epochs : 0;
    prov.include_ce = arm.include_ce;
    prov.loss_tail = arm.run.loss_tail();
    arm.triggers = materialize_triggers(g, key, prov);
    arm.probs = softmax(c.forward(arm.triggers.images));
    arm.reference_labels =
        arm.key_required ? key.labels : argmax_rows(arm.probs);
    if (!arm.trained) {
      arm.run.matches = 0;
      for (std::size_t i = 0; i < key.n; ++i)
        arm.run.matches += arm.reference_labels[i] == key.labels[i];
      arm.run.acc_tri = double(arm.run.matches) / double(key.n);
    }
    summarize_probs(arm);
  }
  require_unchanged(c, before, "ablation_suite");
  return arms;
}

inline std::string format_prob(double p) {
  if (p < 1e-2) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << p;
  std::string s = os.str();
  return s.rfind("0.", 0) == 0 ? s.substr(1) : s;
}

// One row per arm: the softmax row of trigger `index`, probabilities below
// 1e-2 shown as "-".
inline std::string ablation_table(std::span<const AblationArm> arms,
                                  std::size_t index) {
  std::ostringstream os;
  const std::size_t k = arms.front().probs.dim(1);
  os << std::left << std::setw(8) << "";
  for (std::size_t j = 0; j < k; ++j) os << std::right << std::setw(6) << j;
  os << '\n';
  for (const auto& arm : arms) {
    os << std::left << std::setw(8) << arm.name;
    for (std::size_t j = 0; j < k; ++j)
      os << std::right << std::setw(6)
         << format_prob(arm.probs.data()[index * k + j]);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Statistics

// Ranks starting at 1; tied values share their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (double(i) + double(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = r;
    i = j + 1;
  }
  return rank;
}

// Pearson correlation of average ranks. NaN if either side is constant.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw DimensionError("spearman: need two equal-length samples");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Weight-coefficient sweep

struct SweepConfig {
  std::vector<std::string> archs = classifier_archs();
  std::vector<float> a_values{0.0f, 50.0f, 200.0f, 800.0f};
  std::size_t triggers = kDefaultTriggers;
  TrainConfig train;
  FragileLossConfig generator;
  BimConfig bim;
  FineTuneConfig fine_tune = [] {
    FineTuneConfig f;
    f.mode = FineTuneMode::last_layer;
    return f;
  }();
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (archs.empty() || a_values.empty())
      throw ConfigError("sweep needs at least one arch and one a value");
    for (float a : a_values)
      if (!(a >= 0)) throw ConfigError("sweep: a values must be nonnegative");
    if (triggers == 0) throw ConfigError("sweep: triggers must be >= 1");
    if (threads == 0) throw ConfigError("sweep: threads must be >= 1");
    bim.validate();
    fine_tune.validate();
  }
};

inline void to_json(nlohmann::json& j, const SweepConfig& c) {
  j = {{"archs", c.archs},     {"a_values", c.a_values},
       {"triggers", c.triggers}, {"train", c.train},
       {"generator", c.generator}, {"bim", c.bim},
       {"fine_tune", c.fine_tune}, {"seed", c.seed},
       {"threads", c.threads}};
}

struct SweepCell {
  std::string arch;
  float a = 0;
  double generator_acc_tri = 0;
  double first_epoch_acc_tri = 0;
  double mean_acc_tri = 0;
  bool no_drop = false;
  std::vector<double> acc_tri;  // per fine-tuning epoch
  std::string trigger_digest;
  std::optional<std::string> error;
};

inline void to_json(nlohmann::json& j, const SweepCell& c) {
  j = {{"arch", c.arch},
       {"a", c.a},
       {"generator_acc_tri", c.generator_acc_tri},
       {"first_epoch_acc_tri", c.first_epoch_acc_tri},
       {"mean_acc_tri", c.mean_acc_tri},
       {"no_drop", c.no_drop},
       {"acc_tri", c.acc_tri},
       {"trigger_digest", c.trigger_digest},
       {"error", c.error ? nlohmann::json(*c.error) : nlohmann::json()}};
}

struct SweepResult {
  std::vector<std::string> archs;
  std::vector<float> a_values;      // ascending
  std::vector<SweepCell> cells;     // arch-major, a ascending
  std::vector<double> test_accuracy;  // per arch, before the attack
  std::vector<double> spearman_rho;   // per arch, NaN if undefined

  const SweepCell& cell(std::size_t arch, std::size_t a) const {
    return cells.at(arch * a_values.size() + a);
  }

  // Rows: a ascending. Columns: arch. "x" marks cells whose AccTri never
  // moved, "ERR" cells that failed.
  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(8) << "a";
    for (const auto& n : archs) os << std::right << std::setw(8) << n;
    os << '\n';
    for (std::size_t ai = 0; ai < a_values.size(); ++ai) {
      os << std::left << std::setw(8) << a_values[ai];
      for (std::size_t r = 0; r < archs.size(); ++r) {
        const SweepCell& c = cell(r, ai);
        std::ostringstream v;
        if (c.error) v << "ERR";
        else if (c.no_drop) v << "x";
        else v << std::fixed << std::setprecision(3) << c.mean_acc_tri;
        os << std::right << std::setw(8) << v.str();
      }
      os << '\n';
    }
    os << std::left << std::setw(8) << "rho";
    for (double rho : spearman_rho) {
      std::ostringstream v;
      if (std::isnan(rho)) v << "nan";
      else v << std::fixed << std::setprecision(3) << rho;
      os << std::right << std::setw(8) << v.str();
    }
    os << '\n';
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "arch,a,mean_acc_tri,first_epoch_acc_tri,no_drop,error\n";
    os << std::setprecision(10);
    for (const auto& c : cells)
      os << c.arch << ',' << c.a << ',' << c.mean_acc_tri << ','
         << c.first_epoch_acc_tri << ',' << int(c.no_drop) << ','
         << (c.error ? "1" : "0") << '\n';
    return os.str();
  }

  nlohmann::json json() const {
    nlohmann::json rho = nlohmann::json::array();
    for (double r : spearman_rho)
      rho.push_back(std::isnan(r) ? nlohmann::json() : nlohmann::json(r));
    return {{"archs", archs},
            {"a_values", a_values},
            {"test_accuracy", test_accuracy},
            {"spearman", rho},
            {"cells", cells}};
  }
};

namespace detail {

// Runs f(0..n-1) on up to `threads` workers. Exceptions escaping f are
// rethrown after all workers finish.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace detail

// For each arch: train a classifier on `train` and build one poisoned set.
// Then each (arch, a) cell independently trains a generator with weight a,
// fine-tunes the classifier's last block on the poisoned set and records
// mean AccTri over all epochs. Cell failures are captured in the cell.
inline SweepResult weight_sweep(const Dataset& train, const Dataset* test,
                                const SweepConfig& cfg) {
  cfg.validate();
  SweepResult out;
  out.archs = cfg.archs;
  out.a_values = cfg.a_values;
  std::sort(out.a_values.begin(), out.a_values.end());

  const Shape shape = train.sample_shape();
  const std::size_t na = out.a_values.size();
  std::vector<ClassifierModel> classifiers;
  std::vector<Dataset> poisoned(out.archs.size());
  for (std::size_t r = 0; r < out.archs.size(); ++r) {
    classifiers.push_back(
        build_classifier(out.archs[r], shape, train.classes, cfg.seed));
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    train_classifier(classifiers.back(), train, tc);
    out.test_accuracy.push_back(test ? accuracy(classifiers.back(), *test)
                                     : std::numeric_limits<double>::quiet_NaN());
    poisoned[r] = build_poisoned_dataset(train, classifiers.back(), cfg.bim,
                                         cfg.fine_tune.poison_fraction, cfg.seed);
  }

  const SecretKey key =
      make_secret_key(cfg.triggers, train.classes, mix_seed(cfg.seed, 0x5e));
  out.cells.resize(out.archs.size() * na);
  detail::parallel_for(out.cells.size(), cfg.threads, [&](std::size_t i) {
    const std::size_t r = i / na;
    SweepCell& cell = out.cells[i];
    cell.arch = out.archs[r];
    cell.a = out.a_values[i % na];
    try {
      const ClassifierModel& c = classifiers[r];
      GeneratorModel g = build_generator(shape, mix_seed(cfg.seed, 0x6e));
      FragileLossConfig gc = cfg.generator;
      gc.a = cell.a;
      GeneratorRun run = train_generator(g, c, key, gc);
      cell.generator_acc_tri = run.acc_tri;
      const TriggerSet ts = materialize_triggers(g, key);
      cell.trigger_digest = to_hex(ts.payload_digest());
      FineTuneConfig fc = cfg.fine_tune;
      fc.seed = cfg.seed;
      const TriggerProbe probe = probe_from(ts);
      const FineTuneResult res =
          fine_tune(c, poisoned[r], fc, std::span(&probe, 1));
      for (const auto& rec : res.trace.records) cell.acc_tri.push_back(rec.acc_tri[0]);
      cell.first_epoch_acc_tri = cell.acc_tri.front();
      cell.mean_acc_tri = res.trace.mean_acc_tri();
      cell.no_drop = res.trace.no_drop();
    } catch (const ConvergenceError& e) {
      cell.generator_acc_tri = e.acc_tri();
      cell.error = e.what();
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });

  for (std::size_t r = 0; r < out.archs.size(); ++r) {
    std::vector<double> a(na), m(na);
    bool ok = true;
    for (std::size_t ai = 0; ai < na; ++ai) {
      a[ai] = out.a_values[ai];
      m[ai] = out.cell(r, ai).mean_acc_tri;
      ok &= !out.cell(r, ai).error;
    }
    out.spearman_rho.push_back(ok && na >= 2
                                   ? spearman(a, m)
                                   : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

}  // namespace fwmark
