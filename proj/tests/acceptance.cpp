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

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails. Pass criterion numbers as arguments
// to run a subset.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fwmark/attack.hpp"
#include "fwmark/checkpoint.hpp"
#include "fwmark/cli.hpp"
#include "fwmark/watermark.hpp"
#include "op_cases.hpp"

namespace fwmark {
namespace {

namespace fs = std::filesystem;

const Shape kImage{1, 16, 16};
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

struct Desk {
  Dataset train, test;
  ClassifierModel c;
};

Desk make_desk(std::uint64_t seed, std::size_t classes = 10) {
  auto [train, test] = split(synth_blobs(classes, 200, kImage, seed), 0.5, seed);
  ClassifierModel c = build_classifier("tiny", kImage, classes, seed);
  TrainConfig tc;
  tc.seed = seed;
  train_classifier(c, train, tc);
  return {std::move(train), std::move(test), std::move(c)};
}

fs::path scratch_root() {
  return fs::temp_directory_path() /
         ("fwmark_acceptance_" + std::to_string(::getpid()));
}

// ---------------------------------------------------------------------------
// 1 and 2 share one CLI train + watermark run.

struct CliRun {
  fs::path model, triggers, report;
  int train_code = -1, watermark_code = -1;
  std::string log;
};

const CliRun& cli_run() {
  static const CliRun r = [] {
    CliRun out;
    const fs::path root = scratch_root() / "cli";
    std::ostringstream log, err;
    out.train_code = cli::run({"train", "--seed", "1", "--out",
                               (root / "train").string()}, log, err);
    out.model = root / "train" / "classifier.fwm";
    out.watermark_code =
        cli::run({"watermark", "--checkpoint", out.model.string(), "--seed", "1",
                  "--out", (root / "wm").string()}, log, err);
    out.triggers = root / "wm" / "triggers.fwts";
    out.report = root / "wm" / "watermark_report.json";
    out.log = log.str() + err.str();
    return out;
  }();
  return r;
}

Verdict zero_degradation() {
  const CliRun& r = cli_run();
  if (r.train_code != 0 || r.watermark_code != 0)
    return {false, "cli failed: " + r.log};
  const auto bytes = read_file(r.report);
  const auto rep = nlohmann::json::parse(bytes.begin(), bytes.end());
  const ClassifierModel c = load_classifier(r.model);
  auto [train, test] = cli::checkpoint_split(c);
  const double recomputed = accuracy(c, test);
  const std::string hash = parameter_hash_hex(c);
  const bool hash_ok = hash == rep["classifier_hash_before"] &&
                       hash == rep["classifier_hash_after"];
  const bool acc_ok = recomputed == rep["test_accuracy_before"].get<double>() &&
                      recomputed == rep["test_accuracy_after"].get<double>() &&
                      rep["accuracy_difference"].get<double>() == 0.0;
  return {hash_ok && acc_ok, "hash " + hash.substr(0, 16) +
                                 (hash_ok ? " identical" : " CHANGED") +
                                 ", test accuracy " + fmt(recomputed, 6) +
                                 " before/after, difference " +
                                 rep["accuracy_difference"].dump()};
}

Verdict watermark_validity() {
  const CliRun& r = cli_run();
  if (r.watermark_code != 0) return {false, "watermark exit " +
                                                std::to_string(r.watermark_code)};
  const TriggerSet ts = load_triggers(r.triggers);
  const ClassifierModel c = load_classifier(r.model);
  const VerificationReport v = acc_tri(c, ts);
  const bool defaults = ts.key.n == 100 && ts.provenance.a == 200.0f &&
                        ts.provenance.epochs <= 300;
  return {v.acc_tri == 1.0 && defaults,
          "n=" + std::to_string(ts.key.n) + " a=" + fmt(ts.provenance.a, 0) +
              " epochs=" + std::to_string(ts.provenance.epochs) + " AccTri " +
              std::to_string(v.matches) + "/" + std::to_string(v.n)};
}

// ---------------------------------------------------------------------------
// 3 and 4 share per-seed desks and ablation runs.

struct SeedRun {
  Desk desk;
  SecretKey key;
  std::vector<AblationArm> arms;
};

const SeedRun& seed_run(std::uint64_t seed) {
  static std::map<std::uint64_t, SeedRun> cache;
  auto it = cache.find(seed);
  if (it == cache.end()) {
    Desk d = make_desk(seed);
    SecretKey key = make_secret_key(kDefaultTriggers, 10, seed);
    AblationConfig cfg;
    cfg.generator_seed = mix_seed(seed, 0x6e);
    auto arms = ablation_suite(d.c, key, cfg);
    it = cache.emplace(seed, SeedRun{std::move(d), std::move(key), std::move(arms)})
             .first;
  }
  return it->second;
}

Verdict first_epoch_sensitivity() {
  int passed = 0;
  std::string detail;
  for (std::uint64_t seed : kSeeds) {
    const SeedRun& s = seed_run(seed);
    const AblationArm& cla = s.arms[1];
    const AblationArm& full = s.arms[2];
    detail += " seed " + std::to_string(seed) + ":";
    if (cla.failure || full.failure) {
      detail += " generator did not converge;";
      continue;
    }
    const Dataset poisoned =
        build_poisoned_dataset(s.desk.train, s.desk.c, BimConfig{}, 0.1, seed);
    FineTuneConfig fc;  // full model, SGD 1e-3, 60 epochs
    fc.seed = seed;
    const std::vector<TriggerProbe> probes{probe_from(full.triggers, "G_full"),
                                           probe_from(cla.triggers, "G_cla")};
    const FineTuneResult res = fine_tune(s.desk.c, poisoned, fc, probes);
    const double ep1 = res.trace.records[0].acc_tri[0];
    const double mfull = res.trace.mean_acc_tri(0), mcla = res.trace.mean_acc_tri(1);
    const bool ok = ep1 < 1.0 && mfull < mcla;
    passed += ok;
    detail += " epoch-1 " + fmt(ep1, 2) + ", mean full " + fmt(mfull) +
              " vs cla " + fmt(mcla) + (ok ? " ok;" : " no;");
  }
  return {passed * 2 > int(kSeeds.size()),
          std::to_string(passed) + "/" + std::to_string(kSeeds.size()) +
              " seeds." + detail};
}

Verdict ablation_pattern() {
  int passed = 0;
  std::string detail;
  for (std::uint64_t seed : kSeeds) {
    const SeedRun& s = seed_run(seed);
    const AblationArm& cla = s.arms[1];
    const AblationArm& full = s.arms[2];
    const bool ok = !cla.failure && !full.failure && cla.mean_top1 > 0.9 &&
                    full.mean_top1 < 0.5 &&
                    3.0 * full.mean_variance <= cla.mean_variance;
    passed += ok;
    std::ostringstream os;
    os << " seed " << seed << ": top-1 cla " << fmt(cla.mean_top1) << " full "
       << fmt(full.mean_top1) << ", var ratio " << std::setprecision(3)
       << cla.mean_variance / full.mean_variance << (ok ? " ok;" : " no;");
    detail += os.str();
  }
  return {passed >= 2, std::to_string(passed) + "/" +
                           std::to_string(kSeeds.size()) + " seeds." + detail};
}

// ---------------------------------------------------------------------------

Verdict weight_trend() {
  auto [train, test] = split(synth_blobs(10, 200, kImage, 1), 0.5, 1);
  SweepConfig cfg;  // 4 archs x a in {0,50,200,800}, last layer, 60 epochs
  cfg.seed = 1;
  cfg.threads = std::max(1u, std::thread::hardware_concurrency());
  const SweepResult r = weight_sweep(train, &test, cfg);
  std::printf("%s", r.table().c_str());
  bool ok = true;
  std::string detail = "rho";
  for (std::size_t i = 0; i < r.archs.size(); ++i) {
    ok &= r.spearman_rho[i] < 0;  // NaN fails
    detail += " " + r.archs[i] + "=" + fmt(r.spearman_rho[i]);
  }
  return {ok, detail};
}

Verdict class_count() {
  constexpr std::size_t kClasses = 20;
  constexpr std::uint64_t seed = 1;
  Desk d = make_desk(seed, kClasses);
  const SecretKey key = make_secret_key(kDefaultTriggers, kClasses, seed);
  GeneratorModel g = build_generator(kImage, mix_seed(seed, 0x6e));
  FragileLossConfig gc;
  gc.a = 800.0f;
  const GeneratorRun run = train_generator(g, d.c, key, gc, false);
  const TriggerSet ts = materialize_triggers(g, key);
  const double before = acc_tri(d.c, ts).acc_tri;
  const Dataset poisoned = build_poisoned_dataset(d.train, d.c, BimConfig{}, 0.1, seed);
  FineTuneConfig fc;
  fc.mode = FineTuneMode::last_layer;
  fc.seed = seed;
  const TriggerProbe probe = probe_from(ts);
  const FineTuneResult res = fine_tune(d.c, poisoned, fc, std::span(&probe, 1));
  const double ep1 = res.trace.records[0].acc_tri[0];
  return {before == 1.0 && ep1 < 1.0,
          "M=20 a=800: test accuracy " + fmt(accuracy(d.c, d.test)) +
              ", AccTri before " + fmt(before, 2) + " (generator " +
              fmt(run.acc_tri, 2) + "), epoch-1 " + fmt(ep1, 2) + ", mean " +
              fmt(res.trace.mean_acc_tri())};
}

// ---------------------------------------------------------------------------

Verdict property_suite() {
  std::vector<std::string> failures;
  double worst = 0;
  int checks = 0;
  for (int v = 0; v < testing::kShapeVariants; ++v)
    testing::check_every_op(v, [&](const std::string& name, double err) {
      ++checks;
      worst = std::max(worst, std::isnan(err) ? INFINITY : err);
      if (!(err < testing::kGradTol))
        failures.push_back("grad " + name + " v" + std::to_string(v));
    });

  Rng rng(71);
  double softmax_dev = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(8), k = 2 + rng.below(100);
    Tensor x = testing::random_tensor<float>({n, k}, rng, -30, 30);
    Tensor p = softmax(x);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += p.data()[r * k + j];
      softmax_dev = std::max(softmax_dev, std::abs(s - 1.0));
    }
  }
  if (softmax_dev > 1e-6) failures.push_back("softmax normalization");

  const SeedRun& s = seed_run(1);
  std::vector<std::size_t> idx(200);
  std::iota(idx.begin(), idx.end(), 0);
  auto [x, y] = gather(s.desk.test, idx);
  for (float eps : {0.0f, 0.03f, 0.1f, 0.3f}) {
    for (bool targeted : {false, true}) {
      BimConfig b{eps, eps / 4 + 1e-3f, 10, targeted};
      const Tensor adv = bim_craft(s.desk.c, x, targeted ? shifted_targets(y, 10) : y, b);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const float xi = x.data()[i], ai = adv.data()[i];
        if (!(std::abs(ai - xi) <= eps && ai >= -1.0f && ai <= 1.0f)) {
          failures.push_back("bim budget eps=" + fmt(eps, 2));
          break;
        }
      }
    }
  }

  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(500), m = 2 + rng.below(100);
    const SecretKey key = make_secret_key(n, m, std::uint64_t(t));
    for (std::size_t i = 0; i < n; ++i)
      if (key.labels[i] != int(i % m)) {
        failures.push_back("key schedule n=" + std::to_string(n));
        break;
      }
  }

  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(300), m = 2 + rng.below(20);
    std::vector<int> pred(n), key(n);
    for (std::size_t i = 0; i < n; ++i) {
      key[i] = int(rng.below(m));
      pred[i] = rng.uniform() < 0.7 ? key[i] : int(rng.below(m));
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (pred[i] == key[i]) ++count;
    const VerificationReport r = score_predictions(pred, key);
    if (r.matches != count || r.acc_tri != double(count) / double(n) ||
        r.intact != (count == n)) {
      failures.push_back("acc_tri exactness");
      break;
    }
  }

  std::string detail = std::to_string(checks) + " grad checks (worst " +
                       fmt(worst, 6) + "), softmax dev " + fmt(softmax_dev * 1e6, 3) +
                       "e-6";
  for (const auto& f : failures) detail += "; FAILED " + f;
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------

template <typename Load>
std::size_t undetected_flips(const std::vector<std::uint8_t>& bytes,
                             std::size_t stride, Load load) {
  std::size_t missed = 0;
  for (std::size_t i = 0; i < bytes.size(); i += (i < 256 ? 1 : stride)) {
    auto bad = bytes;
    bad[i] ^= 0x20;
    try {
      load(bad);
      ++missed;
    } catch (const FormatError&) {
    }
  }
  return missed;
}

Verdict format_round_trips() {
  const fs::path dir = scratch_root() / "formats";
  fs::create_directories(dir);
  const SeedRun& s = seed_run(1);
  std::string detail;
  bool ok = true;

  save_model(s.desk.c, dir / "c.fwm");
  const auto cbytes = read_file(dir / "c.fwm");
  const Model back = load_model(dir / "c.fwm");
  ok &= serialize_model(back) == cbytes && parameter_hash(back) == parameter_hash(s.desk.c);
  const std::size_t cmiss = undetected_flips(cbytes, 1, [](const auto& b) {
    return deserialize_model(b);
  });
  detail += "checkpoint " + std::to_string(cbytes.size()) + " B, " +
            std::to_string(cmiss) + " undetected flips (every byte)";

  const TriggerSet& ts = s.arms[2].triggers;
  save_triggers(ts, dir / "t.fwts");
  const auto tbytes = read_file(dir / "t.fwts");
  const TriggerSet tback = load_triggers(dir / "t.fwts");
  ok &= serialize_triggers(tback) == tbytes &&
        tback.payload_digest() == ts.payload_digest() && tback.key.labels == ts.key.labels;
  const std::size_t tmiss = undetected_flips(tbytes, 13, [](const auto& b) {
    return deserialize_triggers(b);
  });
  detail += "; trigger set " + std::to_string(tbytes.size()) + " B, " +
            std::to_string(tmiss) + " undetected flips (header + every 13th byte)";
  ok &= cmiss == 0 && tmiss == 0;
  return {ok, detail};
}

}  // namespace
}  // namespace fwmark

int main(int argc, char** argv) {
  using namespace fwmark;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"zero degradation", zero_degradation},
      {"watermark validity", watermark_validity},
      {"first-epoch sensitivity", first_epoch_sensitivity},
      {"ablation pattern", ablation_pattern},
      {"weight-coefficient trend", weight_trend},
      {"class-count extensibility", class_count},
      {"numeric property suite", property_suite},
      {"format round-trips", format_round_trips},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%d] %-26s %s  (%.0fs) %s\n", id, criteria[i].first.c_str(),
                v.pass ? "PASS" : "FAIL", secs, v.detail.c_str());
    std::fflush(stdout);
    failed += !v.pass;
  }
  std::filesystem::remove_all(scratch_root());
  return failed == 0 ? 0 : 1;
}
