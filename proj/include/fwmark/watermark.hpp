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

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fwmark/bytes.hpp"
#include "fwmark/digest.hpp"
#include "fwmark/errors.hpp"
#include "fwmark/model.hpp"
#include "fwmark/ops.hpp"
#include "fwmark/optim.hpp"
#include "fwmark/rng.hpp"
#include "fwmark/train.hpp"

namespace fwmark {

inline constexpr std::size_t kDefaultTriggers = 100;

// Owner's label sequence labels[i] = i mod M and the seed of the noise
// vectors that reproduce the triggers.
struct SecretKey {
  std::size_t n = 0;
  std::size_t classes = 0;
  std::vector<int> labels;
  std::uint64_t noise_seed = 0;
  std::vector<std::string> warnings;
};

inline SecretKey make_secret_key(std::size_t n, std::size_t classes,
                                 std::uint64_t noise_seed) {
  if (n == 0) throw ConfigError("secret key needs at least one trigger");
  if (classes < 2) throw ConfigError("secret key needs at least 2 classes");
  SecretKey key{n, classes, std::vector<int>(n), noise_seed, {}};
  for (std::size_t i = 0; i < n; ++i) key.labels[i] = static_cast<int>(i % classes);
  if (n < classes)
    key.warnings.push_back(std::to_string(classes - n) +
                           " classes have no trigger (n < M)");
  return key;
}

// Fixed noise batch [n, dim], identical on every call for the same seed.
inline Tensor key_noise(const SecretKey& key, std::size_t dim = kNoiseDim) {
  Rng rng(mix_seed(key.noise_seed, 0x7a));
  Tensor z(Shape{key.n, dim});
  for (float& v : z.data()) v = static_cast<float>(rng.normal());
  return z;
}

// Mean over rows of the population variance of each row's probabilities.
inline Tensor variance_regularizer(const Tensor& probs) {
  return mean(variance_last_axis(probs));
}

inline void check_key_classes(std::size_t k, const SecretKey& key) {
  if (k != key.classes)
    throw DimensionError("fragile loss: " + std::to_string(k) +
                         " classes but key has " + std::to_string(key.classes));
  if (key.labels.size() != key.n)
    throw DimensionError("fragile loss: key label count mismatch");
}

// cross_entropy(P, key) + a * Var(P).
inline Tensor fragile_loss(const Tensor& probs, const SecretKey& key, float a) {
  detail::require_rank(probs, 2, "fragile_loss");
  check_key_classes(probs.dim(1), key);
  if (probs.dim(0) != key.n)
    throw DimensionError("fragile loss: " + std::to_string(probs.dim(0)) +
                         " rows for a key of " + std::to_string(key.n));
  if (a < 0) throw ConfigError("variance weight must be nonnegative");
  return add(cross_entropy(probs, key.labels),
             scale(variance_regularizer(probs), a));
}

// Training form: the cross-entropy term is evaluated on logits so its
// gradient survives probabilities far below the clamp.
inline Tensor fragile_loss_logits(const Tensor& logits, const SecretKey& key,
                                  float a, bool include_ce = true) {
  detail::require_rank(logits, 2, "fragile_loss");
  check_key_classes(logits.dim(1), key);
  Tensor var = scale(variance_regularizer(softmax(logits)), a);
  if (!include_ce) return var;
  return add(softmax_cross_entropy(logits, key.labels), var);
}

struct FragileLossConfig {
  float a = 200.0f;
  std::size_t epochs = 300;
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-3f);
  bool include_ce = true;
};

inline void to_json(nlohmann::json& j, const FragileLossConfig& c) {
  j = {{"a", c.a},
       {"epochs", c.epochs},
       {"optimizer", c.optimizer},
       {"include_ce", c.include_ce}};
}

struct GeneratorRun {
  std::vector<float> loss_history;
  std::size_t matches = 0;  // argmax C(G(z_i)) == labels[i]
  double acc_tri = 0;

  std::vector<float> loss_tail(std::size_t k = 10) const {
    const std::size_t n = std::min(k, loss_history.size());
    return {loss_history.end() - long(n), loss_history.end()};
  }
};

// Thrown if a watermarking entry point ever alters the protected model.
inline void require_unchanged(const Model& c, const Digest& before,
                              const char* where) {
  if (parameter_hash(c) != before)
    throw ContractError(std::string(where) + " modified classifier parameters");
}

// Optimizes G so that C(G(z_i)) reproduces the key. Only G's parameters
// move; C is evaluated through a frozen private copy. Runs the whole epoch
// budget, then throws ConvergenceError if the key is not reproduced and
// require_match is set.
inline GeneratorRun train_generator(GeneratorModel& g, const ClassifierModel& c,
                                    const SecretKey& key,
                                    const FragileLossConfig& cfg,
                                    bool require_match = true) {
  if (cfg.a < 0) throw ConfigError("variance weight must be nonnegative");
  if (cfg.epochs == 0) throw ConfigError("generator needs at least one epoch");
  if (key.classes != c.classes())
    throw ConfigError("key has " + std::to_string(key.classes) +
                      " classes, classifier has " + std::to_string(c.classes()));
  if (g.output_shape() != c.input_shape())
    throw ShapeError("generator output " + shape_str(g.output_shape()) +
                     " does not match classifier input " +
                     shape_str(c.input_shape()));

  const Digest before = parameter_hash(c);
  ClassifierModel frozen = c.clone();
  frozen.set_trainable(false);
  const Tensor z = key_noise(key, g.noise_dim());

  GeneratorRun run;
  g.set_trainable(true);
  Optimizer opt(g.parameters(), cfg.optimizer);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    Tape tape;
    auto rec = tape.record();
    Tensor loss = fragile_loss_logits(frozen.forward(g.forward(z)), key, cfg.a,
                                      cfg.include_ce);
    opt.zero_grad();
    backward(loss, tape);
    opt.step();
    run.loss_history.push_back(loss.item());
  }
  g.set_trainable(false);
  require_unchanged(c, before, "train_generator");

  const std::vector<int> pred = predict(c, g.forward(z));
  for (std::size_t i = 0; i < key.n; ++i) run.matches += pred[i] == key.labels[i];
  run.acc_tri = double(run.matches) / double(key.n);
  if (require_match && run.matches != key.n) {
    throw ConvergenceError(
        "generator did not reproduce the key after " +
            std::to_string(cfg.epochs) + " epochs: AccTri " +
            std::to_string(run.matches) + "/" + std::to_string(key.n),
        run.acc_tri, run.loss_tail());
  }
  return run;
}

struct TriggerProvenance {
  std::string classifier_hash;  // hex parameter_hash at creation
  float a = 0;
  std::size_t epochs = 0;
  bool include_ce = true;
  std::vector<float> loss_tail;
  std::string created;
};

// Materialized X_fragile plus everything needed to verify a model.
struct TriggerSet {
  Tensor images;  // [n,C,H,W]
  SecretKey key;
  TriggerProvenance provenance;

  Shape image_shape() const {
    return Shape(images.shape().begin() + 1, images.shape().end());
  }
  Digest payload_digest() const {
    Sha256 h;
    h.update_pod(images.data());
    return h.finish();
  }
};

inline TriggerSet materialize_triggers(const GeneratorModel& g,
                                       const SecretKey& key,
                                       TriggerProvenance provenance = {}) {
  return TriggerSet{g.forward(key_noise(key, g.noise_dim())), key,
                    std::move(provenance)};
}

struct VerificationReport {
  std::vector<int> predicted;
  std::vector<int> expected;
  std::size_t matches = 0;
  std::size_t n = 0;
  double acc_tri = 0;
  bool intact = false;
  std::string classifier_hash;
  bool manifest_hash_matches = false;
};

inline void to_json(nlohmann::json& j, const VerificationReport& r) {
  j = {{"acc_tri", r.acc_tri},
       {"matches", r.matches},
       {"n", r.n},
       {"verdict", r.intact ? "intact" : "modified"},
       {"classifier_hash", r.classifier_hash},
       {"manifest_hash_matches", r.manifest_hash_matches},
       {"predicted", r.predicted},
       {"expected", r.expected}};
}

// AccTri = matches / n; intact iff every prediction matches.
inline VerificationReport score_predictions(std::span<const int> predicted,
                                            std::span<const int> expected) {
  if (predicted.size() != expected.size() || expected.empty())
    throw DimensionError("acc_tri: prediction/key length mismatch");
  VerificationReport r;
  r.predicted.assign(predicted.begin(), predicted.end());
  r.expected.assign(expected.begin(), expected.end());
  r.n = expected.size();
  for (std::size_t i = 0; i < r.n; ++i) r.matches += predicted[i] == expected[i];
  r.acc_tri = double(r.matches) / double(r.n);
  r.intact = r.matches == r.n;
  return r;
}

inline VerificationReport acc_tri(const ClassifierModel& c,
                                  const TriggerSet& ts) {
  if (c.input_shape() != ts.image_shape())
    throw ShapeError("classifier input " + shape_str(c.input_shape()) +
                     " does not match trigger images " +
                     shape_str(ts.image_shape()));
  VerificationReport r = score_predictions(predict(c, ts.images), ts.key.labels);
  r.classifier_hash = parameter_hash_hex(c);
  r.manifest_hash_matches = r.classifier_hash == ts.provenance.classifier_hash;
  return r;
}

// Trigger-set file:
//
//   "FWTS" | u16 version | u32 n + n bytes JSON manifest
//   | f32 image payload, index order | 32-byte SHA-256 of all preceding bytes
//
// The manifest's payload_digest covers the image payload alone.

inline constexpr char kTriggerMagic[4] = {'F', 'W', 'T', 'S'};
inline constexpr std::uint16_t kTriggerVersion = 1;

inline nlohmann::json trigger_manifest(const TriggerSet& ts) {
  const auto& p = ts.provenance;
  return {{"version", kTriggerVersion},
          {"n", ts.key.n},
          {"M", ts.key.classes},
          {"noise_seed", ts.key.noise_seed},
          {"image_shape", ts.image_shape()},
          {"a", p.a},
          {"epochs", p.epochs},
          {"include_ce", p.include_ce},
          {"classifier_hash", p.classifier_hash},
          {"created", p.created},
          {"loss_tail", p.loss_tail},
          {"payload_digest", to_hex(ts.payload_digest())},
          {"labels", ts.key.labels}};
}

inline std::vector<std::uint8_t> serialize_triggers(const TriggerSet& ts) {
  ByteWriter w;
  w.bytes(std::string_view(kTriggerMagic, 4));
  w.u16(kTriggerVersion);
  const std::string manifest = trigger_manifest(ts).dump();
  w.u32(static_cast<std::uint32_t>(manifest.size()));
  w.bytes(manifest);
  w.f32(ts.images.data());
  w.bytes(sha256(w.buffer()));
  return w.take();
}

// Every integrity check runs before any tensor is built.
inline TriggerSet deserialize_triggers(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kDigestSize = 32;
  if (bytes.size() < 4 + 2 + 4 + kDigestSize)
    throw TruncatedError("trigger set: file too short");
  ByteReader r(bytes.first(bytes.size() - kDigestSize), "trigger set");
  if (r.str(4) != std::string_view(kTriggerMagic, 4))
    throw FormatError("trigger set: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kTriggerVersion)
    throw FormatError("trigger set: unsupported version " +
                      std::to_string(version));
  const std::string text = r.str(r.u32());

  nlohmann::json m;
  SecretKey key;
  Shape shape;
  try {
    m = nlohmann::json::parse(text);
    key.n = m.at("n").get<std::size_t>();
    key.classes = m.at("M").get<std::size_t>();
    key.noise_seed = m.at("noise_seed").get<std::uint64_t>();
    key.labels = m.at("labels").get<std::vector<int>>();
    shape = m.at("image_shape").get<Shape>();
  } catch (const nlohmann::json::exception& e) {
    const Digest d = sha256(bytes.first(bytes.size() - kDigestSize));
    if (!std::equal(d.begin(), d.end(), bytes.end() - kDigestSize))
      throw IntegrityError("trigger set: digest mismatch");
    throw FormatError(std::string("trigger set: malformed manifest: ") + e.what());
  }
  if (shape.size() != 3 || shape_numel(shape) == 0 || key.n == 0)
    throw FormatError("trigger set: bad image shape or count");
  const std::size_t count = key.n * shape_numel(shape);
  if (r.remaining() < count * sizeof(float))
    throw TruncatedError("trigger set: payload truncated");
  if (r.remaining() > count * sizeof(float))
    throw FormatError("trigger set: trailing bytes after payload");

  const Digest expected = sha256(bytes.first(bytes.size() - kDigestSize));
  if (!std::equal(expected.begin(), expected.end(), bytes.end() - kDigestSize))
    throw IntegrityError("trigger set: digest mismatch");

  std::vector<float> payload = r.f32(count);
  Sha256 ph;
  ph.update_pod(std::span<const float>(payload));
  if (to_hex(ph.finish()) != m.value("payload_digest", std::string()))
    throw IntegrityError("trigger set: payload digest mismatch");

  const SecretKey want = make_secret_key(key.n, key.classes, key.noise_seed);
  if (key.labels != want.labels)
    throw IntegrityError("trigger set: labels do not follow the key schedule");
  key.warnings = want.warnings;

  Shape full{key.n};
  full.insert(full.end(), shape.begin(), shape.end());
  TriggerSet ts{Tensor(full, std::move(payload)), std::move(key), {}};
  auto& p = ts.provenance;
  p.classifier_hash = m.value("classifier_hash", std::string());
  p.a = m.value("a", 0.0f);
  p.epochs = m.value("epochs", std::size_t{0});
  p.include_ce = m.value("include_ce", true);
  p.loss_tail = m.value("loss_tail", std::vector<float>{});
  p.created = m.value("created", std::string());
  return ts;
}

inline void save_triggers(const TriggerSet& ts,
                          const std::filesystem::path& path) {
  write_file(path, serialize_triggers(ts));
}

inline TriggerSet load_triggers(const std::filesystem::path& path) {
  return deserialize_triggers(read_file(path));
}

}  // namespace fwmark
