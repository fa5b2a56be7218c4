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
#include <span>
#include <vector>

#include "json.hpp"

#include "fwmark/data.hpp"
#include "fwmark/model.hpp"
#include "fwmark/ops.hpp"
#include "fwmark/optim.hpp"
#include "fwmark/tensor.hpp"

namespace fwmark {

inline constexpr std::size_t kEvalBatch = 256;

// Argmax labels of model(x) without recording a tape.
inline std::vector<int> predict(const Model& m, const Tensor& x,
                                std::size_t first_layer = 0) {
  std::vector<int> out;
  out.reserve(x.dim(0));
  for (std::size_t b = 0; b < x.dim(0); b += kEvalBatch) {
    const std::size_t e = std::min(x.dim(0), b + kEvalBatch);
    Tensor logits = m.forward_range(slice_rows(x, b, e), first_layer, m.size());
    for (int y : argmax_rows(logits)) out.push_back(y);
  }
  return out;
}

// Fraction of correct predictions as matches / N.
inline double accuracy(std::span<const int> predicted,
                       std::span<const int> labels) {
  if (predicted.size() != labels.size() || labels.empty())
    throw DimensionError("accuracy: prediction/label count mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return double(hits) / double(labels.size());
}

inline double accuracy(const Model& m, const Dataset& ds) {
  return accuracy(predict(m, ds.images), ds.labels);
}

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch = 32;
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-3f);
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch", c.batch},
       {"optimizer", c.optimizer},
       {"seed", c.seed}};
}

// One pass over (inputs, labels) in shuffled mini-batches, updating the
// layers from first_layer onward. `inputs` are activations entering
// first_layer, so a frozen prefix can be evaluated once and reused.
// Returns the sample-weighted mean loss.
inline double train_epoch(Model& m, std::size_t first_layer,
                          const Tensor& inputs, std::span<const int> labels,
                          const Batcher& batcher, std::size_t epoch,
                          Optimizer& opt) {
  const std::size_t per = inputs.numel() / inputs.dim(0);
  Shape batch_shape = inputs.shape();
  double total = 0;
  for (const auto& idx : batcher.epoch(epoch)) {
    batch_shape[0] = idx.size();
    Tensor x(batch_shape);
    std::vector<int> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(inputs.ptr() + idx[i] * per, per, x.ptr() + i * per);
      y[i] = labels[idx[i]];
    }
    Tape tape;
    auto rec = tape.record();
    Tensor loss =
        softmax_cross_entropy(m.forward_range(x, first_layer, m.size()), y);
    opt.zero_grad();
    backward(loss, tape);
    opt.step();
    total += double(loss.item()) * double(idx.size());
  }
  return total / double(labels.size());
}

struct TrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0;
};

// Trains every layer of a classifier from its current parameters.
inline TrainReport train_classifier(ClassifierModel& m, const Dataset& train,
                                    const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw ConfigError("training needs at least one epoch");
  m.set_trainable(true);
  Optimizer opt(m.parameters(), cfg.optimizer);
  Batcher batcher(train.size(), cfg.batch, cfg.seed);
  TrainReport report;
  for (std::size_t e = 0; e < cfg.epochs; ++e)
    report.epoch_loss.push_back(
        train_epoch(m, 0, train.images, train.labels, batcher, e, opt));
  m.set_trainable(false);
  report.train_accuracy = accuracy(m, train);
  return report;
}

}  // namespace fwmark
