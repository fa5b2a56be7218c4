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

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fwmark/errors.hpp"
#include "fwmark/tensor.hpp"

namespace fwmark {

enum class OptimRule { sgd_momentum, adam };

NLOHMANN_JSON_SERIALIZE_ENUM(OptimRule, {{OptimRule::sgd_momentum, "sgd"},
                                         {OptimRule::adam, "adam"}})

struct OptimizerConfig {
  OptimRule rule = OptimRule::sgd_momentum;
  float lr = 1e-3f;
  float momentum = 0.9f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  static OptimizerConfig sgd(float lr, float momentum = 0.9f) {
    OptimizerConfig c;
    c.rule = OptimRule::sgd_momentum;
    c.lr = lr;
    c.momentum = momentum;
    return c;
  }
  static OptimizerConfig adam(float lr) {
    OptimizerConfig c;
    c.rule = OptimRule::adam;
    c.lr = lr;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"rule", c.rule}, {"lr", c.lr}};
  if (c.rule == OptimRule::sgd_momentum) {
    j["momentum"] = c.momentum;
  } else {
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
  }
}

inline OptimRule parse_optim_rule(const std::string& name) {
  if (name == "sgd") return OptimRule::sgd_momentum;
  if (name == "adam") return OptimRule::adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

// Per-parameter moment buffers plus the step counter.
struct OptimizerState {
  explicit OptimizerState(OptimizerConfig c = {}) : config(c) {}

  OptimizerConfig config;
  std::vector<std::vector<float>> first;   // SGD velocity / Adam m
  std::vector<std::vector<float>> second;  // Adam v
  std::uint64_t steps = 0;
};

namespace detail {

inline void prepare_state(std::span<Tensor> params, OptimizerState& state,
                          bool second_moment) {
  if (state.first.empty()) {
    for (const Tensor& p : params) {
      state.first.emplace_back(p.numel(), 0.0f);
      if (second_moment) state.second.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.first.size() != params.size() ||
      (second_moment && state.second.size() != params.size())) {
    throw DimensionError("optimizer state tracks " +
                         std::to_string(state.first.size()) +
                         " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first[i].size() != params[i].numel() ||
        (second_moment && state.second[i].size() != params[i].numel())) {
      throw DimensionError("optimizer state for tensor " + std::to_string(i) +
                           " does not match shape " +
                           shape_str(params[i].shape()));
    }
  }
}

}  // namespace detail

// v <- momentum * v + g;  p <- p - lr * v. A parameter without a gradient
// buffer contributes g = 0.
inline void sgd_step(std::span<Tensor> params, OptimizerState& state) {
  detail::prepare_state(params, state, false);
  const float lr = state.config.lr, mu = state.config.momentum;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = params[i].grad();
    auto& v = state.first[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = mu * v[j] + (g.empty() ? 0.0f : g[j]);
      p[j] -= lr * v[j];
    }
  }
  ++state.steps;
}

// Bias-corrected Adam.
inline void adam_step(std::span<Tensor> params, OptimizerState& state) {
  detail::prepare_state(params, state, true);
  ++state.steps;
  const auto& c = state.config;
  const double t = static_cast<double>(state.steps);
  const float c1 = static_cast<float>(1.0 - std::pow(double(c.beta1), t));
  const float c2 = static_cast<float>(1.0 - std::pow(double(c.beta2), t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = params[i].grad();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const float gj = g.empty() ? 0.0f : g[j];
      m[j] = c.beta1 * m[j] + (1.0f - c.beta1) * gj;
      v[j] = c.beta2 * v[j] + (1.0f - c.beta2) * gj * gj;
      const float mhat = m[j] / c1;
      const float vhat = v[j] / c2;
      p[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// Owns the parameter handles it updates.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig config)
      : params_(std::move(params)), state_(config) {}

  void step() {
    if (state_.config.rule == OptimRule::adam) {
      adam_step(params_, state_);
    } else {
      sgd_step(params_, state_);
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  const OptimizerState& state() const { return state_; }
  std::span<const Tensor> params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  OptimizerState state_;
};

}  // namespace fwmark
