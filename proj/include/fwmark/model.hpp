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
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fwmark/digest.hpp"
#include "fwmark/errors.hpp"
#include "fwmark/ops.hpp"
#include "fwmark/rng.hpp"
#include "fwmark/tensor.hpp"

namespace fwmark {

using json = nlohmann::json;

enum class LayerKind {
  conv2d,
  conv_transpose2d,
  linear,
  relu,
  tanh,
  maxpool,
  flatten,
  reshape,
};

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind,
                             {{LayerKind::conv2d, "conv2d"},
                              {LayerKind::conv_transpose2d, "conv_transpose2d"},
                              {LayerKind::linear, "linear"},
                              {LayerKind::relu, "relu"},
                              {LayerKind::tanh, "tanh"},
                              {LayerKind::maxpool, "maxpool"},
                              {LayerKind::flatten, "flatten"},
                              {LayerKind::reshape, "reshape"}})

// Hyperparameters fully determine a layer's parameter shapes.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Shape target;  // reshape only: per-sample shape

  bool operator==(const LayerSpec&) const = default;
};

inline void to_json(json& j, const LayerSpec& s) {
  j = json{{"type", s.kind}};
  switch (s.kind) {
    case LayerKind::conv2d:
    case LayerKind::conv_transpose2d:
      j["in"] = s.in;
      j["out"] = s.out;
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      j["padding"] = s.padding;
      break;
    case LayerKind::linear:
      j["in"] = s.in;
      j["out"] = s.out;
      break;
    case LayerKind::maxpool:
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      break;
    case LayerKind::reshape:
      j["shape"] = s.target;
      break;
    default:
      break;
  }
}

inline void from_json(const json& j, LayerSpec& s) {
  s = LayerSpec{};
  static const std::vector<std::string> known{
      "conv2d", "conv_transpose2d", "linear",  "relu",
      "tanh",   "maxpool",          "flatten", "reshape"};
  const std::string type = j.at("type").get<std::string>();
  if (std::find(known.begin(), known.end(), type) == known.end())
    throw FormatError("unknown layer type '" + type + "'");
  j.at("type").get_to(s.kind);
  auto opt = [&j](const char* key, std::size_t& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("in", s.in);
  opt("out", s.out);
  opt("kernel", s.kernel);
  opt("stride", s.stride);
  opt("padding", s.padding);
  if (j.contains("shape")) j.at("shape").get_to(s.target);
}

class Layer {
 public:
  explicit Layer(LayerSpec spec) : spec_(std::move(spec)) {
    switch (spec_.kind) {
      case LayerKind::conv2d:
        require(spec_.in && spec_.out && spec_.kernel && spec_.stride);
        params_ = {Tensor(Shape{spec_.out, spec_.in, spec_.kernel, spec_.kernel}),
                   Tensor(Shape{spec_.out})};
        break;
      case LayerKind::conv_transpose2d:
        require(spec_.in && spec_.out && spec_.kernel && spec_.stride);
        params_ = {Tensor(Shape{spec_.in, spec_.out, spec_.kernel, spec_.kernel}),
                   Tensor(Shape{spec_.out})};
        break;
      case LayerKind::linear:
        require(spec_.in && spec_.out);
        params_ = {Tensor(Shape{spec_.in, spec_.out}), Tensor(Shape{spec_.out})};
        break;
      case LayerKind::maxpool:
        require(spec_.kernel && spec_.stride);
        break;
      case LayerKind::reshape:
        require(!spec_.target.empty() && shape_numel(spec_.target) > 0);
        break;
      default:
        break;
    }
  }

  static Layer conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                      std::size_t stride = 1, std::size_t padding = 0) {
    return Layer({LayerKind::conv2d, in, out, kernel, stride, padding, {}});
  }
  static Layer conv_transpose2d(std::size_t in, std::size_t out,
                                std::size_t kernel, std::size_t stride,
                                std::size_t padding) {
    return Layer(
        {LayerKind::conv_transpose2d, in, out, kernel, stride, padding, {}});
  }
  static Layer linear(std::size_t in, std::size_t out) {
    return Layer({LayerKind::linear, in, out, 0, 1, 0, {}});
  }
  static Layer relu() { return Layer({LayerKind::relu, 0, 0, 0, 1, 0, {}}); }
  static Layer tanh() { return Layer({LayerKind::tanh, 0, 0, 0, 1, 0, {}}); }
  static Layer maxpool(std::size_t kernel) {
    return Layer({LayerKind::maxpool, 0, 0, kernel, kernel, 0, {}});
  }
  static Layer flatten() {
    return Layer({LayerKind::flatten, 0, 0, 0, 1, 0, {}});
  }
  static Layer reshape(Shape target) {
    return Layer({LayerKind::reshape, 0, 0, 0, 1, 0, std::move(target)});
  }

  const LayerSpec& spec() const { return spec_; }
  std::span<Tensor> params() { return params_; }
  std::span<const Tensor> params() const { return params_; }

  static const char* param_name(std::size_t i) {
    return i == 0 ? "weight" : "bias";
  }

  // Per-sample output shape for a per-sample input shape.
  Shape output_shape(const Shape& in) const {
    auto fail = [&]() -> Shape {
      throw ShapeError(std::string("layer ") + json(spec_.kind).get<std::string>() +
                       " cannot accept input " + shape_str(in));
    };
    switch (spec_.kind) {
      case LayerKind::conv2d: {
        if (in.size() != 3 || in[0] != spec_.in) return fail();
        const std::size_t k = spec_.kernel, p = spec_.padding, s = spec_.stride;
        if (in[1] + 2 * p < k || in[2] + 2 * p < k) return fail();
        if ((in[1] + 2 * p - k) % s || (in[2] + 2 * p - k) % s) return fail();
        return {spec_.out, (in[1] + 2 * p - k) / s + 1, (in[2] + 2 * p - k) / s + 1};
      }
      case LayerKind::conv_transpose2d: {
        if (in.size() != 3 || in[0] != spec_.in) return fail();
        const std::size_t k = spec_.kernel, p = spec_.padding, s = spec_.stride;
        const std::size_t h = (in[1] - 1) * s + k, w = (in[2] - 1) * s + k;
        if (h <= 2 * p || w <= 2 * p) return fail();
        return {spec_.out, h - 2 * p, w - 2 * p};
      }
      case LayerKind::linear:
        if (in.size() != 1 || in[0] != spec_.in) return fail();
        return {spec_.out};
      case LayerKind::maxpool: {
        if (in.size() != 3 || in[1] < spec_.kernel || in[2] < spec_.kernel)
          return fail();
        return {in[0], (in[1] - spec_.kernel) / spec_.stride + 1,
                (in[2] - spec_.kernel) / spec_.stride + 1};
      }
      case LayerKind::flatten:
        return {shape_numel(in)};
      case LayerKind::reshape:
        if (shape_numel(in) != shape_numel(spec_.target)) return fail();
        return spec_.target;
      default:
        return in;
    }
  }

  Tensor forward(const Tensor& x) const {
    switch (spec_.kind) {
      case LayerKind::conv2d:
        return fwmark::conv2d(x, params_[0], params_[1], spec_.stride,
                              spec_.padding);
      case LayerKind::conv_transpose2d:
        return fwmark::conv_transpose2d(x, params_[0], params_[1],
                                        spec_.stride, spec_.padding);
      case LayerKind::linear:
        return fwmark::linear(x, params_[0], params_[1]);
      case LayerKind::relu:
        return fwmark::relu(x);
      case LayerKind::tanh:
        return fwmark::tanh(x);
      case LayerKind::maxpool:
        return max_pool2d(x, spec_.kernel, spec_.stride);
      case LayerKind::flatten:
        return fwmark::reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
      case LayerKind::reshape: {
        Shape s{x.dim(0)};
        s.insert(s.end(), spec_.target.begin(), spec_.target.end());
        return fwmark::reshape(x, std::move(s));
      }
    }
    throw ContractError("unknown layer kind");
  }

  // He-uniform weights, bias uniform in +-1/sqrt(fan_in).
  void initialize(Rng& rng) {
    if (params_.empty()) return;
    double fan_in = 0;
    switch (spec_.kind) {
      case LayerKind::conv2d:
        fan_in = double(spec_.in * spec_.kernel * spec_.kernel);
        break;
      case LayerKind::conv_transpose2d:
        fan_in = double(spec_.in * spec_.kernel * spec_.kernel) /
                 double(spec_.stride * spec_.stride);
        break;
      default:
        fan_in = double(spec_.in);
        break;
    }
    const double wb = std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    for (float& v : params_[0].data()) v = static_cast<float>(rng.uniform(-wb, wb));
    for (float& v : params_[1].data()) v = static_cast<float>(rng.uniform(-bb, bb));
  }

  Layer clone() const {
    Layer copy(spec_);
    for (std::size_t i = 0; i < params_.size(); ++i)
      copy.params_[i] = params_[i].clone();
    return copy;
  }

 private:
  static void require(bool ok) {
    if (!ok) throw ConfigError("layer hyperparameters must be positive");
  }

  LayerSpec spec_;
  std::vector<Tensor> params_;
};

enum class ModelKind { classifier, generator };

NLOHMANN_JSON_SERIALIZE_ENUM(ModelKind, {{ModelKind::classifier, "classifier"},
                                         {ModelKind::generator, "generator"}})

// Ordered stack of layers with a fixed per-sample input shape. Copies share
// parameter storage; clone() is deep.
class Model {
 public:
  Model(ModelKind kind, std::string arch, Shape input_shape,
        std::vector<Layer> layers, std::size_t last_block_index = 0)
      : kind_(kind),
        arch_(std::move(arch)),
        input_shape_(std::move(input_shape)),
        layers_(std::move(layers)),
        last_block_index_(last_block_index) {
    if (layers_.empty()) throw ConfigError("model without layers");
    if (last_block_index_ >= layers_.size())
      throw ConfigError("last_block_index beyond the layer stack");
    Shape s = input_shape_;
    for (const Layer& l : layers_) s = l.output_shape(s);
    output_shape_ = std::move(s);
  }

  ModelKind kind() const { return kind_; }
  const std::string& arch() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  std::size_t last_block_index() const { return last_block_index_; }
  std::span<const Layer> layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }

  json& metadata() { return metadata_; }
  const json& metadata() const { return metadata_; }

  Tensor forward(const Tensor& x) const { return forward_range(x, 0, size()); }

  // Applies layers [begin, end). Only a range starting at 0 checks the
  // declared input shape.
  Tensor forward_range(const Tensor& x, std::size_t begin,
                       std::size_t end) const {
    if (begin == 0) check_input(x);
    Tensor h = x;
    for (std::size_t i = begin; i < end; ++i) h = layers_[i].forward(h);
    return h;
  }

  std::vector<Tensor> parameters(std::size_t first_layer = 0) const {
    std::vector<Tensor> out;
    for (std::size_t i = first_layer; i < layers_.size(); ++i)
      for (const Tensor& p : layers_[i].params()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto ps = layers_[i].params();
      for (std::size_t j = 0; j < ps.size(); ++j)
        out.emplace_back("layers." + std::to_string(i) + "." +
                             Layer::param_name(j),
                         ps[j]);
    }
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const Tensor& p : parameters()) n += p.numel();
    return n;
  }

  // Layers before first_layer are frozen, the rest train.
  void set_trainable_from(std::size_t first_layer) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (Tensor& p : layers_[i].params())
        p.set_requires_grad(i >= first_layer);
  }
  void set_trainable(bool on) { set_trainable_from(on ? 0 : layers_.size()); }

  void zero_grad() {
    for (Tensor& p : parameters()) p.zero_grad();
  }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    for (Layer& l : layers_) l.initialize(rng);
    metadata_["init_seed"] = seed;
  }

  json arch_descriptor() const {
    json layers = json::array();
    for (const Layer& l : layers_) layers.push_back(l.spec());
    return json{{"kind", kind_},
                {"arch", arch_},
                {"input_shape", input_shape_},
                {"last_block_index", last_block_index_},
                {"layers", layers}};
  }

  // Zero-valued parameters; shapes follow the descriptor.
  static Model from_descriptor(const json& d) {
    try {
      std::vector<Layer> layers;
      for (const json& l : d.at("layers")) layers.emplace_back(l.get<LayerSpec>());
      return Model(d.at("kind").get<ModelKind>(), d.at("arch").get<std::string>(),
                   d.at("input_shape").get<Shape>(), std::move(layers),
                   d.at("last_block_index").get<std::size_t>());
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed architecture descriptor: ") +
                        e.what());
    }
  }

  Model clone() const {
    Model copy = *this;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      copy.layers_[i] = layers_[i].clone();
    return copy;
  }

 private:
  void check_input(const Tensor& x) const {
    const Shape& s = x.shape();
    if (s.size() != input_shape_.size() + 1 ||
        !std::equal(input_shape_.begin(), input_shape_.end(), s.begin() + 1)) {
      throw ShapeError("model expects [N," + shape_str(input_shape_).substr(1) +
                       " input, got " + shape_str(s));
    }
  }

  ModelKind kind_;
  std::string arch_;
  Shape input_shape_;
  Shape output_shape_;
  std::vector<Layer> layers_;
  std::size_t last_block_index_;
  json metadata_ = json::object();
};

// SHA-256 over the architecture descriptor followed by every parameter's
// raw bytes in layer order.
inline Digest parameter_hash(const Model& m) {
  Sha256 h;
  h.update(m.arch_descriptor().dump());
  for (const Tensor& p : m.parameters()) h.update_pod(p.data());
  return h.finish();
}

inline std::string parameter_hash_hex(const Model& m) {
  return to_hex(parameter_hash(m));
}

// The protected classifier C: images [N,C,H,W] -> logits [N,M].
class ClassifierModel : public Model {
 public:
  explicit ClassifierModel(Model m) : Model(std::move(m)) {
    if (kind() != ModelKind::classifier)
      throw FormatError("expected a classifier model");
    if (input_shape().size() != 3 || output_shape().size() != 1 ||
        output_shape()[0] < 2)
      throw ShapeError("classifier must map [C,H,W] to >= 2 logits");
  }

  std::size_t classes() const { return output_shape()[0]; }
  ClassifierModel clone() const { return ClassifierModel(Model::clone()); }
};

// The trigger generator G: noise [N,512] -> images in [-1,1].
class GeneratorModel : public Model {
 public:
  explicit GeneratorModel(Model m) : Model(std::move(m)) {
    if (kind() != ModelKind::generator)
      throw FormatError("expected a generator model");
    if (input_shape().size() != 1 || output_shape().size() != 3)
      throw ShapeError("generator must map noise vectors to [C,H,W] images");
  }

  std::size_t noise_dim() const { return input_shape()[0]; }
  GeneratorModel clone() const { return GeneratorModel(Model::clone()); }
};

inline constexpr std::size_t kNoiseDim = 512;

inline const std::vector<std::string>& classifier_archs() {
  static const std::vector<std::string> names{"tiny", "small", "wide", "deep"};
  return names;
}

// Plain conv-relu-pool stacks of increasing size. Each stage ends in a 2x2
// max pool; the last stage plus the linear head form the fine-tunable
// "last block".
inline ClassifierModel build_classifier(const std::string& arch,
                                        const Shape& input_shape,
                                        std::size_t classes,
                                        std::uint64_t seed = 0) {
  if (classes < 2) throw ConfigError("classifier needs at least 2 classes");
  if (input_shape.size() != 3 || input_shape[1] % 4 || input_shape[2] % 4)
    throw ConfigError("classifier input must be [C,H,W] with H, W divisible "
                      "by 4, got " + shape_str(input_shape));
  std::vector<std::vector<std::size_t>> stages;
  if (arch == "tiny") {
    stages = {{8}, {16}};
  } else if (arch == "small") {
    stages = {{8, 8}, {16, 16}};
  } else if (arch == "wide") {
    stages = {{16, 16}, {32, 32}};
  } else if (arch == "deep") {
    stages = {{16, 16, 16, 16}, {32, 32, 32, 32}};
  } else {
    throw ConfigError("unknown classifier architecture '" + arch + "'");
  }
  std::vector<Layer> layers;
  std::size_t ch = input_shape[0];
  std::size_t last_block = 0;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (s + 1 == stages.size()) last_block = layers.size();
    for (std::size_t width : stages[s]) {
      layers.push_back(Layer::conv2d(ch, width, 3, 1, 1));
      layers.push_back(Layer::relu());
      ch = width;
    }
    layers.push_back(Layer::maxpool(2));
  }
  layers.push_back(Layer::flatten());
  layers.push_back(
      Layer::linear(ch * (input_shape[1] / 4) * (input_shape[2] / 4), classes));
  ClassifierModel m(Model(ModelKind::classifier, arch, input_shape,
                          std::move(layers), last_block));
  m.initialize(seed);
  return m;
}

// Noise -> linear -> [64, H/4, W/4] -> two stride-2 transposed convolutions
// -> 3x3 conv -> tanh.
inline GeneratorModel build_generator(const Shape& image_shape,
                                      std::uint64_t seed = 0) {
  if (image_shape.size() != 3 || image_shape[1] % 4 || image_shape[2] % 4)
    throw ConfigError("generator output must be [C,H,W] with H, W divisible "
                      "by 4, got " + shape_str(image_shape));
  const std::size_t h0 = image_shape[1] / 4, w0 = image_shape[2] / 4;
  std::vector<Layer> layers{
      Layer::linear(kNoiseDim, 64 * h0 * w0),
      Layer::relu(),
      Layer::reshape({64, h0, w0}),
      Layer::conv_transpose2d(64, 32, 4, 2, 1),
      Layer::relu(),
      Layer::conv_transpose2d(32, 16, 4, 2, 1),
      Layer::relu(),
      Layer::conv2d(16, image_shape[0], 3, 1, 1),
      Layer::tanh(),
  };
  GeneratorModel g(Model(ModelKind::generator, "deconv", Shape{kNoiseDim},
                         std::move(layers), 0));
  if (g.output_shape() != image_shape)
    throw ShapeError("generator output " + shape_str(g.output_shape()) +
                     " does not match " + shape_str(image_shape));
  g.initialize(seed);
  return g;
}

}  // namespace fwmark
