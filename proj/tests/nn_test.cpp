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

#include <algorithm>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "fwmark/checkpoint.hpp"
#include "fwmark/model.hpp"
#include "fwmark/optim.hpp"

namespace fwmark {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "fwmark_nn_test";
  fs::create_directories(dir);
  return dir / name;
}

Tensor random_input(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = float(rng.uniform(-1, 1));
  return t;
}

// One SGD step on a cross-entropy loss over a random batch.
void train_step(Model& m, float lr) {
  Tensor x = random_input(Shape{4, 1, 16, 16}, 3);
  std::vector<int> y{0, 1, 2, 3};
  Tape tape;
  auto rec = tape.record();
  Tensor loss = softmax_cross_entropy(m.forward(x), y);
  backward(loss, tape);
  std::vector<Tensor> params;
  for (Tensor& p : m.parameters())
    if (p.requires_grad()) params.push_back(p);
  OptimizerState st{OptimizerConfig::sgd(lr)};
  sgd_step(params, st);
}

TEST(ClassifierTest, ParamCountsIncrease) {
  std::size_t prev = 0;
  for (const auto& arch : classifier_archs()) {
    auto m = build_classifier(arch, Shape{1, 28, 28}, 10, 1);
    EXPECT_GT(m.param_count(), prev) << arch;
    prev = m.param_count();
  }
}

TEST(ClassifierTest, ForwardShapes) {
  auto tiny = build_classifier("tiny", Shape{1, 28, 28}, 10);
  EXPECT_EQ(tiny.forward(Tensor(Shape{2, 1, 28, 28})).shape(), (Shape{2, 10}));
  auto small = build_classifier("small", Shape{3, 32, 32}, 100);
  EXPECT_EQ(small.forward(Tensor(Shape{3, 3, 32, 32})).shape(), (Shape{3, 100}));
  EXPECT_EQ(small.classes(), 100u);
}

TEST(ClassifierTest, RejectsBadConfig) {
  EXPECT_THROW(build_classifier("huge", Shape{1, 16, 16}, 10), ConfigError);
  EXPECT_THROW(build_classifier("tiny", Shape{1, 16, 16}, 1), ConfigError);
  auto m = build_classifier("tiny", Shape{1, 16, 16}, 10);
  EXPECT_THROW(m.forward(Tensor(Shape{1, 1, 28, 28})), ShapeError);
}

TEST(ClassifierTest, LastBlockIndexMarksFinalStage) {
  for (const auto& arch : classifier_archs()) {
    auto m = build_classifier(arch, Shape{1, 16, 16}, 10);
    ASSERT_LT(m.last_block_index(), m.size());
    EXPECT_EQ(m.layers()[m.last_block_index()].spec().kind, LayerKind::conv2d);
    // Exactly one max pool follows the boundary.
    std::size_t pools = 0;
    for (std::size_t i = m.last_block_index(); i < m.size(); ++i)
      pools += m.layers()[i].spec().kind == LayerKind::maxpool;
    EXPECT_EQ(pools, 1u) << arch;
  }
}

TEST(GeneratorTest, ShapeAndRange) {
  auto g = build_generator(Shape{1, 28, 28}, 5);
  Tensor out = g.forward(Tensor(Shape{5, kNoiseDim}));
  EXPECT_EQ(out.shape(), (Shape{5, 1, 28, 28}));
  Tensor noisy = g.forward(random_input(Shape{3, kNoiseDim}, 9));
  for (float v : noisy.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(GeneratorTest, SeedsDiffer) {
  Tensor z = random_input(Shape{2, kNoiseDim}, 4);
  Tensor a = build_generator(Shape{1, 16, 16}, 1).forward(z);
  Tensor b = build_generator(Shape{1, 16, 16}, 2).forward(z);
  float linf = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    linf = std::max(linf, std::abs(a.data()[i] - b.data()[i]));
  EXPECT_GT(linf, 0.0f);
}

TEST(HashTest, SeedDeterministic) {
  for (const auto& arch : classifier_archs()) {
    auto a = build_classifier(arch, Shape{1, 16, 16}, 10, 42);
    auto b = build_classifier(arch, Shape{1, 16, 16}, 10, 42);
    auto c = build_classifier(arch, Shape{1, 16, 16}, 10, 43);
    EXPECT_EQ(parameter_hash(a), parameter_hash(b));
    EXPECT_NE(parameter_hash(a), parameter_hash(c));
  }
}

TEST(HashTest, ForwardDoesNotMutate) {
  auto m = build_classifier("small", Shape{1, 16, 16}, 10, 3);
  const Digest before = parameter_hash(m);
  Tape tape;
  auto rec = tape.record();
  m.set_trainable(true);
  Tensor y = m.forward(random_input(Shape{2, 1, 16, 16}, 1));
  EXPECT_EQ(parameter_hash(m), before);
}

TEST(HashTest, FullStepChangesEveryArch) {
  for (const auto& arch : classifier_archs()) {
    auto m = build_classifier(arch, Shape{1, 16, 16}, 10, 3);
    const Digest before = parameter_hash(m);
    m.set_trainable(true);
    train_step(m, 0.1f);
    EXPECT_NE(parameter_hash(m), before) << arch;
  }
}

TEST(HashTest, LastLayerStepKeepsPrefix) {
  for (const auto& arch : classifier_archs()) {
    auto m = build_classifier(arch, Shape{1, 16, 16}, 10, 3);
    auto ref = m.clone();
    m.set_trainable_from(m.last_block_index());
    train_step(m, 0.1f);
    auto now = m.parameters(), was = ref.parameters();
    std::size_t prefix = ref.parameters().size() -
                         ref.parameters(ref.last_block_index()).size();
    for (std::size_t i = 0; i < now.size(); ++i) {
      bool same = std::equal(now[i].data().begin(), now[i].data().end(),
                             was[i].data().begin());
      if (i < prefix) {
        EXPECT_TRUE(same) << arch << " tensor " << i;
        EXPECT_FALSE(now[i].has_grad());
      }
    }
    EXPECT_NE(parameter_hash(m), parameter_hash(ref)) << arch;
  }
}

TEST(CheckpointTest, RoundTripPreservesHash) {
  auto m = build_classifier("wide", Shape{1, 16, 16}, 10, 8);
  m.metadata()["epochs"] = 3;
  const fs::path p = temp_path("wide.fwmk");
  save_model(m, p);
  ClassifierModel back = load_classifier(p);
  EXPECT_EQ(parameter_hash(back), parameter_hash(m));
  EXPECT_EQ(back.metadata()["epochs"], 3);
  EXPECT_EQ(back.last_block_index(), m.last_block_index());
  EXPECT_FALSE(fs::exists(fs::path(p.string() + ".partial")));

  auto g = build_generator(Shape{1, 16, 16}, 2);
  EXPECT_EQ(parameter_hash(deserialize_model(serialize_model(g))),
            parameter_hash(g));
}

TEST(CheckpointTest, SerializationIsDeterministic) {
  auto m = build_classifier("tiny", Shape{1, 16, 16}, 10, 8);
  EXPECT_EQ(serialize_model(m), serialize_model(m.clone()));
}

TEST(CheckpointTest, TruncationDetected) {
  auto bytes = serialize_model(build_classifier("tiny", Shape{1, 16, 16}, 10));
  for (std::size_t cut : {std::size_t{1}, std::size_t{33}, bytes.size() / 2}) {
    std::vector<std::uint8_t> shorter(bytes.begin(), bytes.end() - long(cut));
    EXPECT_THROW(deserialize_model(shorter), TruncatedError) << cut;
  }
}

TEST(CheckpointTest, EverySingleByteFlipDetected) {
  auto bytes = serialize_model(build_classifier("tiny", Shape{1, 8, 8}, 3));
  for (std::size_t i = 0; i < bytes.size(); i += 7) {
    auto bad = bytes;
    bad[i] ^= 0x01;
    EXPECT_THROW(deserialize_model(bad), FormatError) << "byte " << i;
  }
}

TEST(CheckpointTest, BadMagicAndVersion) {
  auto bytes = serialize_model(build_classifier("tiny", Shape{1, 8, 8}, 3));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_model(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  try {
    deserialize_model(bad);
    FAIL() << "version 2 accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

// Rewrites the header with a different architecture and re-signs the file,
// so only the descriptor/record consistency check can catch it.
TEST(CheckpointTest, EditedDescriptorIsShapeMismatch) {
  auto m = build_classifier("tiny", Shape{1, 16, 16}, 10, 1);
  auto bytes = serialize_model(m);
  ByteReader r(bytes, "test");
  r.take(6);
  const std::uint32_t hlen = r.u32();
  json header = json::parse(r.str(hlen));
  header["arch"]["layers"][0]["out"] = 12;
  header["arch"]["layers"][3]["in"] = 12;
  const std::string text = header.dump();

  ByteWriter w;
  w.bytes(std::span<const std::uint8_t>(bytes.data(), 6));
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  w.bytes(std::span<const std::uint8_t>(bytes.data() + 10 + hlen,
                                        bytes.size() - 10 - hlen - 32));
  w.bytes(sha256(w.buffer()));
  EXPECT_THROW(deserialize_model(w.buffer()), ShapeMismatchError);
}

TEST(CheckpointTest, MissingFileIsIoError) {
  EXPECT_THROW(load_model(temp_path("does_not_exist.fwmk")), IoError);
}

TEST(CheckpointTest, KindIsChecked) {
  const fs::path p = temp_path("gen.fwmk");
  save_model(build_generator(Shape{1, 8, 8}, 1), p);
  EXPECT_THROW(load_classifier(p), FormatError);
  EXPECT_NO_THROW(load_generator(p));
}

}  // namespace
}  // namespace fwmark
