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

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fwmark/grad_check.hpp"
#include "fwmark/ops.hpp"
#include "fwmark/rng.hpp"
#include "fwmark/tensor.hpp"
#include "op_cases.hpp"

namespace fwmark {
namespace {

using DTensor = BasicTensor<double>;
using DTape = BasicTape<double>;

using testing::kink_free;
using testing::random_tensor;
using testing::weighted_sum;

constexpr double kEps = 1e-3;
constexpr double kTol = 1e-3;

TEST(TensorTest, ShapeDataInvariant) {
  Tensor t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.grad_buffer(), ContractError);
}

TEST(TensorTest, CloneIsDeep) {
  Tensor a(Shape{2}, std::vector<float>{1, 2});
  Tensor b = a.clone();
  b.data()[0] = 7;
  EXPECT_EQ(a.data()[0], 1.0f);
}

TEST(MatmulTest, Examples) {
  Tensor eye(Shape{2, 2}, std::vector<float>{1, 0, 0, 1});
  Tensor m(Shape{2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  EXPECT_EQ(std::vector<float>(r.data().begin(), r.data().end()),
            (std::vector<float>{1, 2, 3, 4}));

  Rng rng(3);
  Tensor z = matmul(Tensor(Shape{2, 3}), random_tensor<float>({3, 4}, rng));
  EXPECT_EQ(z.shape(), (Shape{2, 4}));
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);

  Tensor dot = matmul(Tensor(Shape{1, 2}, std::vector<float>{1, 2}),
                      Tensor(Shape{2, 1}, std::vector<float>{3, 4}));
  EXPECT_EQ(dot.item(), 11.0f);
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor(Shape{2, 3}), Tensor(Shape{2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] and [2,3]"), std::string::npos);
  }
}

TEST(Conv2dTest, Examples) {
  Rng rng(5);
  Tensor x = random_tensor<float>({2, 1, 4, 5}, rng);
  Tensor one(Shape{1, 1, 1, 1}, 1.0f);
  Tensor y = conv2d(x, one, Tensor(), 1, 0);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);

  Tensor zero = conv2d(x, Tensor(Shape{3, 1, 2, 2}), Tensor(), 1, 0);
  EXPECT_EQ(zero.shape(), (Shape{2, 3, 3, 4}));
  for (float v : zero.data()) EXPECT_EQ(v, 0.0f);

  Tensor ones(Shape{1, 1, 3, 3}, 1.0f);
  Tensor k(Shape{1, 1, 2, 2}, 1.0f);
  Tensor s = conv2d(ones, k, Tensor(), 1, 0);
  EXPECT_EQ(s.shape(), (Shape{1, 1, 2, 2}));
  for (float v : s.data()) EXPECT_EQ(v, 4.0f);
}

TEST(Conv2dTest, OutputSizeAndErrors) {
  Tensor x(Shape{1, 2, 8, 8});
  EXPECT_EQ(conv2d(x, Tensor(Shape{4, 2, 3, 3}), Tensor(), 1, 1).shape(),
            (Shape{1, 4, 8, 8}));
  EXPECT_EQ(conv2d(x, Tensor(Shape{4, 2, 2, 2}), Tensor(), 2, 0).shape(),
            (Shape{1, 4, 4, 4}));
  EXPECT_THROW(conv2d(x, Tensor(Shape{4, 2, 3, 3}), Tensor(), 2, 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor(Shape{4, 2, 11, 11}), Tensor(), 1, 1),
               ShapeError);
  EXPECT_THROW(conv2d(x, Tensor(Shape{4, 3, 3, 3}), Tensor(), 1, 1),
               DimensionError);
}

TEST(ConvTranspose2dTest, IsAdjointOfConv2d) {
  // <conv(x), y> == <x, conv_t(y)> for matching geometry.
  Rng rng(11);
  DTensor x = random_tensor<double>({1, 3, 8, 8}, rng);
  DTensor w = random_tensor<double>({4, 3, 4, 4}, rng);
  DTensor y = random_tensor<double>({1, 4, 4, 4}, rng);
  DTensor cx = conv2d(x, w, DTensor(), 2, 1);
  ASSERT_EQ(cx.shape(), y.shape());
  DTensor ty = conv_transpose2d(y, w, DTensor(), 2, 1);
  ASSERT_EQ(ty.shape(), x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * ty.data()[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(SoftmaxTest, Examples) {
  Tensor half = softmax(Tensor(Shape{1, 2}, std::vector<float>{0, 0}));
  EXPECT_FLOAT_EQ(half.data()[0], 0.5f);
  EXPECT_FLOAT_EQ(half.data()[1], 0.5f);

  for (float c : {-50.0f, 0.0f, 3.0f, 80.0f}) {
    Tensor q = softmax(Tensor(Shape{1, 4}, c));
    for (float v : q.data()) EXPECT_NEAR(v, 0.25f, 1e-7);
  }

  Tensor r = softmax(Tensor(Shape{1, 2}, std::vector<float>{0.0f, std::log(3.0f)}));
  EXPECT_NEAR(r.data()[0], 0.25f, 1e-6);
  EXPECT_NEAR(r.data()[1], 0.75f, 1e-6);
}

TEST(SoftmaxTest, RejectsNonFinite) {
  EXPECT_THROW(softmax(Tensor(Shape{1, 2}, std::vector<float>{0, NAN})),
               NumericError);
  EXPECT_THROW(softmax(Tensor(Shape{1, 2}, std::vector<float>{INFINITY, 0})),
               NumericError);
  EXPECT_THROW(softmax(Tensor(Shape{2, 1})), DimensionError);
}

TEST(SoftmaxTest, NormalizedAndShiftInvariant) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(8), k = 2 + rng.below(30);
    Tensor x = random_tensor<float>({n, k}, rng, -20, 20);
    Tensor shifted = x.clone();
    const float c = static_cast<float>(rng.uniform(-10, 10));
    for (auto& v : shifted.data()) v += c;
    Tensor p = softmax(x), q = softmax(shifted);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) {
        s += p.data()[r * k + j];
        EXPECT_GE(p.data()[r * k + j], 0.0f);
        EXPECT_NEAR(p.data()[r * k + j], q.data()[r * k + j], 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(CrossEntropyTest, Examples) {
  const std::vector<int> labels{0, 3, 9};
  Tensor uniform(Shape{3, 10}, 0.1f);
  EXPECT_NEAR(cross_entropy(uniform, labels).item(), std::log(10.0), 1e-6);
  EXPECT_NEAR(cross_entropy(uniform, labels).item(), 2.302585, 1e-6);

  Tensor onehot(Shape{3, 10});
  for (std::size_t r = 0; r < 3; ++r) onehot.data()[r * 10 + labels[r]] = 1.0f;
  EXPECT_EQ(cross_entropy(onehot, labels).item(), 0.0f);

  Tensor q(Shape{2, 5}, 0.2f);
  EXPECT_NEAR(cross_entropy(q, std::vector<int>{1, 4}).item(), std::log(5.0),
              1e-6);
}

TEST(CrossEntropyTest, ClampAndErrors) {
  Tensor p(Shape{1, 2}, std::vector<float>{1.0f, 0.0f});
  EXPECT_NEAR(cross_entropy(p, std::vector<int>{1}).item(),
              -std::log(1e-12), 1e-4);
  EXPECT_THROW(cross_entropy(p, std::vector<int>{2}), IndexError);
  EXPECT_THROW(cross_entropy(p, std::vector<int>{-1}), IndexError);
}

TEST(CrossEntropyTest, FusedRouteMatchesProbabilityRoute) {
  Rng rng(23);
  Tensor logits = random_tensor<float>({6, 10}, rng, -3, 3);
  std::vector<int> y{0, 1, 2, 3, 4, 5};
  EXPECT_NEAR(softmax_cross_entropy(logits, y).item(),
              cross_entropy(softmax(logits), y).item(), 1e-5);
}

TEST(BackwardTest, SumGivesOnes) {
  Tensor x(Shape{3, 2}, 0.7f);
  x.set_requires_grad(true);
  Tape tape;
  {
    auto rec = tape.record();
    backward(sum(x), tape);
  }
  for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(BackwardTest, HalfSquaredNormGivesX) {
  Rng rng(29);
  Tensor x = random_tensor<float>({4, 3}, rng);
  x.set_requires_grad(true);
  Tape tape;
  {
    auto rec = tape.record();
    backward(scale(sum(mul(x, x)), 0.5f), tape);
  }
  for (std::size_t i = 0; i < x.numel(); ++i)
    EXPECT_FLOAT_EQ(x.grad()[i], x.data()[i]);
}

TEST(BackwardTest, TwiceWithoutZeroGradDoubles) {
  Rng rng(31);
  Tensor x = random_tensor<float>({2, 1, 5, 5}, rng);
  Tensor w = random_tensor<float>({3, 1, 3, 3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    auto rec = tape.record();
    Tensor h = relu(conv2d(x, w, Tensor(), 1, 1));
    Tensor logits = reshape(max_pool2d(h, 5, 5), Shape{2, 3});
    loss = softmax_cross_entropy(logits, std::vector<int>{0, 2});
  }
  backward(loss, tape);
  std::vector<float> gx(x.grad().begin(), x.grad().end());
  std::vector<float> gw(w.grad().begin(), w.grad().end());
  backward(loss, tape);
  for (std::size_t i = 0; i < gx.size(); ++i) EXPECT_EQ(x.grad()[i], 2 * gx[i]);
  for (std::size_t i = 0; i < gw.size(); ++i) EXPECT_EQ(w.grad()[i], 2 * gw[i]);
  x.zero_grad();
  backward(loss, tape);
  for (std::size_t i = 0; i < gx.size(); ++i) EXPECT_EQ(x.grad()[i], gx[i]);
}

TEST(BackwardTest, Contracts) {
  Tensor x(Shape{2}, 1.0f);
  x.set_requires_grad(true);
  Tape tape;
  Tensor y;
  {
    auto rec = tape.record();
    y = scale(x, 2.0f);
  }
  EXPECT_THROW(backward(y, tape), ContractError);
  Tensor unrecorded = sum(x);
  EXPECT_THROW(backward(unrecorded, tape), ContractError);
}

TEST(BackwardTest, FrozenTensorsReceiveNoGrad) {
  Tensor x(Shape{2, 2}, 1.0f);
  Tensor w(Shape{2, 2}, 0.5f);
  w.set_requires_grad(true);
  Tape tape;
  Tensor loss;
  {
    auto rec = tape.record();
    loss = sum(matmul(x, w));
  }
  backward(loss, tape);
  EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(BackwardTest, TapeVisitsEachOpOnce) {
  Tensor x(Shape{3}, 2.0f);
  x.set_requires_grad(true);
  int visits = 0;
  Tape tape;
  Tensor loss;
  {
    auto rec = tape.record();
    Tensor y = scale(x, 3.0f);
    Tensor counted(Shape{}, 0.0f);
    loss = sum(y);
    tape.push({loss}, counted, [&visits]() { ++visits; });
    loss = counted;
  }
  backward(loss, tape);
  EXPECT_EQ(visits, 1);
}

TEST(GradCheckTest, SumIsExact) {
  Rng rng(37);
  DTensor x = random_tensor<double>({3, 4}, rng);
  EXPECT_LT(grad_check<double>([](const DTensor& t) { return sum(t); }, x, kEps),
            1e-9);
}

TEST(GradCheckTest, CrossEntropyOfSoftmax) {
  Rng rng(41);
  DTensor logits = random_tensor<double>({5, 10}, rng, -2, 2);
  std::vector<int> y{1, 3, 5, 7, 9};
  auto f = [&y](const DTensor& t) { return cross_entropy(softmax(t), y); };
  EXPECT_LT(grad_check<double>(f, logits, kEps), kTol);
}

TEST(GradCheckTest, WrongBackwardByFactorTwoIsFlagged) {
  // f(x) = 0.5 * sum(x^2) with a rule that reports 2x instead of x.
  auto broken = [](const DTensor& x) {
    double acc = 0;
    for (double v : x.data()) acc += 0.5 * v * v;
    DTensor out = DTensor::scalar(acc);
    if (DTape::should_record({&x})) {
      DTape::active()->push({x}, out, [x, out]() {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += out.grad()[0] * 2.0 * x.data()[i];
      });
    }
    return out;
  };
  DTensor x(Shape{4}, std::vector<double>{0.5, -1.0, 2.0, 1.5});
  EXPECT_NEAR(grad_check<double>(broken, x, kEps), 1.0 / 3.0, 1e-3);
}

TEST(GradCheckTest, TwoLayerNetOnFourByFourInput) {
  Rng rng(43);
  DTensor x = random_tensor<double>({2, 1, 4, 4}, rng);
  DTensor w1 = random_tensor<double>({3, 1, 3, 3}, rng);
  DTensor b1 = random_tensor<double>({3}, rng);
  DTensor w2 = random_tensor<double>({48, 5}, rng);
  DTensor b2 = random_tensor<double>({5}, rng);
  std::vector<int> y{1, 4};
  auto net = [&](const DTensor& in, const DTensor& a, const DTensor& b) {
    DTensor h = tanh(conv2d(in, a, b1, 1, 1));
    return softmax_cross_entropy(linear(reshape(h, Shape{2, 48}), b, b2), y);
  };
  EXPECT_LT(grad_check<double>([&](const DTensor& t) { return net(t, w1, w2); },
                               x, kEps),
            kTol);
  EXPECT_LT(grad_check<double>([&](const DTensor& t) { return net(x, t, w2); },
                               w1, kEps),
            kTol);
  EXPECT_LT(grad_check<double>([&](const DTensor& t) { return net(x, w1, t); },
                               w2, kEps),
            kTol);
}

// Every differentiable op on three randomized shapes.
class OpGradTest : public ::testing::TestWithParam<int> {};

TEST_P(OpGradTest, EveryOpMatchesFiniteDifferences) {
  const int variant = GetParam();
  testing::check_every_op(variant, [&](const std::string& name, double err) {
    EXPECT_LT(err, kTol) << name << " variant " << variant;
  });
}

INSTANTIATE_TEST_SUITE_P(Shapes, OpGradTest, ::testing::Values(0, 1, 2));

TEST(PrecisionTest, FloatAndDoubleBackwardAgree) {
  Rng rng(53);
  DTensor xd = random_tensor<double>({3, 2, 6, 6}, rng);
  DTensor wd = random_tensor<double>({4, 2, 3, 3}, rng);
  Tensor xf(xd.shape()), wf(wd.shape());
  for (std::size_t i = 0; i < xd.numel(); ++i) xf.data()[i] = float(xd.data()[i]);
  for (std::size_t i = 0; i < wd.numel(); ++i) wf.data()[i] = float(wd.data()[i]);
  wd.set_requires_grad(true);
  wf.set_requires_grad(true);
  std::vector<int> y{0, 5, 9};
  auto run = [&y](auto x, auto w, auto& tape) {
    using Scalar = typename decltype(x)::value_type;
    auto rec = tape.record();
    auto h = max_pool2d(relu(conv2d(x, w, decltype(x)(), 1, 1)), 2, 2);
    auto logits = reshape(h, Shape{3, 36});
    auto p = softmax(logits);
    auto loss = add(cross_entropy(p, y), scale(mean(variance_last_axis(p)),
                                              Scalar(5)));
    backward(loss, tape);
  };
  DTape td;
  Tape tf;
  run(xd, wd, td);
  run(xf, wf, tf);
  for (std::size_t i = 0; i < wd.numel(); ++i)
    EXPECT_NEAR(wf.grad()[i], wd.grad()[i],
                1e-4 * (1.0 + std::abs(wd.grad()[i])));
}

TEST(DeterminismTest, RepeatedForwardBackwardIsBitIdentical) {
  auto once = []() {
    Rng rng(59);
    Tensor x = random_tensor<float>({4, 3, 8, 8}, rng);
    Tensor w = random_tensor<float>({5, 3, 3, 3}, rng);
    w.set_requires_grad(true);
    Tape tape;
    Tensor loss;
    {
      auto rec = tape.record();
      loss = mean(tanh(conv2d(x, w, Tensor(), 1, 1)));
    }
    backward(loss, tape);
    std::vector<float> out{loss.item()};
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(once(), once());
}

TEST(VarianceTest, RowVariance) {
  Tensor onehot(Shape{1, 4}, std::vector<float>{1, 0, 0, 0});
  EXPECT_NEAR(variance_last_axis(onehot).item(), 0.1875f, 1e-7);
  Tensor flat = variance_last_axis(Tensor(Shape{2, 5}, 0.2f));
  for (float v : flat.data()) EXPECT_NEAR(v, 0.0f, 1e-12);
}

TEST(ArgmaxTest, TiesGoLow) {
  Tensor x(Shape{2, 3}, std::vector<float>{1, 3, 3, 2, 2, 2});
  EXPECT_EQ(argmax_rows(x), (std::vector<int>{1, 0}));
}

}  // namespace
}  // namespace fwmark
