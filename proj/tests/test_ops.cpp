#include <gtest/gtest.h>

#include <cmath>

#include "dcollab/ops.hpp"
#include "dcollab/rng.hpp"

using namespace dcollab;

namespace {

Tensor<double> ones(Shape s) { return Tensor<double>::filled(std::move(s), 1.0); }

// Reference convolution: direct quadruple loop, no im2col, no GEMM.
Tensor<double> conv2d_reference(const Tensor<double>& x,
                                const Tensor<double>& w,
                                const Tensor<double>& b, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::int64_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const std::int64_t cout = ws[0], kh = ws[2], kw = ws[3];
  const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  auto y = Tensor<double>::zeros({n, cout, oh, ow});
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t co = 0; co < cout; ++co)
      for (std::int64_t oi = 0; oi < oh; ++oi)
        for (std::int64_t oj = 0; oj < ow; ++oj) {
          double acc = b.defined() ? b.data()[co] : 0.0;
          for (std::int64_t ci = 0; ci < cin; ++ci)
            for (std::int64_t ki = 0; ki < kh; ++ki)
              for (std::int64_t kj = 0; kj < kw; ++kj) {
                const std::int64_t ih = oi * stride - pad + ki;
                const std::int64_t iw = oj * stride - pad + kj;
                if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                acc += x.data()[((ni * cin + ci) * h + ih) * wd + iw] *
                       w.data()[((co * cin + ci) * kh + ki) * kw + kj];
              }
          y.data()[((ni * cout + co) * oh + oi) * ow + oj] = acc;
        }
  return y;
}

}  // namespace

TEST(Conv2d, AllOnes3x3Padded) {
  auto x = ones({1, 1, 3, 3});
  auto w = ones({1, 1, 3, 3});
  auto b = Tensor<double>::zeros({1});
  auto y = conv2d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  // each output counts the in-bounds neighbors
  EXPECT_DOUBLE_EQ(y.data()[4], 9.0);  // center
  EXPECT_DOUBLE_EQ(y.data()[0], 4.0);  // corners
  EXPECT_DOUBLE_EQ(y.data()[2], 4.0);
  EXPECT_DOUBLE_EQ(y.data()[6], 4.0);
  EXPECT_DOUBLE_EQ(y.data()[8], 4.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 6.0);  // edges
}

TEST(Conv2d, ZeroWeightAnnihilates) {
  Rng rng(1);
  auto x = Tensor<double>::zeros({2, 3, 5, 5});
  for (auto& v : x.values()) v = rng.uniform(-1, 1);
  auto w = Tensor<double>::zeros({4, 3, 3, 3});
  auto b = Tensor<double>::zeros({4});
  auto y = conv2d(x, w, b, 1, 1);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Conv2d, OneByOneIdentity) {
  Rng rng(2);
  auto x = Tensor<double>::zeros({1, 1, 4, 4});
  for (auto& v : x.values()) v = rng.uniform(-1, 1);
  auto w = Tensor<double>::filled({1, 1, 1, 1}, 1.0);
  auto y = conv2d(x, w, Tensor<double>(), 1, 0);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  auto x = Tensor<double>::zeros({1, 3, 4, 4});
  auto w = Tensor<double>::zeros({2, 4, 3, 3});
  try {
    conv2d(x, w, Tensor<double>(), 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,3,4,4]"), std::string::npos);
    EXPECT_NE(msg.find("[2,4,3,3]"), std::string::npos);
  }
}

TEST(Conv2d, MatchesDirectReferenceOnRandomCases) {
  Rng rng(3);
  for (int it = 0; it < 20; ++it) {
    const int cin = 1 + static_cast<int>(rng.randint(3));
    const int cout = 1 + static_cast<int>(rng.randint(3));
    const int k = rng.bernoulli(0.5) ? 1 : 3;
    const int stride = 1 + static_cast<int>(rng.randint(2));
    const int pad = static_cast<int>(rng.randint(2));
    const int h = k + static_cast<int>(rng.randint(5));
    const int w = k + static_cast<int>(rng.randint(5));
    auto x = Tensor<double>::zeros({2, cin, h, w});
    for (auto& v : x.values()) v = rng.uniform(-1, 1);
    auto wt = Tensor<double>::zeros({cout, cin, k, k});
    for (auto& v : wt.values()) v = rng.uniform(-1, 1);
    auto b = Tensor<double>::zeros({cout});
    for (auto& v : b.values()) v = rng.uniform(-1, 1);

    auto got = conv2d(x, wt, b, stride, pad);
    auto want = conv2d_reference(x, wt, b, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::int64_t i = 0; i < got.numel(); ++i)
      EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
  }
}

TEST(Conv2d, OutputShapeFormula) {
  Rng rng(4);
  for (int it = 0; it < 100; ++it) {
    const int k = 1 + 2 * static_cast<int>(rng.randint(3));  // 1,3,5
    const int stride = 1 + static_cast<int>(rng.randint(3));
    const int pad = static_cast<int>(rng.randint(3));
    const int h = k + static_cast<int>(rng.randint(8));
    const int w = k + static_cast<int>(rng.randint(8));
    if (h + 2 * pad < k || w + 2 * pad < k) continue;
    auto x = Tensor<double>::zeros({1, 2, h, w});
    auto wt = Tensor<double>::zeros({3, 2, k, k});
    auto y = conv2d(x, wt, Tensor<double>(), stride, pad);
    EXPECT_EQ(y.shape()[2], (h + 2 * pad - k) / stride + 1);
    EXPECT_EQ(y.shape()[3], (w + 2 * pad - k) / stride + 1);
  }
}

TEST(BatchNorm, HandNormalization) {
  // channel values {1,2,3,4} over the batch: mean 2.5, biased var 1.25
  auto x = Tensor<double>::from_data({4, 1, 1, 1}, {1, 2, 3, 4});
  auto gamma = Tensor<double>::filled({1}, 1.0);
  auto beta = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::zeros({1});
  auto rv = Tensor<double>::filled({1}, 1.0);
  auto y = batch_norm(x, gamma, beta, rm, rv, Mode::kTrain, 1e-5, 0.1);
  EXPECT_NEAR(y.data()[0], -1.3416, 1e-3);
  EXPECT_NEAR(y.data()[1], -0.4472, 1e-3);
  EXPECT_NEAR(y.data()[2], 0.4472, 1e-3);
  EXPECT_NEAR(y.data()[3], 1.3416, 1e-3);
  // running stats move toward the batch statistics
  EXPECT_NEAR(rm.data()[0], 0.25, 1e-12);                 // 0.9*0 + 0.1*2.5
  EXPECT_NEAR(rv.data()[0], 0.9 + 0.1 * 1.25 * 4 / 3.0, 1e-12);
}

TEST(BatchNorm, ZeroGammaAnnihilates) {
  Rng rng(5);
  auto x = Tensor<double>::zeros({2, 3, 4, 4});
  for (auto& v : x.values()) v = rng.uniform(-2, 2);
  auto gamma = Tensor<double>::zeros({3});
  auto beta = Tensor<double>::filled({3}, 5.0);
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::filled({3}, 1.0);
  auto y = batch_norm(x, gamma, beta, rm, rv, Mode::kTrain, 1e-5, 0.1);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 5.0);
}

TEST(BatchNorm, EvalIdentityStatistics) {
  Rng rng(6);
  auto x = Tensor<double>::zeros({2, 2, 3, 3});
  for (auto& v : x.values()) v = rng.uniform(-1, 1);
  auto gamma = Tensor<double>::filled({2}, 1.0);
  auto beta = Tensor<double>::zeros({2});
  auto rm = Tensor<double>::zeros({2});
  auto rv = Tensor<double>::filled({2}, 1.0);
  auto y = batch_norm(x, gamma, beta, rm, rv, Mode::kEval, 1e-5, 0.1);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    EXPECT_NEAR(y.data()[i], x.data()[i], 1e-5);
}

TEST(BatchNorm, ShapeAndModeErrors) {
  auto x = Tensor<double>::zeros({2, 3, 2, 2});
  auto gamma = Tensor<double>::filled({4}, 1.0);
  auto beta = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::filled({3}, 1.0);
  EXPECT_THROW(batch_norm(x, gamma, beta, rm, rv, Mode::kTrain, 1e-5, 0.1),
               ShapeError);

  auto tiny = Tensor<double>::zeros({1, 3, 1, 1});
  auto g3 = Tensor<double>::filled({3}, 1.0);
  EXPECT_THROW(batch_norm(tiny, g3, beta, rm, rv, Mode::kTrain, 1e-5, 0.1),
               UsageError);
  EXPECT_NO_THROW(batch_norm(tiny, g3, beta, rm, rv, Mode::kEval, 1e-5, 0.1));
}

TEST(Concat, TwoInputsStackChannels) {
  auto a = Tensor<double>::zeros({2, 64, 3, 3});
  auto b = Tensor<double>::zeros({2, 64, 3, 3});
  auto y = concat_depthwise<double>({a, b});
  EXPECT_EQ(y.shape(), (Shape{2, 128, 3, 3}));
}

TEST(Concat, SingleInputIdentity) {
  Rng rng(7);
  auto a = Tensor<double>::zeros({2, 3, 4, 4});
  for (auto& v : a.values()) v = rng.uniform(-1, 1);
  auto y = concat_depthwise<double>({a});
  EXPECT_EQ(y.values(), a.values());
}

TEST(Concat, SliceRecoveryIsExact) {
  Rng rng(8);
  std::vector<Tensor<double>> xs;
  for (int c : {8, 16, 8}) {
    auto t = Tensor<double>::zeros({2, c, 3, 5});
    for (auto& v : t.values()) v = rng.uniform(-1, 1);
    xs.push_back(t);
  }
  auto y = concat_depthwise(xs);
  EXPECT_EQ(y.shape()[1], 32);
  std::int64_t off = 0;
  for (const auto& x : xs) {
    auto part = slice_channels(y, off, off + x.shape()[1]);
    EXPECT_EQ(part.values(), x.values());  // bit-exact round trip
    off += x.shape()[1];
  }
}

TEST(Concat, SpatialMismatchRejected) {
  auto a = Tensor<double>::zeros({1, 2, 3, 3});
  auto b = Tensor<double>::zeros({1, 2, 4, 3});
  EXPECT_THROW(concat_depthwise<double>({a, b}), ShapeError);
}

TEST(MaxPool, HandCase) {
  auto x = Tensor<double>::from_data(
      {1, 1, 4, 4},
      {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  auto y = max_pool2d(x, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.values(), (std::vector<double>{6, 8, 14, 16}));
}

TEST(GlobalAvgPool, ConstantMap) {
  auto x = Tensor<double>::filled({2, 3, 4, 4}, 2.5);
  auto y = global_avg_pool(x);
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Linear, IdentityWeightZeroBias) {
  auto x = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto w = Tensor<double>::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto b = Tensor<double>::zeros({3});
  auto y = linear(x, w, b);
  EXPECT_EQ(y.values(), x.values());
}

TEST(Linear, ShapeErrors) {
  auto x = Tensor<double>::zeros({2, 3});
  auto w = Tensor<double>::zeros({4, 5});
  EXPECT_THROW(linear(x, w, Tensor<double>()), ShapeError);
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  auto logits = Tensor<double>::zeros({3, 5});
  auto loss = softmax_cross_entropy(logits, {0, 2, 4});
  EXPECT_NEAR(loss.item(), std::log(5.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, DominantTrueClass) {
  auto logits = Tensor<double>::from_data({1, 3}, {100.0, 0.0, 0.0});
  auto loss = softmax_cross_entropy(logits, {0});
  EXPECT_NEAR(loss.item(), 0.0, 1e-12);
}

TEST(SoftmaxCrossEntropy, HandComputedCase) {
  // -log(e^2 / (e^2 + e^1 + e^0)) = log(e^2+e+1) - 2 = 0.40761...
  auto logits = Tensor<double>::from_data({1, 3}, {2.0, 1.0, 0.0});
  auto loss = softmax_cross_entropy(logits, {0});
  const double want =
      std::log(std::exp(2.0) + std::exp(1.0) + 1.0) - 2.0;
  EXPECT_NEAR(loss.item(), want, 1e-12);
  EXPECT_NEAR(loss.item(), 0.407606, 1e-5);
}

TEST(SoftmaxCrossEntropy, LabelOutOfRange) {
  auto logits = Tensor<double>::zeros({2, 3});
  EXPECT_THROW(softmax_cross_entropy(logits, {0, 3}), IndexError);
  EXPECT_THROW(softmax_cross_entropy(logits, {-1, 0}), IndexError);
}

TEST(SoftmaxCrossEntropy, StabilityWithLargeLogits) {
  auto logits = Tensor<double>::from_data({1, 2}, {1e4, 1e4 - 1.0});
  auto loss = softmax_cross_entropy(logits, {0});
  EXPECT_TRUE(std::isfinite(loss.item()));
}

TEST(CrossStitchCombine, IdentityAlpha) {
  Rng rng(9);
  std::vector<Tensor<double>> xs;
  for (int t = 0; t < 3; ++t) {
    auto x = Tensor<double>::zeros({1, 2, 3, 3});
    for (auto& v : x.values()) v = rng.uniform(-1, 1);
    xs.push_back(x);
  }
  auto alpha = Tensor<double>::from_data({3, 3},
                                         {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto ys = cross_stitch_combine(xs, alpha);
  for (int t = 0; t < 3; ++t)
    EXPECT_EQ(ys[static_cast<std::size_t>(t)].values(),
              xs[static_cast<std::size_t>(t)].values());
}

TEST(CrossStitchCombine, HandMix) {
  auto a = Tensor<double>::filled({1, 1, 1, 2}, 1.0);
  auto b = Tensor<double>::filled({1, 1, 1, 2}, 3.0);
  auto alpha = Tensor<double>::from_data({2, 2}, {0.5, 0.5, 0.25, 0.75});
  auto ys = cross_stitch_combine<double>({a, b}, alpha);
  EXPECT_DOUBLE_EQ(ys[0].data()[0], 2.0);    // 0.5*1 + 0.5*3
  EXPECT_DOUBLE_EQ(ys[1].data()[0], 2.5);    // 0.25*1 + 0.75*3
}

TEST(Determinism, SameSeedBitIdenticalForward) {
  auto run = [] {
    Rng rng(77);
    auto x = Tensor<float>::zeros({2, 3, 8, 8});
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform(-1, 1));
    auto w = Tensor<float>::zeros({4, 3, 3, 3});
    for (auto& v : w.values()) v = static_cast<float>(rng.uniform(-1, 1));
    auto y = conv2d(x, w, Tensor<float>(), 1, 1);
    return y.values();
  };
  EXPECT_EQ(run(), run());
}
