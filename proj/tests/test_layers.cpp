#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "macnn/layers.hpp"
#include "oracles.hpp"

namespace macnn {
namespace {

using testing::finite_difference;
using testing::random_tensor;
using testing::relative_error;
using testing::weighted_sum;

TEST(Conv2d, OnesKernelSumsWindow) {
  Tensor in({1, 3, 3}, 1.0);
  Tensor k({1, 1, 2, 2}, 1.0);
  Tensor b({1}, 0.0);
  const Tensor out = conv2d_forward(in, k, b);
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2}));
  for (auto v : out.data()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, FirstLayerShape) {
  Tensor in({3, 101, 101}, 0.5);
  Tensor k({16, 3, 6, 6}, 0.01);
  Tensor b({16}, 0.0);
  EXPECT_EQ(conv2d_forward(in, k, b).shape(), (Shape{16, 96, 96}));
}

TEST(Conv2d, MatchesLoopOracle) {
  std::mt19937_64 rng(7);
  const Tensor in = random_tensor({1, 5, 5}, rng);
  const Tensor k = random_tensor({2, 1, 3, 3}, rng);
  const Tensor b = random_tensor({2}, rng);
  const Tensor fast = conv2d_forward(in, k, b);
  const Tensor slow = testing::brute_conv2d(in, k, b);
  ASSERT_EQ(fast.shape(), slow.shape());
  for (std::size_t n = 0; n < fast.size(); ++n) EXPECT_NEAR(fast[n], slow[n], 1e-9);
}

TEST(Conv2d, RandomShapesMatchOracle) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> ch(1, 4), side(1, 16), kern(1, 6);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t c = ch(rng), h = side(rng), w = side(rng), o = ch(rng);
    const std::size_t kh = std::min(kern(rng), h), kw = std::min(kern(rng), w);
    const Tensor in = random_tensor({c, h, w}, rng);
    const Tensor k = random_tensor({o, c, kh, kw}, rng);
    const Tensor b = random_tensor({o}, rng);
    const Tensor fast = conv2d_forward(in, k, b);
    const Tensor slow = testing::brute_conv2d(in, k, b);
    for (std::size_t n = 0; n < fast.size(); ++n) ASSERT_NEAR(fast[n], slow[n], 1e-9);
  }
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
  Tensor in({2, 5, 5});
  Tensor k({1, 3, 2, 2});
  Tensor b({1});
  try {
    conv2d_forward(in, k, b);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
    EXPECT_NE(std::string(e.what()).find("[2x5x5]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[1x3x2x2]"), std::string::npos);
  }
  Tensor big({1, 3, 3, 3});
  EXPECT_THROW(conv2d_forward(Tensor({3, 2, 2}), big, b), Error);
}

TEST(Conv2dBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(3);
  const Tensor in = random_tensor({2, 6, 6}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const auto grad = conv2d_backward(in, k, Tensor({3, 4, 4}));
  for (auto v : grad.d_input.data()) EXPECT_EQ(v, 0.0);
  for (const auto& p : grad.d_params)
    for (auto v : p.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, BiasGradientIsChannelSum) {
  std::mt19937_64 rng(4);
  const Tensor in = random_tensor({1, 5, 5}, rng);
  const Tensor k = random_tensor({2, 1, 2, 2}, rng);
  const Tensor g = random_tensor({2, 4, 4}, rng);
  const auto grad = conv2d_backward(in, k, g);
  for (std::size_t o = 0; o < 2; ++o) {
    double s = 0;
    for (std::size_t n = 0; n < 16; ++n) s += g[o * 16 + n];
    EXPECT_NEAR(grad.d_params[1][o], s, 1e-12);
  }
}

TEST(Conv2dBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor in = random_tensor({2, 7, 6}, rng);
  Tensor k = random_tensor({3, 2, 3, 2}, rng);
  Tensor b = random_tensor({3}, rng);
  const Tensor r = random_tensor({3, 5, 5}, rng);
  auto loss = [&] { return weighted_sum(conv2d_forward(in, k, b), r); };
  const auto grad = conv2d_backward(in, k, r);
  EXPECT_LT(relative_error(grad.d_input.data(), finite_difference(in, loss).data()), 1e-3);
  EXPECT_LT(relative_error(grad.d_params[0].data(), finite_difference(k, loss).data()), 1e-3);
  EXPECT_LT(relative_error(grad.d_params[1].data(), finite_difference(b, loss).data()), 1e-3);
}

TEST(Conv2dBackward, RejectsWrongUpstreamShape) {
  EXPECT_THROW(conv2d_backward(Tensor({1, 4, 4}), Tensor({1, 1, 2, 2}), Tensor({1, 2, 2})), Error);
}

TEST(MaxPool, PicksWindowMaximum) {
  const Tensor in({1, 2, 2}, {1, 2, 3, 4});
  const auto res = maxpool2_forward(in);
  ASSERT_EQ(res.output.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(res.output[0], 4);
  const Tensor d_in = maxpool2_backward(res.indices, Tensor({1, 1, 1}, 1.0));
  EXPECT_EQ(d_in, Tensor({1, 2, 2}, {0, 0, 0, 1}));
}

TEST(MaxPool, ShapesUseFloor) {
  EXPECT_EQ(maxpool2_forward(Tensor({16, 96, 96})).output.shape(), (Shape{16, 48, 48}));
  EXPECT_EQ(maxpool2_forward(Tensor({16, 9, 9})).output.shape(), (Shape{16, 4, 4}));
  EXPECT_THROW(maxpool2_forward(Tensor({1, 1, 4})), Error);
}

TEST(MaxPool, TiesRouteToTopLeft) {
  const auto res = maxpool2_forward(Tensor({1, 2, 2}, 7.0));
  const Tensor d_in = maxpool2_backward(res.indices, Tensor({1, 1, 1}, 2.0));
  EXPECT_EQ(d_in, Tensor({1, 2, 2}, {2, 0, 0, 0}));
}

TEST(MaxPool, StaleIndicesRejected) {
  const auto res = maxpool2_forward(Tensor({1, 4, 4}));
  EXPECT_THROW(maxpool2_backward(res.indices, Tensor({1, 1, 1})), Error);
}

TEST(MaxPool, MatchesFiniteDifferences) {
  // Distinct values spaced well beyond eps keep every window away from ties.
  std::mt19937_64 rng(6);
  std::vector<real_t> values(2 * 7 * 6);
  for (std::size_t n = 0; n < values.size(); ++n) values[n] = 0.01 * double(n);
  std::shuffle(values.begin(), values.end(), rng);
  Tensor in({2, 7, 6}, values);
  const Tensor r = random_tensor({2, 3, 3}, rng);
  auto loss = [&] { return weighted_sum(maxpool2_forward(in).output, r); };
  const auto res = maxpool2_forward(in);
  const Tensor d_in = maxpool2_backward(res.indices, r);
  EXPECT_LT(relative_error(d_in.data(), finite_difference(in, loss).data()), 1e-3);
}

TEST(LeakyRelu, PiecewiseValues) {
  const Tensor out = leaky_relu(Tensor({3}, {5.0, -1.0, 0.0}), 0.01);
  EXPECT_EQ(out[0], 5.0);
  EXPECT_DOUBLE_EQ(out[1], -0.01);
  EXPECT_EQ(out[2], 0.0);
  const Tensor g = leaky_relu_backward(Tensor({3}, {5.0, -1.0, 0.0}), Tensor({3}, 1.0), 0.01);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 0.01);
  EXPECT_EQ(g[2], 1.0);
}

TEST(LeakyRelu, MatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Tensor in = random_tensor({40}, rng);
  for (auto& v : in.data())
    if (std::abs(v) < 1e-2) v += 0.05;
  const Tensor r = random_tensor({40}, rng);
  auto loss = [&] { return weighted_sum(leaky_relu(in, 0.01), r); };
  const Tensor g = leaky_relu_backward(in, r, 0.01);
  EXPECT_LT(relative_error(g.data(), finite_difference(in, loss).data()), 1e-3);
}

TEST(Maxout, PairwiseMax) {
  const auto res = maxout_pairs(Tensor({4}, {1, 3, 2, 0}));
  EXPECT_EQ(res.output, Tensor({2}, {3, 2}));
  EXPECT_THROW(maxout_pairs(Tensor({3})), Error);
}

TEST(Maxout, TiesGoToFirstOfPair) {
  const auto res = maxout_pairs(Tensor({4}, 1.0));
  const Tensor g = maxout_pairs_backward(res, Tensor({2}, {5.0, 6.0}));
  EXPECT_EQ(g, Tensor({4}, {5, 0, 6, 0}));
}

TEST(Maxout, MatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  Tensor in = random_tensor({30}, rng);
  for (std::size_t i = 0; i < 15; ++i) {
    if (std::abs(in[2 * i] - in[2 * i + 1]) < 1e-2) in[2 * i] += 0.1;
  }
  const Tensor r = random_tensor({15}, rng);
  auto loss = [&] { return weighted_sum(maxout_pairs(in).output, r); };
  const Tensor g = maxout_pairs_backward(maxout_pairs(in), r);
  EXPECT_LT(relative_error(g.data(), finite_difference(in, loss).data()), 1e-3);
}

TEST(FullyConnected, IdentityWeights) {
  Tensor w({3, 3});
  for (std::size_t i = 0; i < 3; ++i) w[i * 3 + i] = 1;
  const Tensor x({3}, {0.5, -2, 7});
  EXPECT_EQ(fully_connected_forward(x, w, Tensor({3})), x);
}

TEST(FullyConnected, WeightGradientIsOuterProduct) {
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({5}, rng);
  const Tensor w = random_tensor({7, 5}, rng);
  const Tensor g = random_tensor({7}, rng);
  const auto grad = fully_connected_backward(x, w, g);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_DOUBLE_EQ(grad.d_params[0][r * 5 + c], g[r] * x[c]);
  EXPECT_EQ(grad.d_params[1], g);
}

TEST(FullyConnected, MatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({2, 3, 2}, rng);  // read flattened
  Tensor w = random_tensor({9, 12}, rng);
  Tensor b = random_tensor({9}, rng);
  const Tensor r = random_tensor({9}, rng);
  auto loss = [&] { return weighted_sum(fully_connected_forward(x, w, b), r); };
  const auto grad = fully_connected_backward(x, w, r);
  EXPECT_EQ(grad.d_input.shape(), x.shape());
  EXPECT_LT(relative_error(grad.d_input.data(), finite_difference(x, loss).data()), 1e-3);
  EXPECT_LT(relative_error(grad.d_params[0].data(), finite_difference(w, loss).data()), 1e-3);
  EXPECT_LT(relative_error(grad.d_params[1].data(), finite_difference(b, loss).data()), 1e-3);
  EXPECT_THROW(fully_connected_forward(Tensor({11}), w, b), Error);
}

TEST(Softmax2, Basics) {
  EXPECT_EQ(softmax2(Tensor({2}, {0, 0})), Tensor({2}, {0.5, 0.5}));
  const Tensor big = softmax2(Tensor({2}, {1000, 0}));
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
}

TEST(Softmax2, SumsToOneAndShiftInvariant) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> logit(-50, 50), shift(-100, 100);
  for (int i = 0; i < 1000; ++i) {
    const Tensor z({2}, {logit(rng), logit(rng)});
    const Tensor p = softmax2(z);
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12);
    EXPECT_GT(p[0], 0.0);
    const double s = shift(rng);
    const Tensor q = softmax2(Tensor({2}, {z[0] + s, z[1] + s}));
    EXPECT_NEAR(p[0], q[0], 1e-12);
    EXPECT_NEAR(p[1], q[1], 1e-12);
  }
}

TEST(Softmax2, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(14);
  Tensor z = random_tensor({2}, rng, -3, 3);
  const Tensor r = random_tensor({2}, rng);
  auto loss = [&] { return weighted_sum(softmax2(z), r); };
  const Tensor g = softmax2_backward(softmax2(z), r);
  EXPECT_LT(relative_error(g.data(), finite_difference(z, loss).data()), 1e-3);
}

TEST(BceLoss, Values) {
  EXPECT_LE(bce_loss(1.0, 1).loss, 1.2e-7);
  EXPECT_NEAR(bce_loss(0.5, 1).loss, std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_loss(0.5, 0).loss, std::log(2.0), 1e-12);
  EXPECT_TRUE(std::isfinite(bce_loss(0.0, 1).loss));
  EXPECT_THROW(bce_loss(0.5, 2), Error);
}

TEST(BceLoss, DerivativeMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> prob(0.01, 0.99);
  for (int i = 0; i < 200; ++i) {
    const double p = prob(rng);
    const int t = static_cast<int>(rng() % 2);
    const double eps = 1e-4;
    const double fd = (bce_loss(p + eps, t).loss - bce_loss(p - eps, t).loss) / (2 * eps);
    const double analytic = bce_loss(p, t).d_p;
    EXPECT_LT(std::abs(analytic - fd) / std::abs(fd), 1e-3);
  }
}

TEST(Dropout, IdentityCases) {
  std::mt19937_64 rng(16);
  const Tensor x = random_tensor({100}, rng);
  EXPECT_EQ(dropout(x, 0.0, rng, true).output, x);
  EXPECT_EQ(dropout(x, 0.0, rng, false).output, x);
  EXPECT_EQ(dropout(x, 0.25, rng, false).output, x);
  EXPECT_THROW(dropout(x, 1.0, rng, true), Error);
}

TEST(Dropout, StatisticsOfInvertedDropout) {
  std::mt19937_64 rng(17);
  const Tensor x = random_tensor({1000000}, rng, 0.5, 1.5);
  const auto res = dropout(x, 0.25, rng, true);
  std::size_t zeros = 0;
  double in_sum = 0, out_sum = 0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    zeros += res.output[n] == 0;
    in_sum += x[n];
    out_sum += res.output[n];
  }
  EXPECT_NEAR(double(zeros) / x.size(), 0.25, 0.005);
  EXPECT_NEAR(out_sum / in_sum, 1.0, 0.01);
  const Tensor g = dropout_backward(res, Tensor(x.shape(), 1.0));
  for (std::size_t n = 0; n < x.size(); n += 997) EXPECT_EQ(g[n], res.scale[n]);
}

TEST(Dropout, DeterministicForSameRngState) {
  std::mt19937_64 a(99), b(99), rng(1);
  const Tensor x = random_tensor({500}, rng);
  EXPECT_EQ(dropout(x, 0.25, a, true).output, dropout(x, 0.25, b, true).output);
}

}  // namespace
}  // namespace macnn
