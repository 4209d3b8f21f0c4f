#include <gtest/gtest.h>

#include <random>

#include "macnn/preprocess.hpp"
#include "oracles.hpp"

namespace macnn {
namespace {

using testing::brute_median_at;
using testing::random_tensor;

Tensor rot90(const Tensor& t) {
  // (c, y, x) -> (c, W-1-x, y): counter-clockwise quarter turn.
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor out({C, W, H});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out(c, W - 1 - x, y) = t(c, y, x);
  return out;
}

TEST(MedianBackground, ConstantImage) {
  const Tensor img({3, 40, 40}, 0.42);
  const Tensor bg = median_background(img, 30);
  for (auto v : bg.data()) EXPECT_EQ(v, 0.42);
}

TEST(MedianBackground, RejectsSingleOutlier) {
  Tensor img({1, 40, 40}, 0.5);
  img(0, 20, 20) = 1.0;
  EXPECT_EQ(median_background(img, 30)(0, 20, 20), 0.5);
}

TEST(MedianBackground, MatchesSortOracle) {
  std::mt19937_64 rng(11);
  const std::size_t windows[] = {1, 2, 3, 4, 5, 7, 8, 30};
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t k = windows[trial % 8];
    const std::size_t H = 3 + rng() % 14, W = 3 + rng() % 14;
    const Tensor img = random_tensor({2, H, W}, rng);
    const Tensor bg = median_background(img, k);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
          ASSERT_EQ(bg(c, y, x), brute_median_at(img, c, y, x, k)) << "k=" << k << " trial=" << trial;
  }
}

TEST(MedianBackground, ThreadCountDoesNotMatter) {
  std::mt19937_64 rng(5);
  const Tensor img = random_tensor({3, 33, 29}, rng);
  EXPECT_EQ(median_background(img, 9, 1), median_background(img, 9, 4));
}

TEST(MedianBackground, OddWindowCommutesWithRotation) {
  std::mt19937_64 rng(7);
  for (std::size_t k : {3u, 5u, 9u}) {
    const Tensor img = random_tensor({1, 21, 17}, rng);
    EXPECT_EQ(median_background(rot90(img), k), rot90(median_background(img, k)));
  }
}

TEST(SubtractBackground, ZeroWhenEqual) {
  std::mt19937_64 rng(2);
  ImageRecord image{"a", random_tensor({3, 8, 8}, rng), Mask(8, 8, 1)};
  const auto out = subtract_background(image, image.pixels);
  for (auto v : out.residual.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(out.fov_mask, image.fov_mask);
  EXPECT_THROW(subtract_background(image, Tensor({3, 8, 9})), Error);
}

TEST(SubtractBackground, ClampsToUnitRange) {
  ImageRecord image{"a", Tensor({1, 2, 2}, 1.0), Mask(2, 2, 1)};
  const auto out = subtract_background(image, Tensor({1, 2, 2}, -1.0));
  for (auto v : out.residual.data()) EXPECT_EQ(v, 1.0);
}

TEST(Preprocess, DarkBlobGivesNegativeResidual) {
  Tensor px({3, 60, 60}, 0.6);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 28; y <= 32; ++y)
      for (std::size_t x = 28; x <= 32; ++x) px(c, y, x) = 0.3;
  const auto out = preprocess({"b", px, Mask(60, 60, 1)}, 30);
  EXPECT_NEAR(out.residual(1, 30, 30), -0.3, 1e-12);
  EXPECT_EQ(out.residual(1, 5, 5), 0.0);
  EXPECT_EQ(out.residual(1, 30, 45), 0.0);
}

TEST(Preprocess, SecondPassIsStable) {
  Tensor px({3, 60, 60}, 0.5);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 10; y <= 12; ++y)
      for (std::size_t x = 40; x <= 42; ++x) px(c, y, x) = 0.2;
  const auto first = preprocess({"b", px, Mask(60, 60, 1)}, 30);
  const auto second = preprocess({"b", first.residual, first.fov_mask}, 30);
  for (std::size_t n = 0; n < first.residual.size(); ++n)
    EXPECT_NEAR(second.residual[n], first.residual[n], 1e-6);
}

}  // namespace
}  // namespace macnn
