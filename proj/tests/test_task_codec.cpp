#include <gtest/gtest.h>

#include <random>

#include "densedit/task_codec.hpp"

namespace densedit {
namespace {

DenseLabel reg(std::vector<double> v, double lo, double hi) {
  const int n = static_cast<int>(v.size());
  return make_regression_label(1, n, std::move(v), {lo, hi});
}

TEST(Normalize, EndpointsAndHandValues) {
  const ImageTensor img = normalize_regression(reg({0, 5, 10}, 0, 10));
  EXPECT_EQ(img.at(0, 0, 0), -1.0);
  EXPECT_EQ(img.at(0, 1, 0), 0.0);
  EXPECT_EQ(img.at(0, 2, 0), 1.0);
  EXPECT_DOUBLE_EQ(normalize_regression(reg({3}, 2, 6)).at(0, 0, 0), -0.5);
}

TEST(Normalize, ChannelsIdentical) {
  const ImageTensor img = normalize_regression(reg({2.5, 3.7, 5.9}, 2, 6));
  for (int x = 0; x < 3; ++x) {
    EXPECT_EQ(img.at(0, x, 0), img.at(0, x, 1));
    EXPECT_EQ(img.at(0, x, 0), img.at(0, x, 2));
  }
}

TEST(Normalize, StrictlyIncreasing) {
  std::vector<double> v;
  for (int i = 0; i <= 100; ++i) v.push_back(1.0 + 0.19 * i);
  const ImageTensor img = normalize_regression(reg(v, 1, 20));
  for (int x = 1; x <= 100; ++x) EXPECT_LT(img.at(0, x - 1, 0), img.at(0, x, 0));
}

TEST(Normalize, DegenerateRangeIsError) {
  EXPECT_THROW(validate_range({3, 3}), Error);
  EXPECT_THROW(make_regression_label(1, 1, {3}, {3, 3}), Error);
  EXPECT_THROW(make_regression_label(1, 1, {7}, {0, 5}), Error);
  EXPECT_THROW(make_mask_label(1, 2, {0, 0.5}), Error);
}

TEST(Denormalize, EndpointsAndInverse) {
  ImageTensor img(1, 3);
  for (int c = 0; c < 3; ++c) {
    img.at(0, 0, c) = -1;
    img.at(0, 1, c) = 1;
    img.at(0, 2, c) = -0.5;
  }
  const DenormalizeResult r = denormalize_regression(img, {2, 6});
  EXPECT_EQ(r.label.at(0, 0), 2.0);
  EXPECT_EQ(r.label.at(0, 1), 6.0);
  EXPECT_DOUBLE_EQ(r.label.at(0, 2), 3.0);
  EXPECT_EQ(r.clamped, 0u);
}

TEST(Denormalize, ClampsAndCounts) {
  ImageTensor img(1, 2);
  for (int c = 0; c < 3; ++c) {
    img.at(0, 0, c) = 1.5;
    img.at(0, 1, c) = 0.0;
  }
  const DenormalizeResult r = denormalize_regression(img, {0, 10});
  EXPECT_EQ(r.label.at(0, 0), 10.0);
  EXPECT_EQ(r.label.at(0, 1), 5.0);
  EXPECT_EQ(r.clamped, 1u);
}

TEST(Denormalize, RandomRoundTrip) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const double lo = -50 + 100 * u(rng), hi = lo + 0.1 + 200 * u(rng);
    std::vector<double> v(64);
    for (double& x : v) x = lo + (hi - lo) * u(rng);
    const DenseLabel label = make_regression_label(8, 8, v, {lo, hi});
    const DenseLabel back = denormalize_regression(normalize_regression(label), {lo, hi}).label;
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(back.data[i], v[i], 1e-6);
  }
}

TEST(Mask, ToRgb) {
  const DenseLabel m = make_mask_label(2, 2, {1, 0, 0, 1});
  const ImageTensor img = mask_to_rgb(m);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(img.at(0, 0, c), 1.0);
    EXPECT_EQ(img.at(0, 1, c), -1.0);
    EXPECT_EQ(img.at(1, 0, c), -1.0);
    EXPECT_EQ(img.at(1, 1, c), 1.0);
  }
  EXPECT_EQ(mask_to_rgb(make_mask_label(2, 2, {0, 0, 0, 0})), ImageTensor(2, 2, -1.0));
  EXPECT_EQ(mask_to_rgb(make_mask_label(2, 2, {1, 1, 1, 1})), ImageTensor(2, 2, 1.0));
}

TEST(Mask, BinarizeRules) {
  const ImageTensor flat(2, 2, 0.2);
  EXPECT_EQ(binarize_prediction(flat, 0.0).data, std::vector<double>(4, 1.0));
  EXPECT_EQ(binarize_prediction(flat, 0.5).data, std::vector<double>(4, 0.0));
}

TEST(Mask, BinarizeInvertsToRgbForAnyThreshold) {
  const DenseLabel m = make_mask_label(2, 3, {1, 0, 1, 0, 0, 1});
  for (double th : {-0.99, -0.5, 0.0, 0.3, 0.99}) EXPECT_EQ(binarize_prediction(mask_to_rgb(m), th), m);
}

TEST(Standardize, DispatchesOnKind) {
  const DenseLabel m = make_mask_label(1, 2, {1, 0});
  EXPECT_EQ(standardize_label(m), mask_to_rgb(m));
  const DenseLabel r = reg({1, 3}, 0, 4);
  EXPECT_EQ(standardize_label(r), normalize_regression(r));
}

TEST(Concat, WidthWise) {
  const ImageTensor a(2, 3, 0.5), b(2, 1, -0.5);
  const ImageTensor c = concat_width(a, b);
  EXPECT_EQ(c.height, 2);
  EXPECT_EQ(c.width, 4);
  EXPECT_EQ(c.at(1, 2, 1), 0.5);
  EXPECT_EQ(c.at(1, 3, 1), -0.5);
  EXPECT_THROW(concat_width(a, ImageTensor(3, 1)), Error);
}

TEST(Resize, NearestAndBilinear) {
  const DenseLabel m = make_mask_label(2, 2, {1, 0, 0, 1});
  const DenseLabel up = resize_nearest(m, 4, 4);
  EXPECT_EQ(up.at(0, 0), 1.0);
  EXPECT_EQ(up.at(0, 3), 0.0);
  EXPECT_EQ(up.at(3, 3), 1.0);

  const DenseLabel r = make_regression_label(1, 2, {0, 4}, {0, 4});
  const DenseLabel same = resize_bilinear(r, 1, 2);
  EXPECT_EQ(same.data, r.data);
  const DenseLabel wide = resize_bilinear(r, 1, 4);
  for (std::size_t i = 1; i < wide.data.size(); ++i) EXPECT_LE(wide.data[i - 1], wide.data[i]);
  EXPECT_EQ(wide.range, r.range);
}

}  // namespace
}  // namespace densedit
