#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "densedit/image_io.hpp"
#include "test_util.hpp"

namespace densedit::io {
namespace {

TEST(ImageIo, RgbRoundTripWithinQuantization) {
  const auto dir = test::scratch_dir("io_rgb");
  ImageTensor img(3, 4);
  for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = -1.0 + 2.0 * (i % 7) / 6.0;
  save_rgb(dir / "a.png", img);
  const ImageTensor back = load_rgb(dir / "a.png");
  ASSERT_EQ(back.height, 3);
  ASSERT_EQ(back.width, 4);
  for (std::size_t i = 0; i < img.values.size(); ++i) EXPECT_NEAR(back.values[i], img.values[i], 1.0 / 255);
  EXPECT_EQ(back.values.front(), -1.0);
}

TEST(ImageIo, MaskIsEightBitBinary) {
  const auto dir = test::scratch_dir("io_mask");
  const DenseLabel m = make_mask_label(2, 3, {1, 0, 1, 0, 0, 1});
  save_mask(dir / "m.png", m);
  const RasterImage raw = read_png(dir / "m.png");
  EXPECT_EQ(raw.channels, 1);
  EXPECT_EQ(raw.bit_depth, 8);
  EXPECT_EQ(raw.samples, (std::vector<std::uint16_t>{255, 0, 255, 0, 0, 255}));
  EXPECT_EQ(load_mask(dir / "m.png"), m);
}

TEST(ImageIo, RegressionIsSixteenBitLinear) {
  const auto dir = test::scratch_dir("io_reg");
  const LabelRange range{1.0, 20.0};
  const DenseLabel r = make_regression_label(1, 3, {1.0, 10.5, 20.0}, range);
  save_regression(dir / "r.png", r, range);
  const RasterImage raw = read_png(dir / "r.png");
  EXPECT_EQ(raw.bit_depth, 16);
  EXPECT_EQ(raw.samples.front(), 0);
  EXPECT_EQ(raw.samples.back(), 65535);
  const DenseLabel back = load_regression(dir / "r.png", range);
  EXPECT_EQ(back.data.front(), 1.0);
  EXPECT_EQ(back.data.back(), 20.0);
  EXPECT_NEAR(back.data[1], 10.5, 19.0 / 65535);
}

TEST(ImageIo, MissingOrCorruptFileIsError) {
  const auto dir = test::scratch_dir("io_bad");
  EXPECT_THROW(load_rgb(dir / "nope.png"), Error);
  std::ofstream(dir / "bad.png") << "not a png";
  EXPECT_THROW(load_rgb(dir / "bad.png"), Error);
}

TEST(ImageIo, LoadLabelNeedsRangeForRegression) {
  const auto dir = test::scratch_dir("io_label");
  save_mask(dir / "m.png", make_mask_label(1, 1, {1}));
  EXPECT_THROW(load_label(dir / "m.png", LabelKind::regression, std::nullopt), Error);
}

}  // namespace
}  // namespace densedit::io
