#pragma once

// PNG persistence for query images and dense labels.
//
//   query images : 8-bit RGB
//   masks        : 8-bit single channel, 0 / 255
//   regression   : 16-bit single channel, [r_min, r_max] linear over [0, 65535]

#include <cstdint>
#include <filesystem>
#include <vector>

#include "densedit/task_codec.hpp"

namespace densedit::io {

struct RasterImage {
  int width = 0;
  int height = 0;
  int channels = 1;   // 1 (gray) or 3 (RGB)
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> samples;
};

RasterImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RasterImage& image);

ImageTensor load_rgb(const std::filesystem::path& path);
void save_rgb(const std::filesystem::path& path, const ImageTensor& img);

DenseLabel load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const DenseLabel& mask);

DenseLabel load_regression(const std::filesystem::path& path, LabelRange range);
void save_regression(const std::filesystem::path& path, const DenseLabel& label, LabelRange range);

/// Loads a label of the given kind; `range` is required for regression.
DenseLabel load_label(const std::filesystem::path& path, LabelKind kind, const std::optional<LabelRange>& range);
void save_label(const std::filesystem::path& path, const DenseLabel& label, const std::optional<LabelRange>& range);

}  // namespace densedit::io
