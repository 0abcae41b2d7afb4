#pragma once

// Standardized RGB representation of dense labels.
//
// Every label, whatever its native form, is carried as a 3-channel tensor in
// [-1, +1]: regression maps through the min/max normalization, binary masks
// as +1 (foreground) / -1 (background). Single-channel data is replicated to
// three identical channels.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "densedit/matrix.hpp"

namespace densedit {

enum class LabelKind { regression, binary_mask };

std::string to_string(LabelKind kind);
LabelKind label_kind_from_string(const std::string& s);

struct LabelRange {
  double r_min = 0.0;
  double r_max = 1.0;
  bool operator==(const LabelRange&) const = default;
};

/// H x W x 3 tensor, interleaved (HWC), values in [-1, +1].
struct ImageTensor {
  static constexpr int kChannels = 3;

  int height = 0;
  int width = 0;
  std::vector<double> values;

  ImageTensor() = default;
  ImageTensor(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w * kChannels, fill) {}

  double& at(int y, int x, int c) { return values[(static_cast<std::size_t>(y) * width + x) * kChannels + c]; }
  double at(int y, int x, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
  }
  double channel_mean(int y, int x) const { return (at(y, x, 0) + at(y, x, 1) + at(y, x, 2)) / 3.0; }

  bool operator==(const ImageTensor&) const = default;
};

/// H x W dense label. Regression data is in raw units and carries its range;
/// mask data holds 0.0 / 1.0.
struct DenseLabel {
  LabelKind kind = LabelKind::binary_mask;
  int height = 0;
  int width = 0;
  std::vector<double> data;
  std::optional<LabelRange> range;

  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const DenseLabel&) const = default;
};

/// Validated constructors; throw Error on invariant violations.
DenseLabel make_regression_label(int height, int width, std::vector<double> data, LabelRange range);
DenseLabel make_mask_label(int height, int width, std::vector<double> data);

void validate_range(const LabelRange& range);

ImageTensor normalize_regression(const DenseLabel& label);

struct DenormalizeResult {
  DenseLabel label;
  std::size_t clamped = 0;
};

/// Inverse of normalize_regression. Channels are collapsed by mean; values
/// outside [-1, +1] are clamped and counted.
DenormalizeResult denormalize_regression(const ImageTensor& img, LabelRange range);

ImageTensor mask_to_rgb(const DenseLabel& label);

/// Foreground iff channel mean > threshold.
DenseLabel binarize_prediction(const ImageTensor& img, double threshold = 0.0);

/// Dispatches to normalize_regression or mask_to_rgb.
ImageTensor standardize_label(const DenseLabel& label);

/// Width-wise concatenation [left; right]. Heights must match.
ImageTensor concat_width(const ImageTensor& left, const ImageTensor& right);

/// Nearest-neighbour resize (masks) and bilinear resize (regression).
DenseLabel resize_nearest(const DenseLabel& label, int height, int width);
DenseLabel resize_bilinear(const DenseLabel& label, int height, int width);

}  // namespace densedit
