#include "densedit/task_codec.hpp"

#include <algorithm>
#include <cmath>

namespace densedit {

std::string to_string(LabelKind kind) {
  return kind == LabelKind::regression ? "regression" : "binary_mask";
}

LabelKind label_kind_from_string(const std::string& s) {
  if (s == "regression") return LabelKind::regression;
  if (s == "binary_mask") return LabelKind::binary_mask;
  throw Error("unknown label kind '" + s + "'");
}

void validate_range(const LabelRange& range) {
  if (!std::isfinite(range.r_min) || !std::isfinite(range.r_max)) throw Error("label range is not finite");
  if (range.r_min == range.r_max) throw Error("degenerate label range: r_min == r_max");
  if (range.r_min > range.r_max) throw Error("invalid label range: r_min > r_max");
}

DenseLabel make_regression_label(int height, int width, std::vector<double> data, LabelRange range) {
  validate_range(range);
  if (data.size() != static_cast<std::size_t>(height) * width) throw Error("regression label: size mismatch");
  for (double v : data) {
    if (!(v >= range.r_min && v <= range.r_max)) throw Error("regression label value outside its range");
  }
  return DenseLabel{LabelKind::regression, height, width, std::move(data), range};
}

DenseLabel make_mask_label(int height, int width, std::vector<double> data) {
  if (data.size() != static_cast<std::size_t>(height) * width) throw Error("mask label: size mismatch");
  for (double v : data) {
    if (v != 0.0 && v != 1.0) throw Error("mask label values must be 0 or 1");
  }
  return DenseLabel{LabelKind::binary_mask, height, width, std::move(data), std::nullopt};
}

ImageTensor normalize_regression(const DenseLabel& label) {
  if (label.kind != LabelKind::regression) throw Error("normalize_regression: label is not a regression map");
  if (!label.range) throw Error("normalize_regression: regression label without range");
  const LabelRange r = *label.range;
  validate_range(r);
  ImageTensor out(label.height, label.width);
  const double span = r.r_max - r.r_min;
  for (int y = 0; y < label.height; ++y) {
    for (int x = 0; x < label.width; ++x) {
      const double v = ((label.at(y, x) - r.r_min) / span - 0.5) * 2.0;
      for (int c = 0; c < ImageTensor::kChannels; ++c) out.at(y, x, c) = v;
    }
  }
  return out;
}

DenormalizeResult denormalize_regression(const ImageTensor& img, LabelRange range) {
  validate_range(range);
  DenormalizeResult res;
  res.label = DenseLabel{LabelKind::regression, img.height, img.width,
                         std::vector<double>(static_cast<std::size_t>(img.height) * img.width), range};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double v = img.channel_mean(y, x);
      if (v < -1.0 || v > 1.0 || std::isnan(v)) {
        ++res.clamped;
        v = std::isnan(v) ? 0.0 : std::clamp(v, -1.0, 1.0);
      }
      // lerp keeps both endpoints exact.
      res.label.at(y, x) = std::lerp(range.r_min, range.r_max, v * 0.5 + 0.5);
    }
  }
  return res;
}

ImageTensor mask_to_rgb(const DenseLabel& label) {
  if (label.kind != LabelKind::binary_mask) throw Error("mask_to_rgb: label is not a binary mask");
  ImageTensor out(label.height, label.width);
  for (int y = 0; y < label.height; ++y) {
    for (int x = 0; x < label.width; ++x) {
      const double v = label.at(y, x) != 0.0 ? 1.0 : -1.0;
      for (int c = 0; c < ImageTensor::kChannels; ++c) out.at(y, x, c) = v;
    }
  }
  return out;
}

DenseLabel binarize_prediction(const ImageTensor& img, double threshold) {
  DenseLabel out{LabelKind::binary_mask, img.height, img.width,
                 std::vector<double>(static_cast<std::size_t>(img.height) * img.width), std::nullopt};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) out.at(y, x) = img.channel_mean(y, x) > threshold ? 1.0 : 0.0;
  }
  return out;
}

ImageTensor standardize_label(const DenseLabel& label) {
  return label.kind == LabelKind::regression ? normalize_regression(label) : mask_to_rgb(label);
}

ImageTensor concat_width(const ImageTensor& left, const ImageTensor& right) {
  if (left.height != right.height) throw Error("concat_width: heights differ");
  ImageTensor out(left.height, left.width + right.width);
  for (int y = 0; y < left.height; ++y) {
    for (int c = 0; c < ImageTensor::kChannels; ++c) {
      for (int x = 0; x < left.width; ++x) out.at(y, x, c) = left.at(y, x, c);
      for (int x = 0; x < right.width; ++x) out.at(y, left.width + x, c) = right.at(y, x, c);
    }
  }
  return out;
}

DenseLabel resize_nearest(const DenseLabel& label, int height, int width) {
  if (label.height == height && label.width == width) return label;
  DenseLabel out = label;
  out.height = height;
  out.width = width;
  out.data.assign(static_cast<std::size_t>(height) * width, 0.0);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(label.height - 1, static_cast<int>((y + 0.5) * label.height / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(label.width - 1, static_cast<int>((x + 0.5) * label.width / width));
      out.at(y, x) = label.at(sy, sx);
    }
  }
  return out;
}

DenseLabel resize_bilinear(const DenseLabel& label, int height, int width) {
  if (label.height == height && label.width == width) return label;
  DenseLabel out = label;
  out.height = height;
  out.width = width;
  out.data.assign(static_cast<std::size_t>(height) * width, 0.0);
  const double sy_scale = static_cast<double>(label.height) / height;
  const double sx_scale = static_cast<double>(label.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy_scale - 0.5, 0.0, label.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, label.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx_scale - 0.5, 0.0, label.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, label.width - 1);
      const double wx = fx - x0;
      const double top = label.at(y0, x0) * (1 - wx) + label.at(y0, x1) * wx;
      const double bot = label.at(y1, x0) * (1 - wx) + label.at(y1, x1) * wx;
      out.at(y, x) = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

}  // namespace densedit
