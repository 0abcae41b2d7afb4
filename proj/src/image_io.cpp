#include "densedit/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>

namespace densedit::io {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error("cannot open '" + path.string() + "'");
  return f;
}

std::uint16_t to_u8(double v) {
  return static_cast<std::uint16_t>(std::clamp(std::lround((v + 1.0) * 127.5), 0L, 255L));
}

}  // namespace

RasterImage read_png(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw Error("'" + path.string() + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("png_create_info_struct failed");
  }
  RasterImage img;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("failed to decode PNG '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.bit_depth = png_get_bit_depth(png, info) == 16 ? 16 : 8;
  img.channels = png_get_channels(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * img.height);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (img.channels != 1 && img.channels != 3) throw Error("unsupported PNG channel count in '" + path.string() + "'");
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(n);
  if (img.bit_depth == 16) {
    for (std::size_t i = 0; i < n; ++i) {
      img.samples[i] = static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) img.samples[i] = buffer[i];
  }
  return img;
}

void write_png(const std::filesystem::path& path, const RasterImage& image) {
  if (image.channels != 1 && image.channels != 3) throw Error("write_png: channels must be 1 or 3");
  if (image.bit_depth != 8 && image.bit_depth != 16) throw Error("write_png: bit depth must be 8 or 16");
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height * image.channels;
  if (image.samples.size() != n) throw Error("write_png: sample count mismatch");

  const int bytes = image.bit_depth / 8;
  std::vector<png_byte> buffer(n * bytes);
  for (std::size_t i = 0; i < n; ++i) {
    if (bytes == 2) {
      buffer[2 * i] = static_cast<png_byte>(image.samples[i] >> 8);
      buffer[2 * i + 1] = static_cast<png_byte>(image.samples[i] & 0xff);
    } else {
      buffer[i] = static_cast<png_byte>(image.samples[i]);
    }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed to encode PNG '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, image.width, image.height, image.bit_depth,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t rowbytes = static_cast<std::size_t>(image.width) * image.channels * bytes;
  for (int y = 0; y < image.height; ++y) png_write_row(png, buffer.data() + y * rowbytes);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageTensor load_rgb(const std::filesystem::path& path) {
  const RasterImage r = read_png(path);
  const double scale = r.bit_depth == 16 ? 65535.0 : 255.0;
  ImageTensor img(r.height, r.width);
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * r.width + x) * r.channels;
      for (int c = 0; c < ImageTensor::kChannels; ++c) {
        const double v = r.samples[base + (r.channels == 3 ? c : 0)];
        img.at(y, x, c) = v / scale * 2.0 - 1.0;
      }
    }
  }
  return img;
}

void save_rgb(const std::filesystem::path& path, const ImageTensor& img) {
  RasterImage r{img.width, img.height, 3, 8, {}};
  r.samples.resize(img.values.size());
  for (std::size_t i = 0; i < img.values.size(); ++i) r.samples[i] = to_u8(img.values[i]);
  write_png(path, r);
}

DenseLabel load_mask(const std::filesystem::path& path) {
  const RasterImage r = read_png(path);
  const double half = r.bit_depth == 16 ? 32767.5 : 127.5;
  std::vector<double> data(static_cast<std::size_t>(r.width) * r.height);
  for (std::size_t i = 0; i < data.size(); ++i) {
    double v = 0.0;
    for (int c = 0; c < r.channels; ++c) v += r.samples[i * r.channels + c];
    data[i] = v / r.channels > half ? 1.0 : 0.0;
  }
  return make_mask_label(r.height, r.width, std::move(data));
}

void save_mask(const std::filesystem::path& path, const DenseLabel& mask) {
  if (mask.kind != LabelKind::binary_mask) throw Error("save_mask: label is not a mask");
  RasterImage r{mask.width, mask.height, 1, 8, {}};
  r.samples.resize(mask.data.size());
  for (std::size_t i = 0; i < mask.data.size(); ++i) r.samples[i] = mask.data[i] != 0.0 ? 255 : 0;
  write_png(path, r);
}

DenseLabel load_regression(const std::filesystem::path& path, LabelRange range) {
  validate_range(range);
  const RasterImage r = read_png(path);
  const double scale = r.bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<double> data(static_cast<std::size_t>(r.width) * r.height);
  for (std::size_t i = 0; i < data.size(); ++i) {
    double v = 0.0;
    for (int c = 0; c < r.channels; ++c) v += r.samples[i * r.channels + c];
    data[i] = std::lerp(range.r_min, range.r_max, v / r.channels / scale);
  }
  return make_regression_label(r.height, r.width, std::move(data), range);
}

void save_regression(const std::filesystem::path& path, const DenseLabel& label, LabelRange range) {
  if (label.kind != LabelKind::regression) throw Error("save_regression: label is not a regression map");
  validate_range(range);
  RasterImage r{label.width, label.height, 1, 16, {}};
  r.samples.resize(label.data.size());
  const double span = range.r_max - range.r_min;
  for (std::size_t i = 0; i < label.data.size(); ++i) {
    const double u = std::clamp((label.data[i] - range.r_min) / span, 0.0, 1.0);
    r.samples[i] = static_cast<std::uint16_t>(std::lround(u * 65535.0));
  }
  write_png(path, r);
}

DenseLabel load_label(const std::filesystem::path& path, LabelKind kind, const std::optional<LabelRange>& range) {
  if (kind == LabelKind::binary_mask) return load_mask(path);
  if (!range) throw Error("regression label '" + path.string() + "' needs a range");
  return load_regression(path, *range);
}

void save_label(const std::filesystem::path& path, const DenseLabel& label, const std::optional<LabelRange>& range) {
  if (label.kind == LabelKind::binary_mask) {
    save_mask(path, label);
    return;
  }
  const auto r = range ? range : label.range;
  if (!r) throw Error("save_label: regression label without range");
  save_regression(path, label, *r);
}

}  // namespace densedit::io
