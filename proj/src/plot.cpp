#include "densedit/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "densedit/image_io.hpp"
#include "densedit/matrix.hpp"

namespace densedit {
namespace {

using Rgb = std::array<std::uint16_t, 3>;

constexpr std::array<Rgb, 6> kPalette{{
    {31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {23, 190, 207}}};

struct Canvas {
  io::RasterImage img;

  void set(int x, int y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    const std::size_t i = (static_cast<std::size_t>(y) * img.width + x) * 3;
    std::copy(c.begin(), c.end(), img.samples.begin() + static_cast<std::ptrdiff_t>(i));
  }

  void line(int x0, int y0, int x1, int y1, const Rgb& c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      set(x0, y0 + 1, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
};

}  // namespace

void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, int width,
                     int height) {
  if (width < 64 || height < 64) throw Error("plot: canvas too small");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const PlotSeries& s : series) {
    if (s.x.size() != s.y.size()) throw Error("plot: series '" + s.name + "' has mismatched x/y lengths");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  Canvas cv{io::RasterImage{width, height, 3, 8, std::vector<std::uint16_t>(static_cast<std::size_t>(width) * height * 3, 255)}};
  const int left = 48, right = width - 16, top = 16, bottom = height - 40;
  const Rgb axis{0, 0, 0}, grid{225, 225, 225};
  for (int k = 0; k <= 4; ++k) {
    const int gx = left + (right - left) * k / 4;
    const int gy = bottom - (bottom - top) * k / 4;
    cv.line(gx, top, gx, bottom, grid);
    cv.line(left, gy, right, gy, grid);
    cv.line(gx, bottom, gx, bottom + 5, axis);
    cv.line(left - 5, gy, left, gy, axis);
  }
  cv.line(left, bottom, right, bottom, axis);
  cv.line(left, top, left, bottom, axis);

  const auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left))); };
  const auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top))); };
  for (std::size_t si = 0; si < series.size(); ++si) {
    const PlotSeries& s = series[si];
    const Rgb& c = kPalette[si % kPalette.size()];
    bool have_prev = false;
    int x0 = 0, y0 = 0;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        have_prev = false;
        continue;
      }
      const int x1 = px(s.x[i]), y1 = py(s.y[i]);
      if (have_prev) {
        cv.line(x0, y0, x1, y1, c);
      } else {
        cv.set(x1, y1, c);
      }
      x0 = x1;
      y0 = y1;
      have_prev = true;
    }
    // Legend swatch.
    const int ly = top + 4 + static_cast<int>(si) * 8;
    for (int k = 0; k < 20; ++k) cv.line(right - 24 + k, ly, right - 24 + k, ly + 3, c);
  }
  io::write_png(path, cv.img);
}

}  // namespace densedit
