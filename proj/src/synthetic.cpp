#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <random>

#include "densedit/image_io.hpp"
#include "densedit/registry.hpp"

namespace densedit {
namespace {

constexpr int kSuper = 4;  // supersampling factor per axis for antialiasing

struct Shape {
  bool circle = true;
  double cx = 0, cy = 0, r = 0;          // circle
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // rectangle
  std::array<double, 3> color{};
  double depth = 0;

  bool contains(double x, double y) const {
    if (circle) return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
    return x >= x0 && x <= x1 && y >= y0 && y <= y1;
  }
  double bottom() const { return circle ? cy + r : y1; }
};

int horizon(int size) { return size / 4; }

std::string index_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%03d.png", prefix, i);
  return buf;
}

}  // namespace

double synthetic_ground_depth(int row, int image_size) {
  const int hy = horizon(image_size);
  if (row < hy) return kSyntheticDepthRange.r_max;
  const double near = 2.0;
  const double u = static_cast<double>(row - hy) / static_cast<double>(image_size - 1 - hy);
  return kSyntheticDepthRange.r_max - (kSyntheticDepthRange.r_max - near) * u;
}

Registry generate_synthetic_suite(std::uint64_t seed, const std::filesystem::path& out_dir,
                                  const SyntheticOptions& options) {
  const int size = options.image_size;
  if (size < 16) throw Error("synthetic suite: image size must be at least 16");
  if (options.samples_per_task < 2) throw Error("synthetic suite: need at least two samples per task");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  TaskSpec depth_task{"shapes-depth", Category::adverse_env, LabelKind::regression, "depth map",
                      "synthetic shapes scene", Dai::no, kSyntheticDepthRange, {}};
  TaskSpec mask_task{"shapes-mask", Category::smart_city, LabelKind::binary_mask, "segmentation mask",
                     "synthetic shapes scene", Dai::yes, std::nullopt, {}};

  const int hy = horizon(size);
  for (int n = 0; n < options.samples_per_task; ++n) {
    // Scene palette.
    const std::array<double, 3> ground{uniform(-0.9, -0.6), uniform(-0.9, -0.6), uniform(-0.95, -0.7)};
    const std::array<double, 3> sky{uniform(-0.8, -0.6), uniform(-0.75, -0.5), uniform(-0.6, -0.3)};

    std::vector<Shape> shapes(static_cast<std::size_t>(2 + rng() % 3));
    for (Shape& s : shapes) {
      s.circle = unit(rng) < 0.5;
      if (s.circle) {
        s.r = uniform(0.12, 0.25) * size;
        s.cx = uniform(s.r, size - s.r);
        s.cy = uniform(std::max(s.r, hy + 2.0 - s.r), size - s.r - 0.5);
      } else {
        const double w = uniform(0.18, 0.45) * size, h = uniform(0.18, 0.45) * size;
        s.x0 = uniform(0.0, size - w);
        s.y1 = uniform(std::max(h, hy + 2.0), size - 0.5);
        s.x1 = s.x0 + w;
        s.y0 = s.y1 - h;
      }
      const int bright = static_cast<int>(rng() % 3);
      for (int c = 0; c < 3; ++c) s.color[c] = c == bright ? uniform(0.6, 1.0) : uniform(0.05, 0.9);
      // Strictly nearer than the ground anywhere the shape can touch.
      const int bottom_row = std::min(size - 1, static_cast<int>(std::floor(s.bottom())));
      s.depth = synthetic_ground_depth(bottom_row, size) - 0.5;
    }
    // Painter's order: far to near.
    std::stable_sort(shapes.begin(), shapes.end(), [](const Shape& a, const Shape& b) { return a.depth > b.depth; });

    ImageTensor img(size, size);
    std::vector<double> depth(static_cast<std::size_t>(size) * size);
    std::vector<double> mask(depth.size());
    for (int y = 0; y < size; ++y) {
      const std::array<double, 3>& bg = y < hy ? sky : ground;
      const double shade = y < hy ? 0.0 : 0.15 * (y - hy) / static_cast<double>(size - hy);
      for (int x = 0; x < size; ++x) {
        std::array<double, 3> color{bg[0] + shade, bg[1] + shade, bg[2] + shade};
        int union_hits = 0;
        double nearest = synthetic_ground_depth(y, size);
        std::vector<int> hits(shapes.size(), 0);
        for (int sy = 0; sy < kSuper; ++sy) {
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = x + (sx + 0.5) / kSuper, py = y + (sy + 0.5) / kSuper;
            bool any = false;
            for (std::size_t k = 0; k < shapes.size(); ++k) {
              if (shapes[k].contains(px, py)) {
                ++hits[k];
                any = true;
              }
            }
            union_hits += any;
          }
        }
        for (std::size_t k = 0; k < shapes.size(); ++k) {
          const double cov = hits[k] / static_cast<double>(kSuper * kSuper);
          for (int c = 0; c < 3; ++c) color[c] = color[c] * (1.0 - cov) + shapes[k].color[c] * cov;
          if (hits[k] > 0) nearest = std::min(nearest, shapes[k].depth);
        }
        const bool fg = 2 * union_hits >= kSuper * kSuper;
        const std::size_t i = static_cast<std::size_t>(y) * size + x;
        mask[i] = fg ? 1.0 : 0.0;
        depth[i] = fg ? nearest : synthetic_ground_depth(y, size);
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(color[c] + uniform(-0.03, 0.03), -1.0, 1.0);
      }
    }

    const std::string query_rel = "queries/" + index_name("scene", n);
    const std::string depth_rel = "shapes-depth/" + index_name("depth", n);
    const std::string mask_rel = "shapes-mask/" + index_name("mask", n);
    io::save_rgb(out_dir / query_rel, img);
    const DenseLabel depth_label = make_regression_label(size, size, std::move(depth), kSyntheticDepthRange);
    io::save_regression(out_dir / depth_rel, depth_label, kSyntheticDepthRange);
    io::save_mask(out_dir / mask_rel, make_mask_label(size, size, std::move(mask)));
    depth_task.samples.push_back({query_rel, depth_rel, kSyntheticDepthRange});
    mask_task.samples.push_back({query_rel, mask_rel, std::nullopt});
  }

  save_manifest(out_dir / "manifest.json", {depth_task, mask_task});
  return load_manifest(out_dir / "manifest.json");
}

}  // namespace densedit
