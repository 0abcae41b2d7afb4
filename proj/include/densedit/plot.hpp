#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace densedit {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Line chart as an RGB PNG: white canvas, axes with five ticks each, one
/// color per series. Axis ranges cover all finite points.
void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, int width = 640,
                     int height = 400);

}  // namespace densedit
