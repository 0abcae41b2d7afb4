#pragma once

// Brute-force reference implementations used only by the tests. They work on
// plain vectors with straight scalar loops and share no code with the
// library's metric or flow kernels.

#include <cstddef>
#include <functional>
#include <vector>

namespace oracle {

struct Counts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Pixel-loop confusion counts; nonzero means foreground.
Counts seg_counts(const std::vector<double>& pred, const std::vector<double>& gt);

struct Depth {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0, delta1 = 0, delta2 = 0, delta3 = 0;
};

/// Scalar-loop depth metrics over pixels with valid[i] != 0 (all when empty).
Depth depth(const std::vector<double>& pred, const std::vector<double>& gt, const std::vector<unsigned char>& valid);

/// Central differences of f around x, one coordinate at a time.
std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                double eps = 1e-4);

/// Closed-form linear flow towards a fixed target: v(z_t, t) = (z_t - z0*) / t,
/// which equals eps - z0* everywhere on the straight path from z0* to eps.
struct LinearFlowStub {
  std::vector<double> target;
  std::vector<double> velocity(const std::vector<double>& z_t, double t) const;
};

}  // namespace oracle
