#pragma once

// Dense kernels behind the transformer and the metric reductions.
//
// The top-level functions are OpenMP-parallel over output rows (or columns,
// for transposed products). Every output element is produced by exactly one
// thread with a fixed summation order, so results are bit-identical for any
// thread count. `serial::` holds straight-loop reference versions used by the
// tests and the benchmark.

#include <span>
#include <vector>

#include "densedit/matrix.hpp"

namespace densedit::kernels {

/// c = a * b (or c += a * b). a: n x k, b: k x m.
void matmul(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
/// c = a * b^T. a: n x k, b: m x k.
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
/// c = a^T * b. a: n x k, b: n x m, c: k x m.
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);

void add_row_vector(Matrix& y, std::span<const double> v);
/// out[j] += sum_i m(i, j)
void accumulate_column_sums(const Matrix& m, std::span<double> out);

/// Row-wise layer norm without affine parameters. Fills `inv_std` per row.
void layer_norm(const Matrix& x, Matrix& normed, std::vector<double>& inv_std, double eps = 1e-6);
/// dx = d(layer_norm)/dx applied to dnormed.
void layer_norm_backward(const Matrix& normed, std::span<const double> inv_std, const Matrix& dnormed,
                         Matrix& dx);

/// Multi-head scaled dot-product attention with no masking. q, k, v: n x d,
/// split into `heads` contiguous column groups. `probs` receives one n x n
/// softmax matrix per head when non-null.
void attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads, Matrix& out,
               std::vector<Matrix>* probs);
void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<Matrix>& probs,
                        int heads, const Matrix& dout, Matrix& dq, Matrix& dk, Matrix& dv);

/// Deterministic sum: fixed-size chunks summed in parallel, partials combined
/// serially.
double sum(std::span<const double> x);

namespace serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);
void layer_norm(const Matrix& x, Matrix& normed, std::vector<double>& inv_std, double eps = 1e-6);
void layer_norm_backward(const Matrix& normed, std::span<const double> inv_std, const Matrix& dnormed,
                         Matrix& dx);
void attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads, Matrix& out,
               std::vector<Matrix>* probs);
void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<Matrix>& probs,
                        int heads, const Matrix& dout, Matrix& dq, Matrix& dk, Matrix& dv);
double sum(std::span<const double> x);

}  // namespace serial
}  // namespace densedit::kernels
