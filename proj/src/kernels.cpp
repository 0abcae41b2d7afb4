#include "densedit/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace densedit::kernels {
namespace {

void prepare_output(Matrix& c, std::size_t rows, std::size_t cols, bool accumulate, const char* what) {
  if (accumulate) {
    require_shape(c, rows, cols, what);
  } else if (c.rows != rows || c.cols != cols) {
    c = Matrix(rows, cols);
  } else {
    c.fill(0.0);
  }
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  }
  return t;
}

void check_heads(const Matrix& q, const Matrix& k, const Matrix& v, int heads) {
  if (heads <= 0 || q.cols % static_cast<std::size_t>(heads) != 0) {
    throw Error("attention: model width " + std::to_string(q.cols) + " not divisible by heads");
  }
  if (!q.same_shape(k) || !q.same_shape(v)) throw Error("attention: q/k/v shape mismatch");
}

constexpr std::size_t kSumChunk = 1024;

}  // namespace

void matmul(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols != b.rows) throw Error("matmul: inner dimension mismatch");
  prepare_output(c, a.rows, b.cols, accumulate, "matmul");
  const std::size_t n = a.rows, kk = a.cols, m = b.cols;
  const double* __restrict ap = a.data.data();
  const double* __restrict bp = b.data.data();
  double* __restrict cp = c.data.data();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict crow = cp + i * m;
    for (std::size_t p = 0; p < kk; ++p) {
      const double s = ap[i * kk + p];
      const double* __restrict brow = bp + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += s * brow[j];
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols != b.cols) throw Error("matmul_nt: inner dimension mismatch");
  matmul(a, transpose(b), c, accumulate);
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.rows != b.rows) throw Error("matmul_tn: inner dimension mismatch");
  prepare_output(c, a.cols, b.cols, accumulate, "matmul_tn");
  const std::size_t n = a.rows, kk = a.cols, m = b.cols;
  const double* __restrict ap = a.data.data();
  const double* __restrict bp = b.data.data();
  double* __restrict cp = c.data.data();
#pragma omp parallel for schedule(static)
  for (std::size_t p = 0; p < kk; ++p) {
    double* __restrict crow = cp + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = ap[i * kk + p];
      if (s == 0.0) continue;
      const double* __restrict brow = bp + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += s * brow[j];
    }
  }
}

void add_row_vector(Matrix& y, std::span<const double> v) {
  if (v.size() != y.cols) throw Error("add_row_vector: width mismatch");
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < y.rows; ++i) {
    double* row = y.data.data() + i * y.cols;
    for (std::size_t j = 0; j < y.cols; ++j) row[j] += v[j];
  }
}

void accumulate_column_sums(const Matrix& m, std::span<double> out) {
  if (out.size() != m.cols) throw Error("accumulate_column_sums: width mismatch");
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* row = m.data.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) out[j] += row[j];
  }
}

void layer_norm(const Matrix& x, Matrix& normed, std::vector<double>& inv_std, double eps) {
  if (!normed.same_shape(x)) normed = Matrix(x.rows, x.cols);
  inv_std.assign(x.rows, 0.0);
  const double inv_d = 1.0 / static_cast<double>(x.cols);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.data.data() + i * x.cols;
    double* nr = normed.data.data() + i * x.cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += xr[j];
    mean *= inv_d;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var *= inv_d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < x.cols; ++j) nr[j] = (xr[j] - mean) * is;
  }
}

void layer_norm_backward(const Matrix& normed, std::span<const double> inv_std, const Matrix& dnormed,
                         Matrix& dx) {
  if (!dnormed.same_shape(normed)) throw Error("layer_norm_backward: shape mismatch");
  if (!dx.same_shape(normed)) dx = Matrix(normed.rows, normed.cols);
  const double inv_d = 1.0 / static_cast<double>(normed.cols);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < normed.rows; ++i) {
    const double* nr = normed.data.data() + i * normed.cols;
    const double* gr = dnormed.data.data() + i * normed.cols;
    double* dr = dx.data.data() + i * normed.cols;
    double mean_g = 0.0, mean_gn = 0.0;
    for (std::size_t j = 0; j < normed.cols; ++j) {
      mean_g += gr[j];
      mean_gn += gr[j] * nr[j];
    }
    mean_g *= inv_d;
    mean_gn *= inv_d;
    for (std::size_t j = 0; j < normed.cols; ++j) dr[j] = inv_std[i] * (gr[j] - mean_g - nr[j] * mean_gn);
  }
}

void attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads, Matrix& out,
               std::vector<Matrix>* probs) {
  check_heads(q, k, v, heads);
  const std::size_t n = q.rows, d = q.cols, hd = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (!out.same_shape(q)) out = Matrix(n, d);
  out.fill(0.0);

  // Per-head transposed keys so the score row is a contiguous axpy.
  std::vector<Matrix> kt(static_cast<std::size_t>(heads), Matrix(hd, n));
  std::vector<Matrix> local;
  std::vector<Matrix>& p = probs ? *probs : local;
  p.assign(static_cast<std::size_t>(heads), Matrix(n, n));
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * hd;
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t t = 0; t < hd; ++t) kt[h](t, j) = k(j, off + t);
    }
  }

  const long total = static_cast<long>(heads) * static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long idx = 0; idx < total; ++idx) {
    const std::size_t h = static_cast<std::size_t>(idx) / n;
    const std::size_t i = static_cast<std::size_t>(idx) % n;
    const std::size_t off = h * hd;
    double* __restrict srow = p[h].data.data() + i * n;
    for (std::size_t t = 0; t < hd; ++t) {
      const double qs = q(i, off + t) * scale;
      const double* __restrict krow = kt[h].data.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) srow[j] += qs * krow[j];
    }
    double mx = srow[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, srow[j]);
    double total_exp = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      srow[j] = std::exp(srow[j] - mx);
      total_exp += srow[j];
    }
    const double inv = 1.0 / total_exp;
    for (std::size_t j = 0; j < n; ++j) srow[j] *= inv;
    double* __restrict orow = out.data.data() + i * d + off;
    for (std::size_t j = 0; j < n; ++j) {
      const double pj = srow[j];
      const double* __restrict vrow = v.data.data() + j * d + off;
      for (std::size_t t = 0; t < hd; ++t) orow[t] += pj * vrow[t];
    }
  }
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<Matrix>& probs,
                        int heads, const Matrix& dout, Matrix& dq, Matrix& dk, Matrix& dv) {
  check_heads(q, k, v, heads);
  const std::size_t n = q.rows, d = q.cols, hd = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (probs.size() != static_cast<std::size_t>(heads)) throw Error("attention_backward: missing probabilities");
  for (Matrix* m : {&dq, &dk, &dv}) {
    if (!m->same_shape(q)) *m = Matrix(n, d);
    m->fill(0.0);
  }

  std::vector<Matrix> vt(static_cast<std::size_t>(heads), Matrix(hd, n));
  std::vector<Matrix> ds(static_cast<std::size_t>(heads), Matrix(n, n));
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * hd;
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t t = 0; t < hd; ++t) vt[h](t, j) = v(j, off + t);
    }
  }

  const long total = static_cast<long>(heads) * static_cast<long>(n);
  // Row pass: dS and dQ.
#pragma omp parallel for schedule(static)
  for (long idx = 0; idx < total; ++idx) {
    const std::size_t h = static_cast<std::size_t>(idx) / n;
    const std::size_t i = static_cast<std::size_t>(idx) % n;
    const std::size_t off = h * hd;
    const double* __restrict prow = probs[h].data.data() + i * n;
    double* __restrict drow = ds[h].data.data() + i * n;
    for (std::size_t t = 0; t < hd; ++t) {
      const double g = dout(i, off + t);
      const double* __restrict vrow = vt[h].data.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) drow[j] += g * vrow[j];
    }
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += prow[j] * drow[j];
    for (std::size_t j = 0; j < n; ++j) drow[j] = prow[j] * (drow[j] - dot) * scale;
    double* __restrict qrow = dq.data.data() + i * d + off;
    for (std::size_t j = 0; j < n; ++j) {
      const double s = drow[j];
      const double* __restrict krow = k.data.data() + j * d + off;
      for (std::size_t t = 0; t < hd; ++t) qrow[t] += s * krow[t];
    }
  }
  // Column pass: dK and dV.
#pragma omp parallel for schedule(static)
  for (long idx = 0; idx < total; ++idx) {
    const std::size_t h = static_cast<std::size_t>(idx) / n;
    const std::size_t j = static_cast<std::size_t>(idx) % n;
    const std::size_t off = h * hd;
    double* __restrict krow = dk.data.data() + j * d + off;
    double* __restrict vrow = dv.data.data() + j * d + off;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = ds[h](i, j);
      const double pij = probs[h](i, j);
      const double* __restrict qrow = q.data.data() + i * d + off;
      const double* __restrict grow = dout.data.data() + i * d + off;
      for (std::size_t t = 0; t < hd; ++t) {
        krow[t] += s * qrow[t];
        vrow[t] += pij * grow[t];
      }
    }
  }
}

double sum(std::span<const double> x) {
  const std::size_t chunks = (x.size() + kSumChunk - 1) / kSumChunk;
  std::vector<double> partial(chunks, 0.0);
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t end = std::min(x.size(), (c + 1) * kSumChunk);
    double s = 0.0;
    for (std::size_t i = c * kSumChunk; i < end; ++i) s += x[i];
    partial[c] = s;
  }
  double total = 0.0;
  for (double s : partial) total += s;
  return total;
}

namespace serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols != b.rows) throw Error("matmul: inner dimension mismatch");
  prepare_output(c, a.rows, b.cols, accumulate, "matmul");
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(p, j);
      c(i, j) += s;
    }
  }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.cols != b.cols) throw Error("matmul_nt: inner dimension mismatch");
  prepare_output(c, a.rows, b.rows, accumulate, "matmul_nt");
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(j, p);
      c(i, j) += s;
    }
  }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
  if (a.rows != b.rows) throw Error("matmul_tn: inner dimension mismatch");
  prepare_output(c, a.cols, b.cols, accumulate, "matmul_tn");
  for (std::size_t p = 0; p < a.cols; ++p) {
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < a.rows; ++i) s += a(i, p) * b(i, j);
      c(p, j) += s;
    }
  }
}

void layer_norm(const Matrix& x, Matrix& normed, std::vector<double>& inv_std, double eps) {
  normed = Matrix(x.rows, x.cols);
  inv_std.assign(x.rows, 0.0);
  const double dn = static_cast<double>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += x(i, j);
    mean /= dn;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= dn;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < x.cols; ++j) normed(i, j) = (x(i, j) - mean) * inv_std[i];
  }
}

void layer_norm_backward(const Matrix& normed, std::span<const double> inv_std, const Matrix& dnormed,
                         Matrix& dx) {
  dx = Matrix(normed.rows, normed.cols);
  const double dn = static_cast<double>(normed.cols);
  for (std::size_t i = 0; i < normed.rows; ++i) {
    double mg = 0.0, mgn = 0.0;
    for (std::size_t j = 0; j < normed.cols; ++j) {
      mg += dnormed(i, j);
      mgn += dnormed(i, j) * normed(i, j);
    }
    mg /= dn;
    mgn /= dn;
    for (std::size_t j = 0; j < normed.cols; ++j) {
      dx(i, j) = inv_std[i] * (dnormed(i, j) - mg - normed(i, j) * mgn);
    }
  }
}

void attention(const Matrix& q, const Matrix& k, const Matrix& v, int heads, Matrix& out,
               std::vector<Matrix>* probs) {
  check_heads(q, k, v, heads);
  const std::size_t n = q.rows, d = q.cols, hd = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  out = Matrix(n, d);
  std::vector<Matrix> local;
  std::vector<Matrix>& p = probs ? *probs : local;
  p.assign(static_cast<std::size_t>(heads), Matrix(n, n));
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += q(i, off + t) * k(j, off + t);
        p[h](i, j) = s * scale;
        mx = std::max(mx, p[h](i, j));
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        p[h](i, j) = std::exp(p[h](i, j) - mx);
        z += p[h](i, j);
      }
      for (std::size_t j = 0; j < n; ++j) p[h](i, j) /= z;
      for (std::size_t t = 0; t < hd; ++t) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += p[h](i, j) * v(j, off + t);
        out(i, off + t) = s;
      }
    }
  }
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<Matrix>& probs,
                        int heads, const Matrix& dout, Matrix& dq, Matrix& dk, Matrix& dv) {
  check_heads(q, k, v, heads);
  const std::size_t n = q.rows, d = q.cols, hd = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  dq = Matrix(n, d);
  dk = Matrix(n, d);
  dv = Matrix(n, d);
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    const std::size_t off = h * hd;
    const Matrix& p = probs[h];
    Matrix dp(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < hd; ++t) s += dout(i, off + t) * v(j, off + t);
        dp(i, j) = s;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p(i, j) * dp(i, j);
      for (std::size_t j = 0; j < n; ++j) {
        const double dsij = p(i, j) * (dp(i, j) - dot) * scale;
        for (std::size_t t = 0; t < hd; ++t) {
          dq(i, off + t) += dsij * k(j, off + t);
          dk(j, off + t) += dsij * q(i, off + t);
          dv(j, off + t) += p(i, j) * dout(i, off + t);
        }
      }
    }
  }
}

double sum(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s;
}

}  // namespace serial
}  // namespace densedit::kernels
