#include "cavl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace cavl {

namespace detail {

void matmul_nn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;  // selection/pooling matrices are mostly zeros
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

}  // namespace detail

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeMismatch(std::string(op) + ": shapes differ, " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  }
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) {
    throw ShapeMismatch(std::string(op) + ": expected rank-2 tensor, got " +
                        shape_str(x.shape()));
  }
}

// Softmax of one row with max-subtraction, writing into out.
void softmax_row(const double* x, double* out, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(x[i] - m);
    s += out[i];
  }
  const double inv = 1.0 / s;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

// dS = A ⊙ (dA − sum(dA ⊙ A)) for one softmax row.
void softmax_row_backward(const double* a, const double* da, double* ds, std::size_t n) {
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += da[i] * a[i];
  for (std::size_t i = 0; i < n; ++i) ds[i] = a[i] * (da[i] - dot);
}

constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;
constexpr double kInvSqrt2Pi = 0.3989422804014327;  // 1/sqrt(2*pi)

double norm_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_same_shape(A, B, "add");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] + B[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make(std::move(out), ng, [a, b](Tape& t, Var self) {
    auto g = t.grad_view(self);
    t.add_grad(a, g);
    t.add_grad(b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_same_shape(A, B, "sub");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] - B[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make(std::move(out), ng, [a, b](Tape& t, Var self) {
    auto g = t.grad_view(self);
    t.add_grad(a, g);
    if (t.needs_grad(b)) {
      auto acc = t.grad_accum(b);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] -= g[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_same_shape(A, B, "mul");
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * B[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make(std::move(out), ng, [a, b](Tape& t, Var self) {
    auto g = t.grad_view(self);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.needs_grad(a)) {
      auto acc = t.grad_accum(a);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * B[i];
    }
    if (t.needs_grad(b)) {
      auto acc = t.grad_accum(b);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * A[i];
    }
  });
}

Var scale(Tape& t, Var a, double c) {
  const Tensor& A = t.value(a);
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i] * c;
  return t.make(std::move(out), t.needs_grad(a), [a, c](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(a)) return;
    auto acc = t.grad_accum(a);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * c;
  });
}

Var add_bias_rows(Tape& t, Var x, Var bias) {
  const Tensor& X = t.value(x);
  const Tensor& B = t.value(bias);
  require_rank2(X, "add_bias_rows");
  if (B.rank() != 1 || B.numel() != X.extent(1)) {
    throw ShapeMismatch("add_bias_rows: bias " + shape_str(B.shape()) +
                        " does not match row width of " + shape_str(X.shape()));
  }
  const std::size_t n = X.extent(0), d = X.extent(1);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = X[r * d + c] + B[c];
  const bool ng = t.needs_grad(x) || t.needs_grad(bias);
  return t.make(std::move(out), ng, [x, bias, n, d](Tape& t, Var self) {
    auto g = t.grad_view(self);
    t.add_grad(x, g);
    if (t.needs_grad(bias)) {
      auto acc = t.grad_accum(bias);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) acc[c] += g[r * d + c];
    }
  });
}

Var log_elem(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(X[i]);
  return t.make(std::move(out), t.needs_grad(x), [x](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(x)) return;
    const Tensor& X = t.value(x);
    auto acc = t.grad_accum(x);
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] / X[i];
  });
}

Var gelu(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = X[i] * norm_cdf(X[i]);
  return t.make(std::move(out), t.needs_grad(x), [x](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(x)) return;
    const Tensor& X = t.value(x);
    auto acc = t.grad_accum(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      acc[i] += g[i] * (norm_cdf(X[i]) + X[i] * norm_pdf(X[i]));
    }
  });
}

Var softplus(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = X[i];
    out[i] = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  return t.make(std::move(out), t.needs_grad(x), [x](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(x)) return;
    const Tensor& X = t.value(x);
    auto acc = t.grad_accum(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      acc[i] += g[i] / (1.0 + std::exp(-X[i]));
    }
  });
}

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  if (A.extent(1) != B.extent(0)) {
    throw ShapeMismatch("matmul: inner extents differ, " + shape_str(A.shape()) +
                        " vs " + shape_str(B.shape()));
  }
  const std::size_t m = A.extent(0), k = A.extent(1), n = B.extent(1);
  Tensor out(Shape{m, n});
  detail::matmul_nn(A.values().data(), B.values().data(), out.values().data(), m, k, n);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make(std::move(out), ng, [a, b, m, k, n](Tape& t, Var self) {
    auto g = t.grad_view(self);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (t.needs_grad(a)) {
      // dA += dC . B^T
      auto bt = detail::transposed(B.values().data(), k, n);
      detail::matmul_nn(g.data(), bt.data(), t.grad_accum(a).data(), m, n, k);
    }
    if (t.needs_grad(b)) {
      // dB += A^T . dC
      auto at = detail::transposed(A.values().data(), m, k);
      detail::matmul_nn(at.data(), g.data(), t.grad_accum(b).data(), k, m, n);
    }
  });
}

Var transpose(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  require_rank2(A, "transpose");
  const std::size_t m = A.extent(0), n = A.extent(1);
  Tensor out(Shape{n, m}, detail::transposed(A.values().data(), m, n));
  return t.make(std::move(out), t.needs_grad(a), [a, m, n](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(a)) return;
    auto acc = t.grad_accum(a);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) acc[r * n + c] += g[c * m + r];
  });
}

Var softmax(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  const std::size_t rows = X.lead_count(), n = X.last_extent();
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    softmax_row(X.values().data() + r * n, out.values().data() + r * n, n);
  }
  return t.make(std::move(out), t.needs_grad(x), [x, rows, n](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(x)) return;
    const Tensor& Y = t.value(self);
    auto acc = t.grad_accum(x);
    std::vector<double> ds(n);
    for (std::size_t r = 0; r < rows; ++r) {
      softmax_row_backward(Y.values().data() + r * n, g.data() + r * n, ds.data(), n);
      for (std::size_t i = 0; i < n; ++i) acc[r * n + i] += ds[i];
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = t.value(x);
  const Tensor& G = t.value(gamma);
  const Tensor& B = t.value(beta);
  const std::size_t rows = X.lead_count(), d = X.last_extent();
  if (G.numel() != d || B.numel() != d) {
    throw ShapeMismatch("layer_norm: gamma/beta must have " + std::to_string(d) +
                        " elements");
  }
  Tensor out(X.shape());
  std::vector<double> xhat(rows * d);
  std::vector<double> istd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.values().data() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    istd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mean) * istd[r];
      xhat[r * d + i] = h;
      out[r * d + i] = G[i] * h + B[i];
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.make(std::move(out), ng,
                [x, gamma, beta, rows, d, xhat = std::move(xhat),
                 istd = std::move(istd)](Tape& t, Var self) {
    auto g = t.grad_view(self);
    const Tensor& G = t.value(gamma);
    if (t.needs_grad(gamma)) {
      auto acc = t.grad_accum(gamma);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) acc[i] += g[r * d + i] * xhat[r * d + i];
    }
    if (t.needs_grad(beta)) {
      auto acc = t.grad_accum(beta);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) acc[i] += g[r * d + i];
    }
    if (t.needs_grad(x)) {
      auto acc = t.grad_accum(x);
      const double invd = 1.0 / static_cast<double>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double dxh = g[r * d + i] * G[i];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat[r * d + i];
        }
        mean_dxhat *= invd;
        mean_dxhat_xhat *= invd;
        for (std::size_t i = 0; i < d; ++i) {
          const double dxh = g[r * d + i] * G[i];
          acc[r * d + i] +=
              istd[r] * (dxh - mean_dxhat - xhat[r * d + i] * mean_dxhat_xhat);
        }
      }
    }
  });
}

Var l2_normalize_rows(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  require_rank2(X, "l2_normalize_rows");
  const std::size_t rows = X.extent(0), d = X.extent(1);
  Tensor out(X.shape());
  std::vector<double> inv_norm(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.values().data() + r * d;
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += xr[i] * xr[i];
    inv_norm[r] = 1.0 / std::sqrt(s);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xr[i] * inv_norm[r];
  }
  return t.make(std::move(out), t.needs_grad(x),
                [x, rows, d, inv_norm = std::move(inv_norm)](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(x)) return;
    const Tensor& Y = t.value(self);
    auto acc = t.grad_accum(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = Y.values().data() + r * d;
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += yr[i] * g[r * d + i];
      for (std::size_t i = 0; i < d; ++i) {
        acc[r * d + i] += (g[r * d + i] - yr[i] * dot) * inv_norm[r];
      }
    }
  });
}

namespace {

Var gather_impl(Tape& t, Var x, std::span<const Index> rows, const char* op) {
  const Tensor& X = t.value(x);
  require_rank2(X, op);
  const std::size_t v = X.extent(0), d = X.extent(1);
  if (rows.empty()) throw ShapeMismatch(std::string(op) + ": empty row selection");
  Tensor out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index id = rows[i];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexOutOfRange(std::string(op) + ": id " + std::to_string(id) +
                            " outside [0, " + std::to_string(v) + ")");
    }
    const double* src = X.values().data() + static_cast<std::size_t>(id) * d;
    std::copy(src, src + d, out.values().data() + i * d);
  }
  std::vector<Index> rows_copy(rows.begin(), rows.end());
  return t.make(std::move(out), t.needs_grad(x),
                [x, d, rows_copy = std::move(rows_copy)](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(x)) return;
    auto acc = t.grad_accum(x);
    for (std::size_t i = 0; i < rows_copy.size(); ++i) {
      double* dst = acc.data() + static_cast<std::size_t>(rows_copy[i]) * d;
      const double* src = g.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

}  // namespace

Var embedding_lookup(Tape& t, Var table, std::span<const Index> ids) {
  return gather_impl(t, table, ids, "embedding_lookup");
}

Var gather_rows(Tape& t, Var x, std::span<const Index> rows) {
  return gather_impl(t, x, rows, "gather_rows");
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows: no parts");
  const std::size_t d = t.value(parts[0]).extent(1);
  std::size_t total = 0;
  bool ng = false;
  for (Var p : parts) {
    const Tensor& P = t.value(p);
    require_rank2(P, "concat_rows");
    if (P.extent(1) != d) {
      throw ShapeMismatch("concat_rows: column widths differ");
    }
    total += P.extent(0);
    ng = ng || t.needs_grad(p);
  }
  Tensor out(Shape{total, d});
  std::size_t at = 0;
  for (Var p : parts) {
    const Tensor& P = t.value(p);
    std::copy(P.values().begin(), P.values().end(), out.values().data() + at);
    at += P.numel();
  }
  std::vector<Var> parts_copy(parts.begin(), parts.end());
  return t.make(std::move(out), ng, [parts_copy = std::move(parts_copy)](Tape& t, Var self) {
    auto g = t.grad_view(self);
    std::size_t at = 0;
    for (Var p : parts_copy) {
      const std::size_t n = t.value(p).numel();
      t.add_grad(p, g.subspan(at, n));
      at += n;
    }
  });
}

Var concat_cols(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_rank2(A, "concat_cols");
  require_rank2(B, "concat_cols");
  if (A.extent(0) != B.extent(0)) {
    throw ShapeMismatch("concat_cols: row counts differ");
  }
  const std::size_t n = A.extent(0), da = A.extent(1), db = B.extent(1);
  Tensor out(Shape{n, da + db});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(A.values().data() + r * da, A.values().data() + (r + 1) * da,
              out.values().data() + r * (da + db));
    std::copy(B.values().data() + r * db, B.values().data() + (r + 1) * db,
              out.values().data() + r * (da + db) + da);
  }
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.make(std::move(out), ng, [a, b, n, da, db](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (t.needs_grad(a)) {
      auto acc = t.grad_accum(a);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < da; ++c) acc[r * da + c] += g[r * (da + db) + c];
    }
    if (t.needs_grad(b)) {
      auto acc = t.grad_accum(b);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < db; ++c) acc[r * db + c] += g[r * (da + db) + da + c];
    }
  });
}

Var slice_rows(Tape& t, Var x, std::size_t begin, std::size_t count) {
  const Tensor& X = t.value(x);
  require_rank2(X, "slice_rows");
  if (begin + count > X.extent(0)) {
    throw IndexOutOfRange("slice_rows: range past end");
  }
  const std::size_t d = X.extent(1);
  Tensor out(Shape{count, d},
             std::vector<double>(X.values().begin() + begin * d,
                                 X.values().begin() + (begin + count) * d));
  return t.make(std::move(out), t.needs_grad(x), [x, begin, d](Tape& t, Var self) {
    auto g = t.grad_view(self);
    if (!t.needs_grad(x)) return;
    auto acc = t.grad_accum(x);
    for (std::size_t i = 0; i < g.size(); ++i) acc[begin * d + i] += g[i];
  });
}

Var sum_all(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  double s = 0.0;
  for (std::size_t i = 0; i < X.numel(); ++i) s += X[i];
  return t.make(Tensor::scalar(s), t.needs_grad(x), [x](Tape& t, Var self) {
    const double g = t.grad_view(self)[0];
    if (!t.needs_grad(x)) return;
    auto acc = t.grad_accum(x);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g;
  });
}

Var diag_sum(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  require_rank2(X, "diag_sum");
  if (X.extent(0) != X.extent(1)) {
    throw ShapeMismatch("diag_sum: matrix must be square, got " + shape_str(X.shape()));
  }
  const std::size_t n = X.extent(0);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += X[i * n + i];
  return t.make(Tensor::scalar(s), t.needs_grad(x), [x, n](Tape& t, Var self) {
    const double g = t.grad_view(self)[0];
    if (!t.needs_grad(x)) return;
    auto acc = t.grad_accum(x);
    for (std::size_t i = 0; i < n; ++i) acc[i * n + i] += g;
  });
}

namespace {

// Copy a [h x w] block starting at (r0, c0) out of a row-major matrix with
// the given row stride.
void copy_block(const double* src, std::size_t stride, std::size_t r0, std::size_t c0,
                std::size_t h, std::size_t w, double* dst) {
  for (std::size_t r = 0; r < h; ++r) {
    const double* s = src + (r0 + r) * stride + c0;
    std::copy(s, s + w, dst + r * w);
  }
}

void add_block(double* dst, std::size_t stride, std::size_t r0, std::size_t c0,
               std::size_t h, std::size_t w, const double* src) {
  for (std::size_t r = 0; r < h; ++r) {
    double* d = dst + (r0 + r) * stride + c0;
    for (std::size_t c = 0; c < w; ++c) d[c] += src[r * w + c];
  }
}

}  // namespace

Var attention_core(Tape& t, Var q, Var k, Var v, const Tensor& key_bias,
                   std::size_t batch, std::size_t seq, std::size_t heads) {
  const Tensor& Q = t.value(q);
  const Tensor& K = t.value(k);
  const Tensor& V = t.value(v);
  require_rank2(Q, "attention_core");
  require_same_shape(Q, K, "attention_core");
  require_same_shape(Q, V, "attention_core");
  const std::size_t rows = Q.extent(0), d = Q.extent(1);
  if (rows != batch * seq) {
    throw ShapeMismatch("attention_core: rows != batch*seq");
  }
  if (d % heads != 0) {
    throw ShapeMismatch("attention_core: width not divisible by head count");
  }
  if (key_bias.numel() != rows) {
    throw ShapeMismatch("attention_core: key bias must have batch*seq entries");
  }
  const std::size_t dh = d / heads;
  const double scal = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out(Q.shape());
  // Saved softmax weights, one [seq x seq] block per (batch, head).
  std::vector<double> attn(batch * heads * seq * seq);
  std::vector<double> qb(seq * dh), kb(seq * dh), vb(seq * dh), srow(seq);
  std::vector<double> ob(seq * dh);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* bias = key_bias.values().data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      copy_block(Q.values().data(), d, b * seq, h * dh, seq, dh, qb.data());
      copy_block(K.values().data(), d, b * seq, h * dh, seq, dh, kb.data());
      copy_block(V.values().data(), d, b * seq, h * dh, seq, dh, vb.data());
      double* a = attn.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t j = 0; j < seq; ++j) {
          double acc = 0.0;
          for (std::size_t p = 0; p < dh; ++p) acc += qb[i * dh + p] * kb[j * dh + p];
          srow[j] = acc * scal + bias[j];
        }
        softmax_row(srow.data(), a + i * seq, seq);
      }
      std::fill(ob.begin(), ob.end(), 0.0);
      detail::matmul_nn(a, vb.data(), ob.data(), seq, seq, dh);
      for (std::size_t r = 0; r < seq; ++r) {
        std::copy(ob.data() + r * dh, ob.data() + (r + 1) * dh,
                  out.values().data() + (b * seq + r) * d + h * dh);
      }
    }
  }

  const bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
  return t.make(std::move(out), ng,
                [q, k, v, batch, seq, heads, dh, d, scal,
                 attn = std::move(attn)](Tape& t, Var self) {
    auto g = t.grad_view(self);
    const Tensor& Q = t.value(q);
    const Tensor& K = t.value(k);
    const Tensor& V = t.value(v);
    const bool nq = t.needs_grad(q), nk = t.needs_grad(k), nv = t.needs_grad(v);
    double* gq = nq ? t.grad_accum(q).data() : nullptr;
    double* gk = nk ? t.grad_accum(k).data() : nullptr;
    double* gv = nv ? t.grad_accum(v).data() : nullptr;

    std::vector<double> qb(seq * dh), kb(seq * dh), vb(seq * dh), gob(seq * dh);
    std::vector<double> da(seq * seq), ds(seq * seq), tmp(seq * dh);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        copy_block(Q.values().data(), d, b * seq, h * dh, seq, dh, qb.data());
        copy_block(K.values().data(), d, b * seq, h * dh, seq, dh, kb.data());
        copy_block(V.values().data(), d, b * seq, h * dh, seq, dh, vb.data());
        copy_block(g.data(), d, b * seq, h * dh, seq, dh, gob.data());
        const double* a = attn.data() + (b * heads + h) * seq * seq;

        // dA = dOut . V^T, then dS via softmax backward per row.
        std::fill(da.begin(), da.end(), 0.0);
        detail::matmul_nt(gob.data(), vb.data(), da.data(), seq, dh, seq);
        for (std::size_t i = 0; i < seq; ++i) {
          softmax_row_backward(a + i * seq, da.data() + i * seq, ds.data() + i * seq, seq);
        }
        if (nv) {
          // dV += A^T . dOut
          auto at = detail::transposed(a, seq, seq);
          std::fill(tmp.begin(), tmp.end(), 0.0);
          detail::matmul_nn(at.data(), gob.data(), tmp.data(), seq, seq, dh);
          add_block(gv, d, b * seq, h * dh, seq, dh, tmp.data());
        }
        if (nq) {
          // dQ += scal * dS . K
          std::fill(tmp.begin(), tmp.end(), 0.0);
          detail::matmul_nn(ds.data(), kb.data(), tmp.data(), seq, seq, dh);
          for (double& x : tmp) x *= scal;
          add_block(gq, d, b * seq, h * dh, seq, dh, tmp.data());
        }
        if (nk) {
          // dK += scal * dS^T . Q
          auto dst = detail::transposed(ds.data(), seq, seq);
          std::fill(tmp.begin(), tmp.end(), 0.0);
          detail::matmul_nn(dst.data(), qb.data(), tmp.data(), seq, seq, dh);
          for (double& x : tmp) x *= scal;
          add_block(gk, d, b * seq, h * dh, seq, dh, tmp.data());
        }
      }
    }
  });
}

Var cross_entropy_mean(Tape& t, Var logits, std::span<const Index> targets) {
  const Tensor& Z = t.value(logits);
  require_rank2(Z, "cross_entropy_mean");
  const std::size_t n = Z.extent(0), c = Z.extent(1);
  if (targets.size() != n) {
    throw ShapeMismatch("cross_entropy_mean: one target per logit row required");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const Index tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= c) {
      throw IndexOutOfRange("cross_entropy_mean: target " + std::to_string(tgt) +
                            " outside [0, " + std::to_string(c) + ")");
    }
    const double* z = Z.values().data() + r * c;
    double m = z[0];
    for (std::size_t i = 1; i < c; ++i) m = std::max(m, z[i]);
    double s = 0.0;
    for (std::size_t i = 0; i < c; ++i) s += std::exp(z[i] - m);
    total += m + std::log(s) - z[tgt];
  }
  total /= static_cast<double>(n);
  std::vector<Index> tgt_copy(targets.begin(), targets.end());
  return t.make(Tensor::scalar(total), t.needs_grad(logits),
                [logits, n, c, tgt_copy = std::move(tgt_copy)](Tape& t, Var self) {
    const double g = t.grad_view(self)[0];
    if (!t.needs_grad(logits)) return;
    const Tensor& Z = t.value(logits);
    auto acc = t.grad_accum(logits);
    const double gn = g / static_cast<double>(n);
    std::vector<double> p(c);
    for (std::size_t r = 0; r < n; ++r) {
      softmax_row(Z.values().data() + r * c, p.data(), c);
      for (std::size_t i = 0; i < c; ++i) acc[r * c + i] += gn * p[i];
      acc[r * c + static_cast<std::size_t>(tgt_copy[r])] -= gn;
    }
  });
}

}  // namespace cavl
