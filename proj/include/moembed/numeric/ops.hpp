#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "moembed/numeric/tensor.hpp"

namespace moembed {

namespace detail {

// Register-blocked kernel shared by the gemm variants. A is addressed as
// a[i * ai + p * ap], so the same code serves A and A^T. Every C element is
// accumulated in ascending p, whatever its position in the block grid.
using v4d = double __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

template <std::size_t MR>
inline void gemm_rows(const double* a, std::size_t ai, std::size_t ap, const double* b, double* c,
                      std::size_t i, std::size_t p0, std::size_t p1, std::size_t n) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    v4d lo[MR], hi[MR];
    for (std::size_t r = 0; r < MR; ++r) {
      lo[r] = load4(c + (i + r) * n + j);
      hi[r] = load4(c + (i + r) * n + j + 4);
    }
    for (std::size_t p = p0; p < p1; ++p) {
      const v4d b0 = load4(b + p * n + j), b1 = load4(b + p * n + j + 4);
      for (std::size_t r = 0; r < MR; ++r) {
        const double av = a[(i + r) * ai + p * ap];
        lo[r] += av * b0;
        hi[r] += av * b1;
      }
    }
    for (std::size_t r = 0; r < MR; ++r) {
      store4(c + (i + r) * n + j, lo[r]);
      store4(c + (i + r) * n + j + 4, hi[r]);
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t jj = j; jj < n; ++jj) {
      double acc = c[(i + r) * n + jj];
      for (std::size_t p = p0; p < p1; ++p) acc += a[(i + r) * ai + p * ap] * b[p * n + jj];
      c[(i + r) * n + jj] = acc;
    }
}

inline void gemm_strided(const double* a, std::size_t ai, std::size_t ap, const double* b, double* c,
                         std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kc = 256;
  for (std::size_t p0 = 0; p0 < k; p0 += kc) {
    const std::size_t p1 = std::min(k, p0 + kc);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) gemm_rows<4>(a, ai, ap, b, c, i, p0, p1, n);
    for (; i < m; ++i) gemm_rows<1>(a, ai, ap, b, c, i, p0, p1, n);
  }
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  gemm_strided(a, k, 1, b, c, m, k, n);
}

// C[m x n] += A^T * B with A stored [k x m], B stored [k x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  gemm_strided(a, 1, m, b, c, m, k, n);
}

inline std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  return t;
}

// C[m x n] += A[m x k] * B^T with B stored [n x k]
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  auto bt = transposed(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got shape " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a[m x k] * b[k x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        const auto& A = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        if (double* ga = detail::grad_of(self, 0)) detail::gemm_nt(self.grad.data(), B.data(), ga, m, n, k);
        if (double* gb = detail::grad_of(self, 1)) detail::gemm_tn(A.data(), self.grad.data(), gb, k, m, n);
      },
      "matmul");
}

/// a[m x k] * b[n x k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ for " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        const auto& A = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        if (double* ga = detail::grad_of(self, 0)) detail::gemm_nn(self.grad.data(), B.data(), ga, m, n, k);
        if (double* gb = detail::grad_of(self, 1)) detail::gemm_tn(self.grad.data(), A.data(), gb, n, m, k);
      },
      "matmul_nt");
}

/// x[n x in] * w[in x out] + bias[out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  detail::require_matrix(x, "linear");
  detail::require_matrix(w, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in || bias.numel() != out_dim) {
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + ", " +
                         shape_str(w.shape()) + ", " + shape_str(bias.shape()));
  }
  std::vector<double> out(n * out_dim);
  const auto bv = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    std::copy(bv.begin(), bv.end(), out.begin() + static_cast<std::ptrdiff_t>(i * out_dim));
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), n, in, out_dim);
  return detail::make_result(
      {n, out_dim}, std::move(out), {x, w, bias},
      [n, in, out_dim](detail::Node& self) {
        const auto& X = self.inputs[0]->value;
        const auto& W = self.inputs[1]->value;
        const double* g = self.grad.data();
        if (double* gx = detail::grad_of(self, 0)) detail::gemm_nt(g, W.data(), gx, n, out_dim, in);
        if (double* gw = detail::grad_of(self, 1)) detail::gemm_tn(X.data(), g, gw, in, n, out_dim);
        if (double* gb = detail::grad_of(self, 2)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
        }
      },
      "linear");
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  return detail::make_result(
      {c, r}, detail::transposed(a.data().data(), r, c), {a},
      [r, c](detail::Node& self) {
        double* ga = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
      },
      "transpose");
}

/// Same values, new shape (copying; no strided views).
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result(
      std::move(shape), a.to_vector(), {a},
      [](detail::Node& self) {
        double* ga = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
      },
      "reshape");
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        for (std::size_t in = 0; in < 2; ++in)
          if (double* g = detail::grad_of(self, in))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        if (double* g = detail::grad_of(self, 0))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (double* g = detail::grad_of(self, 1))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        const auto& A = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        if (double* g = detail::grad_of(self, 0))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B[i];
        if (double* g = detail::grad_of(self, 1))
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A[i];
      },
      "mul");
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [s](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
      },
      "scale");
}

inline Tensor exp(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.value[i];
      },
      "exp");
}

inline Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [](detail::Node& self) {
        const auto& A = self.inputs[0]->value;
        double* g = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / A[i];
      },
      "log");
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  return detail::make_result(
      a.shape(), std::move(out), {a},
      [](detail::Node& self) {
        const auto& A = self.inputs[0]->value;
        double* g = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const double x = A[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          g[i] += self.grad[i] * (cdf + x * pdf);
        }
      },
      "gelu");
}

/// Sum of all elements, as a scalar.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result(
      {1}, {s}, {a},
      [](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        const double gs = self.grad[0];
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += gs;
      },
      "sum");
}

/// Mean of all elements, as a scalar.
inline Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return detail::make_result(
      {1}, {s / n}, {a},
      [n](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        const double gs = self.grad[0] / n;
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += gs;
      },
      "mean");
}

/// Sum of same-shaped tensors.
inline Tensor add_n(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("add_n: no inputs");
  std::vector<double> out(parts[0].numel(), 0.0);
  for (const auto& p : parts) {
    detail::require_same_shape(parts[0], p, "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p[i];
  }
  return detail::make_result(
      parts[0].shape(), std::move(out), parts,
      [](detail::Node& self) {
        for (std::size_t in = 0; in < self.inputs.size(); ++in)
          if (double* g = detail::grad_of(self, in))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      },
      "add_n");
}

/// Sum_i x_i * c_i with a constant (non-differentiable) weight vector.
inline Tensor dot_const(const Tensor& x, std::vector<double> c) {
  if (c.size() != x.numel()) throw DimensionError("dot_const: weight length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += x[i] * c[i];
  return detail::make_result(
      {1}, {s}, {x},
      [c = std::move(c)](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t i = 0; i < c.size(); ++i) g[i] += self.grad[0] * c[i];
      },
      "dot_const");
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax along `axis`, max-subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  detail::require_finite(x.data(), "softmax");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, in[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(in[base + t * inner] - mx);
        out[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < len; ++t) out[base + t * inner] /= z;
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [outer, inner, len](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        const auto& y = self.value;
        const auto& gy = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * len * inner + j;
            double dot = 0.0;
            for (std::size_t t = 0; t < len; ++t) dot += gy[base + t * inner] * y[base + t * inner];
            for (std::size_t t = 0; t < len; ++t) {
              const std::size_t idx = base + t * inner;
              g[idx] += y[idx] * (gy[idx] - dot);
            }
          }
        }
      },
      "softmax");
}

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kL2NormEps = 1e-12;

/// Row-wise layer normalization over the last dimension with affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEps) {
  const std::size_t d = x.cols();
  const std::size_t n = x.numel() / d;
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias length must equal " + std::to_string(d));
  }
  std::vector<double> out(x.numel()), xhat(x.numel()), rstd(n);
  const auto in = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        const auto& gv = self.inputs[1]->value;
        const auto& gy = self.grad;
        double* gx = detail::grad_of(self, 0);
        double* gg = detail::grad_of(self, 1);
        double* gb = detail::grad_of(self, 2);
        std::vector<double> gxhat(d);
        for (std::size_t r = 0; r < n; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            gxhat[j] = gy[i] * gv[j];
            m1 += gxhat[j];
            m2 += gxhat[j] * xhat[i];
            if (gg) gg[j] += gy[i] * xhat[i];
            if (gb) gb[j] += gy[i];
          }
          if (!gx) continue;
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            gx[i] += rstd[r] * (gxhat[j] - m1 - xhat[i] * m2);
          }
        }
      },
      "layer_norm");
}

/// Layer normalization without affine parameters.
inline Tensor layer_norm(const Tensor& x, double eps = kLayerNormEps) {
  const std::size_t d = x.cols();
  return layer_norm(x, Tensor::full({d}, 1.0), Tensor::zeros({d}), eps);
}

/// Divides each row (last dimension) by max(||row||_2, 1e-12).
inline Tensor l2_normalize(const Tensor& x) {
  const std::size_t d = x.cols();
  const std::size_t n = x.numel() / d;
  std::vector<double> out(x.numel()), norms(n);
  const auto in = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += in[r * d + j] * in[r * d + j];
    norms[r] = std::sqrt(s);
    const double denom = std::max(norms[r], kL2NormEps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[r * d + j] / denom;
  }
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [n, d, norms = std::move(norms)](detail::Node& self) {
        double* gx = detail::grad_of(self, 0);
        const auto& y = self.value;
        const auto& gy = self.grad;
        for (std::size_t r = 0; r < n; ++r) {
          if (norms[r] <= kL2NormEps) {
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gy[r * d + j] / kL2NormEps;
            continue;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += gy[r * d + j] * y[r * d + j];
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += (gy[r * d + j] - y[r * d + j] * dot) / norms[r];
        }
      },
      "l2_normalize");
}

// ---------------------------------------------------------------------------
// Indexing and layout
// ---------------------------------------------------------------------------

/// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (begin >= end || end > d) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * d + begin + j];
  return detail::make_result(
      {n, w}, std::move(out), {x},
      [n, d, w, begin](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < w; ++j) g[r * d + begin + j] += self.grad[r * w + j];
      },
      "slice_cols");
}

/// [a | b] for matrices with equal row counts.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "concat_cols");
  detail::require_matrix(b, "concat_cols");
  const std::size_t n = a.dim(0), da = a.dim(1), db = b.dim(1);
  if (b.dim(0) != n) {
    throw DimensionError("concat_cols: row counts differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t w = da + db;
  std::vector<double> out(n * w);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < da; ++j) out[r * w + j] = a[r * da + j];
    for (std::size_t j = 0; j < db; ++j) out[r * w + da + j] = b[r * db + j];
  }
  return detail::make_result(
      {n, w}, std::move(out), {a, b},
      [n, da, db, w](detail::Node& self) {
        if (double* g = detail::grad_of(self, 0))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < da; ++j) g[r * da + j] += self.grad[r * w + j];
        if (double* g = detail::grad_of(self, 1))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < db; ++j) g[r * db + j] += self.grad[r * w + da + j];
      },
      "concat_cols");
}

/// Rows of x selected by index (repeats allowed). Used for embedding lookup
/// and expert dispatch.
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                           shape_str(x.shape()));
    }
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t m = idx.size();
  return detail::make_result(
      {m, d}, std::move(out), {x},
      [d, idx = std::move(idx)](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += self.grad[r * d + j];
      },
      "gather_rows");
}

/// Zero matrix with `rows` rows where row idx[r] accumulates src row r.
inline Tensor scatter_add_rows(const Tensor& src, std::vector<std::size_t> idx, std::size_t rows) {
  detail::require_matrix(src, "scatter_add_rows");
  const std::size_t d = src.dim(1);
  if (idx.size() != src.dim(0)) throw DimensionError("scatter_add_rows: index length mismatch");
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= rows) throw DimensionError("scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < d; ++j) out[idx[r] * d + j] += src[r * d + j];
  }
  return detail::make_result(
      {rows, d}, std::move(out), {src},
      [d, idx = std::move(idx)](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[idx[r] * d + j];
      },
      "scatter_add_rows");
}

/// Row r of x multiplied by w[r].
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  detail::require_matrix(x, "scale_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (w.numel() != n) throw DimensionError("scale_rows: weight length must equal row count");
  std::vector<double> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] * w[r];
  return detail::make_result(
      {n, d}, std::move(out), {x, w},
      [n, d](detail::Node& self) {
        const auto& X = self.inputs[0]->value;
        const auto& W = self.inputs[1]->value;
        double* gx = detail::grad_of(self, 0);
        double* gw = detail::grad_of(self, 1);
        for (std::size_t r = 0; r < n; ++r) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gx) gx[r * d + j] += self.grad[r * d + j] * W[r];
            acc += self.grad[r * d + j] * X[r * d + j];
          }
          if (gw) gw[r] += acc;
        }
      },
      "scale_rows");
}

/// out[r][j] = x[r][cols[r][j]] for a fixed number of picks per row.
inline Tensor gather_per_row(const Tensor& x, std::vector<std::size_t> cols, std::size_t per_row) {
  detail::require_matrix(x, "gather_per_row");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (per_row == 0 || cols.size() != n * per_row) {
    throw DimensionError("gather_per_row: expected " + std::to_string(n * per_row) + " indices");
  }
  std::vector<double> out(n * per_row);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < per_row; ++j) {
      if (cols[r * per_row + j] >= d) throw DimensionError("gather_per_row: index out of range");
      out[r * per_row + j] = x[r * d + cols[r * per_row + j]];
    }
  return detail::make_result(
      {n, per_row}, std::move(out), {x},
      [n, d, per_row, cols = std::move(cols)](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < per_row; ++j)
            g[r * d + cols[r * per_row + j]] += self.grad[r * per_row + j];
      },
      "gather_per_row");
}

/// Each row divided by its own sum.
inline Tensor normalize_row_sums(const Tensor& x) {
  detail::require_matrix(x, "normalize_row_sums");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(n * d), sums(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) sums[r] += x[r * d + j];
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] / sums[r];
  }
  return detail::make_result(
      {n, d}, std::move(out), {x},
      [n, d, sums = std::move(sums)](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        const auto& y = self.value;
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * y[r * d + j];
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (self.grad[r * d + j] - dot) / sums[r];
        }
      },
      "normalize_row_sums");
}

/// Column means over the rows whose mask entry is true; shape [cols].
inline Tensor masked_column_mean(const Tensor& x, const std::vector<bool>& row_mask) {
  detail::require_matrix(x, "masked_column_mean");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (row_mask.size() != n) throw DimensionError("masked_column_mean: mask length mismatch");
  std::size_t count = 0;
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    if (!row_mask[r]) continue;
    ++count;
    for (std::size_t j = 0; j < d; ++j) out[j] += x[r * d + j];
  }
  if (count == 0) throw InputError("masked_column_mean: no rows selected");
  for (double& v : out) v /= static_cast<double>(count);
  return detail::make_result(
      {d}, std::move(out), {x},
      [n, d, count, row_mask](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        const double inv = 1.0 / static_cast<double>(count);
        for (std::size_t r = 0; r < n; ++r) {
          if (!row_mask[r]) continue;
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[j] * inv;
        }
      },
      "masked_column_mean");
}

/// Mean over the valid positions of each sequence.
/// hidden: [batch*seq x d] laid out sequence-major; mask: batch*seq flags.
inline Tensor masked_mean_pool(const Tensor& hidden, const std::vector<bool>& mask,
                               std::size_t batch, std::size_t seq) {
  detail::require_matrix(hidden, "masked_mean_pool");
  const std::size_t d = hidden.dim(1);
  if (hidden.dim(0) != batch * seq || mask.size() != batch * seq) {
    throw DimensionError("masked_mean_pool: expected " + std::to_string(batch * seq) + " rows");
  }
  std::vector<double> out(batch * d, 0.0), counts(batch, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < seq; ++t) {
      if (!mask[b * seq + t]) continue;
      counts[b] += 1.0;
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += hidden[(b * seq + t) * d + j];
    }
    if (counts[b] == 0.0) throw InputError("masked_mean_pool: sequence without valid tokens");
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= counts[b];
  }
  return detail::make_result(
      {batch, d}, std::move(out), {hidden},
      [batch, seq, d, mask, counts = std::move(counts)](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < seq; ++t) {
            if (!mask[b * seq + t]) continue;
            for (std::size_t j = 0; j < d; ++j)
              g[(b * seq + t) * d + j] += self.grad[b * d + j] / counts[b];
          }
      },
      "masked_mean_pool");
}

/// out[i][m] = <q_i, blocks[i*per_row + m]>: each row against its own block.
inline Tensor rowwise_block_dot(const Tensor& q, const Tensor& blocks, std::size_t per_row) {
  detail::require_matrix(q, "rowwise_block_dot");
  detail::require_matrix(blocks, "rowwise_block_dot");
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (per_row == 0 || blocks.dim(0) != n * per_row || blocks.dim(1) != d) {
    throw DimensionError("rowwise_block_dot: shapes " + shape_str(q.shape()) + " and " +
                         shape_str(blocks.shape()) + " incompatible with " +
                         std::to_string(per_row) + " per row");
  }
  std::vector<double> out(n * per_row, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < per_row; ++m) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += q[i * d + j] * blocks[(i * per_row + m) * d + j];
      out[i * per_row + m] = s;
    }
  return detail::make_result(
      {n, per_row}, std::move(out), {q, blocks},
      [n, d, per_row](detail::Node& self) {
        const auto& Q = self.inputs[0]->value;
        const auto& B = self.inputs[1]->value;
        double* gq = detail::grad_of(self, 0);
        double* gb = detail::grad_of(self, 1);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t m = 0; m < per_row; ++m) {
            const double g = self.grad[i * per_row + m];
            const std::size_t row = i * per_row + m;
            for (std::size_t j = 0; j < d; ++j) {
              if (gq) gq[i * d + j] += g * B[row * d + j];
              if (gb) gb[row * d + j] += g * Q[i * d + j];
            }
          }
      },
      "rowwise_block_dot");
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class Reduction { Mean, Sum };

namespace detail {

// -log softmax(row)[target] computed as (max - x_t) + log1p(sum of the
// remaining exp(x_j - max)), which keeps losses of order e^-50 exact.
inline double row_cross_entropy(const double* row, std::size_t c, std::size_t target,
                                double* probs_out) {
  std::size_t arg = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (row[j] > row[arg]) arg = j;
  const double mx = row[arg];
  double rest = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    if (j == arg) continue;
    rest += std::exp(row[j] - mx);
  }
  if (probs_out) {
    const double z = 1.0 + rest;
    for (std::size_t j = 0; j < c; ++j) probs_out[j] = (j == arg ? 1.0 : std::exp(row[j] - mx)) / z;
  }
  return (mx - row[target]) + std::log1p(rest);
}

}  // namespace detail

/// Cross-entropy of row-wise softmax(logits) against integer targets.
inline Tensor cross_entropy(const Tensor& logits, std::vector<std::size_t> targets,
                            Reduction reduction = Reduction::Mean) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (targets.size() != n) throw DimensionError("cross_entropy: target count must equal row count");
  detail::require_finite(logits.data(), "cross_entropy");
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= c) throw DimensionError("cross_entropy: target out of range");
    total += detail::row_cross_entropy(logits.data().data() + r * c, c, targets[r], nullptr);
  }
  const double denom = reduction == Reduction::Mean ? static_cast<double>(n) : 1.0;
  return detail::make_result(
      {1}, {total / denom}, {logits},
      [n, c, denom, targets = std::move(targets)](detail::Node& self) {
        const auto& L = self.inputs[0]->value;
        double* g = detail::grad_of(self, 0);
        std::vector<double> probs(c);
        const double gs = self.grad[0] / denom;
        for (std::size_t r = 0; r < n; ++r) {
          detail::row_cross_entropy(L.data() + r * c, c, targets[r], probs.data());
          for (std::size_t j = 0; j < c; ++j) g[r * c + j] += gs * (probs[j] - (j == targets[r]));
        }
      },
      "cross_entropy");
}

}  // namespace moembed
