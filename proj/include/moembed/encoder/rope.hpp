#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "moembed/error.hpp"
#include "moembed/numeric/ops.hpp"
#include "moembed/numeric/tensor.hpp"

namespace moembed {

/// cos/sin of pos * base^(-2i/head_dim) for every position and pair i.
class RotaryTable {
 public:
  RotaryTable(std::span<const std::size_t> positions, std::size_t head_dim, double base)
      : pairs_(head_dim / 2), cos_(positions.size() * pairs_), sin_(positions.size() * pairs_) {
    if (head_dim == 0 || head_dim % 2 != 0) {
      throw ConfigError("rotary embedding needs an even head dimension, got " +
                        std::to_string(head_dim));
    }
    if (!(base > 0.0)) throw ConfigError("rotary base must be positive");
    for (std::size_t p = 0; p < positions.size(); ++p) {
      for (std::size_t i = 0; i < pairs_; ++i) {
        const double freq =
            std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(positions[p]) * freq;
        cos_[p * pairs_ + i] = std::cos(angle);
        sin_[p * pairs_ + i] = std::sin(angle);
      }
    }
  }

  /// Rotates one head vector in place; `inverse` applies the transpose.
  void rotate(double* v, std::size_t pos_index, bool inverse = false) const {
    const double* c = cos_.data() + pos_index * pairs_;
    const double* s = sin_.data() + pos_index * pairs_;
    for (std::size_t i = 0; i < pairs_; ++i) {
      const double x0 = v[2 * i], x1 = v[2 * i + 1];
      const double sn = inverse ? -s[i] : s[i];
      v[2 * i] = x0 * c[i] - x1 * sn;
      v[2 * i + 1] = x0 * sn + x1 * c[i];
    }
  }

 private:
  std::size_t pairs_;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

/// Rotary position embedding of a [batch x heads x seq x head_dim] tensor.
/// Pairs (2i, 2i+1) are rotated by positions[t] * base^(-2i/head_dim).
inline Tensor rope_apply(const Tensor& x, std::vector<std::size_t> positions, double base) {
  if (x.rank() != 4) throw DimensionError("rope_apply expects rank 4, got " + shape_str(x.shape()));
  const std::size_t outer = x.dim(0) * x.dim(1), seq = x.dim(2), hd = x.dim(3);
  if (positions.size() != seq) throw DimensionError("rope_apply: one position per sequence slot");
  RotaryTable table(positions, hd, base);
  std::vector<double> out = x.to_vector();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t t = 0; t < seq; ++t) table.rotate(out.data() + (o * seq + t) * hd, t);
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [outer, seq, hd, table = std::move(table)](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        std::vector<double> tmp(hd);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t t = 0; t < seq; ++t) {
            const std::size_t off = (o * seq + t) * hd;
            std::copy_n(self.grad.data() + off, hd, tmp.data());
            table.rotate(tmp.data(), t, true);
            for (std::size_t j = 0; j < hd; ++j) g[off + j] += tmp[j];
          }
      },
      "rope_apply");
}

/// Shape of a self-attention call over padded sequences.
struct AttentionShape {
  std::size_t batch;
  std::size_t seq;
  std::size_t heads;
  std::size_t head_dim;
};

/// Multi-head scaled dot-product self-attention with rotary positions.
///
/// q, k, v: [batch*seq x heads*head_dim], sequence-major. Keys whose mask
/// entry is false receive zero attention weight. Returns the per-head
/// outputs concatenated back into [batch*seq x heads*head_dim].
inline Tensor rotary_self_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const std::vector<bool>& mask, AttentionShape shp,
                                    double rope_base) {
  const std::size_t B = shp.batch, S = shp.seq, H = shp.heads, D = shp.head_dim;
  const std::size_t width = H * D;
  for (const Tensor* t : {&q, &k, &v}) {
    if (t->rank() != 2 || t->dim(0) != B * S || t->dim(1) != width) {
      throw DimensionError("rotary_self_attention: expected [" + std::to_string(B * S) + "x" +
                           std::to_string(width) + "], got " + shape_str(t->shape()));
    }
  }
  if (mask.size() != B * S) throw DimensionError("rotary_self_attention: mask length mismatch");
  std::vector<std::size_t> positions(S);
  for (std::size_t t = 0; t < S; ++t) positions[t] = t;
  RotaryTable table(positions, D, rope_base);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(D));

  std::vector<double> out(B * S * width, 0.0);
  std::vector<double> probs(B * H * S * S, 0.0);
  std::vector<double> qh(S * D), kh(S * D), vh(S * D), oh(S * D);
  const auto Q = q.data(), K = k.data(), V = v.data();

  auto load_head = [&](std::span<const double> src, std::vector<double>& dst, std::size_t b,
                       std::size_t h, bool rotate) {
    for (std::size_t t = 0; t < S; ++t) {
      std::copy_n(src.data() + (b * S + t) * width + h * D, D, dst.data() + t * D);
      if (rotate) table.rotate(dst.data() + t * D, t);
    }
  };

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      load_head(Q, qh, b, h, true);
      load_head(K, kh, b, h, true);
      load_head(V, vh, b, h, false);
      double* P = probs.data() + (b * H + h) * S * S;
      detail::gemm_nt(qh.data(), kh.data(), P, S, D, S);
      for (std::size_t i = 0; i < S; ++i) {
        double* row = P + i * S;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          if (mask[b * S + j]) {
            row[j] *= inv_sqrt;
            mx = std::max(mx, row[j]);
          }
        }
        double z = 0.0;
        for (std::size_t j = 0; j < S; ++j) {
          row[j] = mask[b * S + j] ? std::exp(row[j] - mx) : 0.0;
          z += row[j];
        }
        for (std::size_t j = 0; j < S; ++j) row[j] /= z;
      }
      std::fill(oh.begin(), oh.end(), 0.0);
      detail::gemm_nn(P, vh.data(), oh.data(), S, S, D);
      for (std::size_t t = 0; t < S; ++t)
        std::copy_n(oh.data() + t * D, D, out.data() + (b * S + t) * width + h * D);
    }
  }

  return detail::make_result(
      {B * S, width}, std::move(out), {q, k, v},
      [B, S, H, D, width, inv_sqrt, table = std::move(table),
       probs = std::move(probs)](detail::Node& self) {
        const auto& Qv = self.inputs[0]->value;
        const auto& Kv = self.inputs[1]->value;
        const auto& Vv = self.inputs[2]->value;
        double* gq = detail::grad_of(self, 0);
        double* gk = detail::grad_of(self, 1);
        double* gv = detail::grad_of(self, 2);
        std::vector<double> qh(S * D), kh(S * D), vh(S * D), go(S * D);
        std::vector<double> dP(S * S), dq(S * D), dk(S * D), dv(S * D);
        auto load = [&](const std::vector<double>& src, std::vector<double>& dst, std::size_t b,
                        std::size_t h, bool rotate) {
          for (std::size_t t = 0; t < S; ++t) {
            std::copy_n(src.data() + (b * S + t) * width + h * D, D, dst.data() + t * D);
            if (rotate) table.rotate(dst.data() + t * D, t);
          }
        };
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const double* P = probs.data() + (b * H + h) * S * S;
            load(self.grad, go, b, h, false);
            load(Qv, qh, b, h, true);
            load(Kv, kh, b, h, true);
            load(Vv, vh, b, h, false);
            if (gv) {
              std::fill(dv.begin(), dv.end(), 0.0);
              detail::gemm_tn(P, go.data(), dv.data(), S, S, D);
              for (std::size_t t = 0; t < S; ++t)
                for (std::size_t j = 0; j < D; ++j) gv[(b * S + t) * width + h * D + j] += dv[t * D + j];
            }
            if (!gq && !gk) continue;
            std::fill(dP.begin(), dP.end(), 0.0);
            detail::gemm_nt(go.data(), vh.data(), dP.data(), S, D, S);
            for (std::size_t i = 0; i < S; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < S; ++j) dot += dP[i * S + j] * P[i * S + j];
              for (std::size_t j = 0; j < S; ++j)
                dP[i * S + j] = P[i * S + j] * (dP[i * S + j] - dot) * inv_sqrt;
            }
            if (gq) {
              std::fill(dq.begin(), dq.end(), 0.0);
              detail::gemm_nn(dP.data(), kh.data(), dq.data(), S, S, D);
              for (std::size_t t = 0; t < S; ++t) {
                table.rotate(dq.data() + t * D, t, true);
                for (std::size_t j = 0; j < D; ++j) gq[(b * S + t) * width + h * D + j] += dq[t * D + j];
              }
            }
            if (gk) {
              std::fill(dk.begin(), dk.end(), 0.0);
              detail::gemm_tn(dP.data(), qh.data(), dk.data(), S, S, D);
              for (std::size_t t = 0; t < S; ++t) {
                table.rotate(dk.data() + t * D, t, true);
                for (std::size_t j = 0; j < D; ++j) gk[(b * S + t) * width + h * D + j] += dk[t * D + j];
              }
            }
          }
        }
      },
      "rotary_self_attention");
}

}  // namespace moembed
