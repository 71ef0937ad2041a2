#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "moembed/error.hpp"
#include "moembed/numeric/ops.hpp"
#include "moembed/numeric/tensor.hpp"

namespace moembed {

/// Two-layer GELU MLP: out = gelu(x W_in + b_in) W_out + b_out.
struct MlpParams {
  Tensor w_in;   // [hidden x mlp]
  Tensor b_in;   // [mlp]
  Tensor w_out;  // [mlp x hidden]
  Tensor b_out;  // [hidden]

  MlpParams clone() const {
    return {w_in.detach(true), b_in.detach(true), w_out.detach(true), b_out.detach(true)};
  }
  std::size_t parameter_count() const {
    return w_in.numel() + b_in.numel() + w_out.numel() + b_out.numel();
  }
};

inline Tensor mlp_forward(const Tensor& x, const MlpParams& p) {
  return linear(gelu(linear(x, p.w_in, p.b_in)), p.w_out, p.b_out);
}

/// Router plus a bank of identically shaped expert MLPs.
struct MoeParams {
  Tensor router;  // [hidden x experts]
  std::vector<MlpParams> experts;
  std::size_t top_k = 1;

  std::size_t num_experts() const { return experts.size(); }

  void validate() const {
    if (experts.empty()) throw ConfigError("MoE layer has no experts");
    if (top_k < 1 || top_k > experts.size()) {
      throw ConfigError("top_k " + std::to_string(top_k) + " must lie in [1, " +
                        std::to_string(experts.size()) + "]");
    }
    if (router.rank() != 2 || router.dim(1) != experts.size()) {
      throw DimensionError("router weight must be [hidden x " + std::to_string(experts.size()) + "]");
    }
    for (const auto& e : experts) {
      if (e.w_in.shape() != experts[0].w_in.shape() || e.w_out.shape() != experts[0].w_out.shape()) {
        throw DimensionError("experts must share parameter shapes");
      }
    }
  }

  MoeParams clone() const {
    MoeParams c{router.detach(true), {}, top_k};
    for (const auto& e : experts) c.experts.push_back(e.clone());
    return c;
  }
};

/// Per-token expert assignment.
struct RouterOutput {
  std::size_t tokens = 0;
  std::size_t top_k = 0;
  std::size_t num_experts = 0;
  std::vector<std::size_t> expert_indices;  // [tokens x k], best first
  Tensor combine_weights;                   // [tokens x k], rows sum to 1
  Tensor full_probs;                        // [tokens x E]

  std::size_t index(std::size_t token, std::size_t slot) const {
    return expert_indices[token * top_k + slot];
  }
};

/// Top-k selection on router probabilities. Selected probabilities are
/// renormalized to sum to one; ties go to the lower expert index.
inline RouterOutput route_probabilities(const Tensor& probs, std::size_t top_k) {
  const std::size_t tokens = probs.dim(0), experts = probs.dim(1);
  if (top_k < 1 || top_k > experts) {
    throw ConfigError("top_k " + std::to_string(top_k) + " must lie in [1, " + std::to_string(experts) + "]");
  }
  RouterOutput out;
  out.tokens = tokens;
  out.top_k = top_k;
  out.num_experts = experts;
  out.full_probs = probs;
  out.expert_indices.resize(tokens * top_k);
  std::vector<std::size_t> order(experts);
  const auto pv = probs.data();
  for (std::size_t t = 0; t < tokens; ++t) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* row = pv.data() + t * experts;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k), order.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    std::copy_n(order.begin(), top_k, out.expert_indices.begin() + static_cast<std::ptrdiff_t>(t * top_k));
  }
  out.combine_weights = normalize_row_sums(gather_per_row(probs, out.expert_indices, top_k));
  return out;
}

/// Softmax over router logits (hidden * router) followed by top-k selection.
inline RouterOutput route(const Tensor& hidden, const MoeParams& params) {
  if (params.top_k > params.num_experts()) {
    throw ConfigError("top_k " + std::to_string(params.top_k) + " exceeds expert count " +
                      std::to_string(params.num_experts()));
  }
  return route_probabilities(softmax(matmul(hidden, params.router), 1), params.top_k);
}

/// Routing statistics of one MoE call over the valid (non-padding) tokens.
/// r: fraction of routed token-slots per expert (constant);
/// p: mean routing probability per expert (differentiable).
struct LoadStats {
  std::vector<double> r;
  Tensor p;
  std::size_t token_count = 0;

  std::vector<double> p_values() const { return p.to_vector(); }
};

inline LoadStats compute_load_stats(const RouterOutput& routing, const std::vector<bool>& token_mask) {
  if (token_mask.size() != routing.tokens) throw DimensionError("load stats: mask length mismatch");
  LoadStats stats;
  stats.r.assign(routing.num_experts, 0.0);
  for (std::size_t t = 0; t < routing.tokens; ++t) {
    if (!token_mask[t]) continue;
    ++stats.token_count;
    for (std::size_t j = 0; j < routing.top_k; ++j) stats.r[routing.index(t, j)] += 1.0;
  }
  if (stats.token_count == 0) throw InputError("load stats: no valid tokens");
  const double slots = static_cast<double>(stats.token_count * routing.top_k);
  for (double& v : stats.r) v /= slots;
  stats.p = masked_column_mean(routing.full_probs, token_mask);
  return stats;
}

/// alpha * sum_i r_i * p_i. Gradients flow through p only.
inline Tensor load_balance_loss(const LoadStats& stats, double alpha) {
  return scale(dot_const(stats.p, stats.r), alpha);
}

struct MoeOutput {
  Tensor output;
  RouterOutput routing;
  LoadStats stats;
};

/// Sends every token through its top-k experts and mixes the results with
/// the combine weights. All tokens are processed (no capacity limit);
/// `token_mask` only decides which tokens count towards LoadStats.
inline MoeOutput moe_forward(const Tensor& hidden, const MoeParams& params,
                             const std::vector<bool>& token_mask) {
  params.validate();
  MoeOutput out;
  out.routing = route(hidden, params);
  out.stats = compute_load_stats(out.routing, token_mask);
  const std::size_t tokens = hidden.dim(0), k = params.top_k;
  const Tensor flat_weights = reshape(out.routing.combine_weights, {tokens * k, 1});

  std::vector<Tensor> parts;
  for (std::size_t e = 0; e < params.num_experts(); ++e) {
    std::vector<std::size_t> rows, slots;
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t j = 0; j < k; ++j)
        if (out.routing.index(t, j) == e) {
          rows.push_back(t);
          slots.push_back(t * k + j);
        }
    if (rows.empty()) continue;
    Tensor y = mlp_forward(gather_rows(hidden, rows), params.experts[e]);
    Tensor w = gather_rows(flat_weights, std::move(slots));
    parts.push_back(scatter_add_rows(scale_rows(y, w), std::move(rows), tokens));
  }
  out.output = parts.size() == 1 ? parts[0] : add_n(parts);
  return out;
}

}  // namespace moembed
