#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "moembed/encoder/model.hpp"
#include "moembed/error.hpp"

namespace moembed {

/// Layers 1, 3, 5, ... (every alternate layer starting from the second).
inline std::vector<std::size_t> alternate_layers_from_second(std::size_t num_layers) {
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l < num_layers; l += 2) out.push_back(l);
  return out;
}

/// Every layer.
inline std::vector<std::size_t> all_layers(std::size_t num_layers) {
  std::vector<std::size_t> out(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) out[l] = l;
  return out;
}

struct UpcycleOptions {
  std::size_t experts = 8;
  std::size_t top_k = 2;
  // Standard deviation of Gaussian router noise; 0 keeps the router at
  // zero so the upcycled model reproduces the dense one exactly.
  double router_noise = 0.0;
  std::uint64_t seed = 0;
};

/// Copies the dense MLP of each chosen layer into every expert of a new MoE
/// layer. All other parameters are copied unchanged.
inline EncoderModel upcycle(const EncoderModel& dense, const std::vector<std::size_t>& moe_layers,
                            const UpcycleOptions& opts) {
  if (opts.experts == 0 || opts.top_k < 1 || opts.top_k > opts.experts) {
    throw ConfigError("upcycle: top_k " + std::to_string(opts.top_k) + " must lie in [1, " +
                      std::to_string(opts.experts) + "]");
  }
  std::set<std::size_t> chosen;
  for (auto l : moe_layers) {
    if (l >= dense.layers.size()) throw ConfigError("upcycle: layer " + std::to_string(l) + " does not exist");
    if (!dense.layers[l].mlp) throw ConfigError("upcycle: layer " + std::to_string(l) + " is already MoE");
    if (!chosen.insert(l).second) throw ConfigError("upcycle: layer " + std::to_string(l) + " listed twice");
  }
  EncoderModel m = dense.clone();
  if (m.config.layer_kinds.empty()) m.config.layer_kinds.assign(m.config.num_layers, LayerKind::dense());
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> noise(0.0, opts.router_noise > 0.0 ? opts.router_noise : 1.0);
  const std::size_t H = m.config.hidden_dim;
  for (auto l : chosen) {
    auto& L = m.layers[l];
    MoeParams moe;
    std::vector<double> router(H * opts.experts, 0.0);
    if (opts.router_noise > 0.0)
      for (auto& v : router) v = noise(rng);
    moe.router = Tensor({H, opts.experts}, std::move(router), true);
    moe.top_k = opts.top_k;
    for (std::size_t e = 0; e < opts.experts; ++e) moe.experts.push_back(L.mlp->clone());
    L.moe = std::move(moe);
    L.mlp.reset();
    m.config.layer_kinds[l] = LayerKind::moe(opts.experts, opts.top_k);
  }
  m.config.validate();
  return m;
}

}  // namespace moembed
