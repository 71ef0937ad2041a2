#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moembed/error.hpp"

namespace moembed {

/// MLP flavour of one transformer block. experts == 0 means a dense MLP.
struct LayerKind {
  std::size_t experts = 0;
  std::size_t top_k = 0;

  static LayerKind dense() { return {}; }
  static LayerKind moe(std::size_t experts, std::size_t top_k) { return {experts, top_k}; }
  bool is_moe() const { return experts > 0; }
  bool operator==(const LayerKind&) const = default;
};

struct EncoderConfig {
  std::size_t vocab_size = 2048;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_dim = 256;
  std::size_t max_seq_len = 128;
  double rope_base = 10000.0;
  std::vector<LayerKind> layer_kinds;      // one per layer; empty means all dense
  std::vector<std::size_t> output_dims;    // Matryoshka dims, descending

  std::size_t head_dim() const { return hidden_dim / num_heads; }

  const LayerKind& kind(std::size_t layer) const {
    static const LayerKind kDense{};
    return layer_kinds.empty() ? kDense : layer_kinds.at(layer);
  }

  std::size_t moe_layer_count() const {
    std::size_t n = 0;
    for (const auto& k : layer_kinds) n += k.is_moe();
    return n;
  }

  /// Dims accepted by truncation: the configured ones plus the full width.
  bool allows_dim(std::size_t dim) const {
    if (dim == hidden_dim) return true;
    for (auto d : output_dims)
      if (d == dim) return true;
    return false;
  }

  void validate() const {
    if (vocab_size < 6) throw ConfigError("vocab_size must cover the reserved tokens");
    if (hidden_dim == 0 || num_layers == 0 || num_heads == 0 || mlp_dim == 0 || max_seq_len == 0) {
      throw ConfigError("encoder dimensions must be positive");
    }
    if (hidden_dim % num_heads != 0) {
      throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    if (head_dim() % 2 != 0) {
      throw ConfigError("head_dim " + std::to_string(head_dim()) + " must be even for rotary embedding");
    }
    if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
    if (!layer_kinds.empty() && layer_kinds.size() != num_layers) {
      throw ConfigError("layer_kinds has " + std::to_string(layer_kinds.size()) + " entries for " +
                        std::to_string(num_layers) + " layers");
    }
    for (std::size_t i = 0; i < layer_kinds.size(); ++i) {
      const auto& k = layer_kinds[i];
      if (k.is_moe() && (k.top_k < 1 || k.top_k > k.experts)) {
        throw ConfigError("layer " + std::to_string(i) + ": top_k " + std::to_string(k.top_k) +
                          " must lie in [1, " + std::to_string(k.experts) + "]");
      }
    }
    for (std::size_t i = 0; i < output_dims.size(); ++i) {
      if (output_dims[i] == 0 || output_dims[i] > hidden_dim) {
        throw ConfigError("output_dims entries must lie in [1, hidden_dim]");
      }
      if (i > 0 && output_dims[i] >= output_dims[i - 1]) {
        throw ConfigError("output_dims must be strictly descending");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const LayerKind& k) {
  if (k.is_moe()) {
    j = {{"kind", "moe"}, {"experts", k.experts}, {"top_k", k.top_k}};
  } else {
    j = {{"kind", "dense"}};
  }
}

inline void from_json(const nlohmann::json& j, LayerKind& k) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "dense") {
    k = LayerKind::dense();
  } else if (kind == "moe") {
    k = LayerKind::moe(j.at("experts").get<std::size_t>(), j.at("top_k").get<std::size_t>());
  } else {
    throw ConfigError("unknown layer kind '" + kind + "'");
  }
}

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"vocab_size", c.vocab_size},   {"hidden_dim", c.hidden_dim},
       {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
       {"mlp_dim", c.mlp_dim},         {"max_seq_len", c.max_seq_len},
       {"rope_base", c.rope_base},     {"layer_kinds", c.layer_kinds},
       {"output_dims", c.output_dims}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  static const char* kKeys[] = {"vocab_size", "hidden_dim",  "num_layers",  "num_heads", "mlp_dim",
                                "max_seq_len", "rope_base", "layer_kinds", "output_dims"};
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    if (!known) throw ConfigError("unknown key 'encoder." + key + "'");
  }
  EncoderConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.mlp_dim = j.value("mlp_dim", d.mlp_dim);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.layer_kinds = j.value("layer_kinds", std::vector<LayerKind>{});
  c.output_dims = j.value("output_dims", std::vector<std::size_t>{});
}

}  // namespace moembed
