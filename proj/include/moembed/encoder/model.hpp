#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "moembed/encoder/config.hpp"
#include "moembed/encoder/tokenizer.hpp"
#include "moembed/moe/moe.hpp"
#include "moembed/numeric/grad_check.hpp"
#include "moembed/numeric/tensor.hpp"

namespace moembed {

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerParams {
  Tensor norm1_gain, norm1_bias;
  AttentionParams attn;
  Tensor norm2_gain, norm2_bias;
  std::optional<MlpParams> mlp;  // dense layers
  std::optional<MoeParams> moe;  // MoE layers
};

/// Biencoder parameters. Shapes follow from `config` alone.
struct EncoderModel {
  EncoderConfig config;
  Tokenizer tokenizer;  // may be empty when ids are supplied directly
  Tensor token_embedding;  // [vocab x hidden]
  std::vector<LayerParams> layers;
  Tensor final_norm_gain, final_norm_bias;
  Tensor mlm_weight;  // [hidden x vocab]
  Tensor mlm_bias;    // [vocab]

  /// Every trainable tensor in a fixed order with a unique dotted name.
  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    out.emplace_back("embed.tokens", token_embedding);
    auto add_mlp = [&out](const std::string& pre, const MlpParams& m) {
      out.emplace_back(pre + ".in.weight", m.w_in);
      out.emplace_back(pre + ".in.bias", m.b_in);
      out.emplace_back(pre + ".out.weight", m.w_out);
      out.emplace_back(pre + ".out.bias", m.b_out);
    };
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const std::string pre = "layers." + std::to_string(l);
      out.emplace_back(pre + ".norm1.gain", L.norm1_gain);
      out.emplace_back(pre + ".norm1.bias", L.norm1_bias);
      out.emplace_back(pre + ".attn.q.weight", L.attn.wq);
      out.emplace_back(pre + ".attn.q.bias", L.attn.bq);
      out.emplace_back(pre + ".attn.k.weight", L.attn.wk);
      out.emplace_back(pre + ".attn.k.bias", L.attn.bk);
      out.emplace_back(pre + ".attn.v.weight", L.attn.wv);
      out.emplace_back(pre + ".attn.v.bias", L.attn.bv);
      out.emplace_back(pre + ".attn.o.weight", L.attn.wo);
      out.emplace_back(pre + ".attn.o.bias", L.attn.bo);
      out.emplace_back(pre + ".norm2.gain", L.norm2_gain);
      out.emplace_back(pre + ".norm2.bias", L.norm2_bias);
      if (L.mlp) add_mlp(pre + ".mlp", *L.mlp);
      if (L.moe) {
        out.emplace_back(pre + ".moe.router", L.moe->router);
        for (std::size_t e = 0; e < L.moe->experts.size(); ++e)
          add_mlp(pre + ".moe.experts." + std::to_string(e), L.moe->experts[e]);
      }
    }
    out.emplace_back("final_norm.gain", final_norm_gain);
    out.emplace_back("final_norm.bias", final_norm_bias);
    out.emplace_back("mlm_head.weight", mlm_weight);
    out.emplace_back("mlm_head.bias", mlm_bias);
    return out;
  }

  void zero_grad() const {
    for (auto& [name, t] : named_parameters()) {
      Tensor h = t;
      h.zero_grad();
    }
  }

  /// Deep copy with fresh parameter storage.
  EncoderModel clone() const {
    EncoderModel m;
    m.config = config;
    m.tokenizer = tokenizer;
    m.token_embedding = token_embedding.detach(true);
    for (const auto& L : layers) {
      LayerParams c;
      c.norm1_gain = L.norm1_gain.detach(true);
      c.norm1_bias = L.norm1_bias.detach(true);
      const auto& a = L.attn;
      c.attn = {a.wq.detach(true), a.bq.detach(true), a.wk.detach(true), a.bk.detach(true),
                a.wv.detach(true), a.bv.detach(true), a.wo.detach(true), a.bo.detach(true)};
      c.norm2_gain = L.norm2_gain.detach(true);
      c.norm2_bias = L.norm2_bias.detach(true);
      if (L.mlp) c.mlp = L.mlp->clone();
      if (L.moe) c.moe = L.moe->clone();
      m.layers.push_back(std::move(c));
    }
    m.final_norm_gain = final_norm_gain.detach(true);
    m.final_norm_bias = final_norm_bias.detach(true);
    m.mlm_weight = mlm_weight.detach(true);
    m.mlm_bias = mlm_bias.detach(true);
    return m;
  }
};

namespace detail {

inline Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

inline MlpParams init_mlp(const EncoderConfig& c, std::mt19937_64& rng, double out_scale) {
  return {random_normal({c.hidden_dim, c.mlp_dim}, 1.0 / std::sqrt(double(c.hidden_dim)), rng),
          Tensor::zeros({c.mlp_dim}, true),
          random_normal({c.mlp_dim, c.hidden_dim}, out_scale / std::sqrt(double(c.mlp_dim)), rng),
          Tensor::zeros({c.hidden_dim}, true)};
}

}  // namespace detail

/// Randomly initialized model. MoE layers start with distinct random
/// experts and a zero router.
inline EncoderModel init_encoder(const EncoderConfig& config, std::uint64_t seed,
                                 Tokenizer tokenizer = {}) {
  config.validate();
  if (!tokenizer.empty() && tokenizer.size() != config.vocab_size) {
    throw ConfigError("tokenizer has " + std::to_string(tokenizer.size()) + " tokens but vocab_size is " +
                      std::to_string(config.vocab_size));
  }
  std::mt19937_64 rng(seed);
  const std::size_t H = config.hidden_dim;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(H));
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.num_layers));
  EncoderModel m;
  m.config = config;
  m.tokenizer = std::move(tokenizer);
  m.token_embedding = detail::random_normal({config.vocab_size, H}, 1.0, rng);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerParams L;
    L.norm1_gain = Tensor::full({H}, 1.0, true);
    L.norm1_bias = Tensor::zeros({H}, true);
    L.attn.wq = detail::random_normal({H, H}, w_std, rng);
    L.attn.bq = Tensor::zeros({H}, true);
    L.attn.wk = detail::random_normal({H, H}, w_std, rng);
    L.attn.bk = Tensor::zeros({H}, true);
    L.attn.wv = detail::random_normal({H, H}, w_std, rng);
    L.attn.bv = Tensor::zeros({H}, true);
    L.attn.wo = detail::random_normal({H, H}, w_std * out_scale, rng);
    L.attn.bo = Tensor::zeros({H}, true);
    L.norm2_gain = Tensor::full({H}, 1.0, true);
    L.norm2_bias = Tensor::zeros({H}, true);
    const auto& kind = config.kind(l);
    if (kind.is_moe()) {
      MoeParams moe;
      moe.router = Tensor::zeros({H, kind.experts}, true);
      moe.top_k = kind.top_k;
      for (std::size_t e = 0; e < kind.experts; ++e) moe.experts.push_back(detail::init_mlp(config, rng, out_scale));
      L.moe = std::move(moe);
    } else {
      L.mlp = detail::init_mlp(config, rng, out_scale);
    }
    m.layers.push_back(std::move(L));
  }
  m.final_norm_gain = Tensor::full({H}, 1.0, true);
  m.final_norm_bias = Tensor::zeros({H}, true);
  m.mlm_weight = detail::random_normal({H, config.vocab_size}, w_std, rng);
  m.mlm_bias = Tensor::zeros({config.vocab_size}, true);
  return m;
}

/// Total number of scalar parameters.
inline std::size_t parameter_count(const EncoderModel& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : m.named_parameters()) n += t.numel();
  return n;
}

/// Parameters touched by one token's forward pass: everything outside the
/// expert banks plus k/E of each bank. The MLM head is excluded because
/// embedding inference does not use it.
inline double active_parameter_count(const EncoderModel& m) {
  double n = 0.0;
  for (const auto& [name, t] : m.named_parameters()) {
    if (name.rfind("mlm_head.", 0) == 0) continue;
    if (name.find(".moe.experts.") != std::string::npos) continue;
    n += static_cast<double>(t.numel());
  }
  for (const auto& L : m.layers) {
    if (!L.moe) continue;
    double bank = 0.0;
    for (const auto& e : L.moe->experts) bank += static_cast<double>(e.parameter_count());
    n += bank * static_cast<double>(L.moe->top_k) / static_cast<double>(L.moe->num_experts());
  }
  return n;
}

}  // namespace moembed
