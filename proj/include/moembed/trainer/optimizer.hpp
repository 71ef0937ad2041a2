#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "moembed/numeric/grad_check.hpp"
#include "moembed/numeric/tensor.hpp"
#include "moembed/trainer/config.hpp"

namespace moembed {

/// Linear warmup from 0 to peak_lr, then linear or cosine decay to 0 at
/// total_steps. Zero past total_steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  const std::size_t total = cfg.total_steps;
  if (step > total) return 0.0;
  if (step < cfg.warmup_steps) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (total == cfg.warmup_steps) return cfg.peak_lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total - cfg.warmup_steps);
  if (cfg.schedule == Schedule::Linear) return cfg.peak_lr * (1.0 - progress);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Global L2 norm of all gradients; parameters without a gradient count as zero.
inline double global_grad_norm(const std::vector<NamedTensor>& params) {
  double s = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) s += g * g;
  }
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
inline double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      Tensor h = t;
      for (double& g : h.mutable_grad()) g *= f;
    }
  }
  return norm;
}

/// Adam with decoupled weight decay. Decay applies to matrices only.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const std::vector<NamedTensor>& params) {
    for (const auto& [name, t] : params) {
      names_.push_back(name);
      m_.push_back(Tensor::zeros(t.shape()));
      v_.push_back(Tensor::zeros(t.shape()));
    }
  }

  void step(const std::vector<NamedTensor>& params, double lr, const TrainConfig& cfg) {
    if (params.size() != m_.size()) throw Error("optimizer state does not match the parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor p = params[i].second;
      auto w = p.mutable_data();
      auto m = m_[i].mutable_data();
      auto v = v_[i].mutable_data();
      const bool decay = p.rank() >= 2 && cfg.weight_decay > 0.0;
      const bool has = p.has_grad();
      std::span<const double> g = has ? p.grad() : std::span<const double>{};
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = has ? g[j] : 0.0;
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
        double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.adam_eps);
        if (decay) update += cfg.weight_decay * w[j];
        w[j] -= lr * update;
      }
    }
  }

  std::size_t steps() const { return t_; }

  /// Moments as named tensors ("adam.m.<param>", "adam.v.<param>").
  std::vector<NamedTensor> state_tensors() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      out.emplace_back("adam.m." + names_[i], m_[i]);
      out.emplace_back("adam.v." + names_[i], v_[i]);
    }
    return out;
  }

  static AdamW from_state(const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& state,
                          std::size_t steps) {
    AdamW opt(params);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : state) by_name[name] = &t;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (auto* slot : {&opt.m_[i], &opt.v_[i]}) {
        const std::string key = std::string(slot == &opt.m_[i] ? "adam.m." : "adam.v.") + opt.names_[i];
        auto it = by_name.find(key);
        if (it == by_name.end()) throw InputError("optimizer state misses '" + key + "'");
        if (it->second->shape() != slot->shape()) throw InputError("optimizer state '" + key + "' has the wrong shape");
        *slot = it->second->detach(false);
      }
    }
    opt.t_ = steps;
    return opt;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace moembed
