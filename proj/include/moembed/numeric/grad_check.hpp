#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "moembed/numeric/tensor.hpp"

namespace moembed {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // 0 checks every element; otherwise a seeded random subset per tensor.
  std::size_t max_elements_per_tensor = 0;
  std::uint64_t seed = 0;
  // Denominator floor so exactly-zero gradients are judged absolutely.
  double scale_floor = 1e-6;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  std::string failure;  // set when f threw

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return failure.empty() && max_rel_error() <= tolerance; }
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, one report entry per parameter tensor.
///
/// The relative error of a tensor is max|analytic - numeric| divided by
/// max(max|analytic|, max|numeric|, scale_floor). `f` must rebuild its
/// graph on every call and depend on `params` only through their values.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                                  const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  try {
    for (auto& [name, p] : params) {
      p.set_requires_grad(true);
      p.zero_grad();
    }
    Tensor loss = f();
    backward(loss);

    std::mt19937_64 rng(opts.seed);
    for (auto& [name, p] : params) {
      GradCheckEntry entry;
      entry.name = name;
      std::vector<double> analytic(p.numel(), 0.0);
      if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

      std::vector<std::size_t> idx(p.numel());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      if (opts.max_elements_per_tensor > 0 && idx.size() > opts.max_elements_per_tensor) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(opts.max_elements_per_tensor);
      }

      double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
      auto values = p.mutable_data();
      for (std::size_t i : idx) {
        const double orig = values[i];
        values[i] = orig + opts.step;
        const double up = f().item();
        values[i] = orig - opts.step;
        const double down = f().item();
        values[i] = orig;
        const double numeric = (up - down) / (2.0 * opts.step);
        max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
        max_a = std::max(max_a, std::abs(analytic[i]));
        max_n = std::max(max_n, std::abs(numeric));
      }
      entry.checked = idx.size();
      entry.max_abs_error = max_diff;
      entry.max_rel_error = max_diff / std::max({max_a, max_n, opts.scale_floor});
      report.entries.push_back(std::move(entry));
    }
  } catch (const std::exception& e) {
    report.failure = e.what();
  }
  return report;
}

}  // namespace moembed
