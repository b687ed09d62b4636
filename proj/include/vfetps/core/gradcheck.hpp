#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "vfetps/core/errors.hpp"
#include "vfetps/core/tensor.hpp"

namespace vfetps {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Added to every analytic gradient entry before comparison. Only used to
  // prove the harness catches a broken backward pass.
  double corrupt_analytic = 0.0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences,
/// coordinate by coordinate over every tensor in `params`.
///
/// Relative error per coordinate is |a - n| / max(1e-12, |a| + |n|). The loss
/// function must rebuild the graph from the current parameter values on every
/// call; two evaluations that disagree raise OracleInvalidError.
template <class T>
GradCheckResult finite_difference_check(const std::function<Tensor<T>()>& loss_fn,
                                        std::vector<Tensor<T>> params, GradCheckOptions opts = {}) {
  if (!(opts.step > 0.0)) throw ConfigError("finite difference step must be positive");
  const auto first = loss_fn();
  const auto second = loss_fn();
  if (first.item() != second.item()) {
    throw OracleInvalidError("loss function is not deterministic: " + std::to_string(first.item()) + " vs " +
                             std::to_string(second.item()));
  }

  for (auto& p : params) p.zero_grad();
  auto loss = loss_fn();
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad()) analytic.emplace_back(p.grad().begin(), p.grad().end());
    else analytic.emplace_back(p.numel(), T(0));
  }

  GradCheckResult result;
  const T h = static_cast<T>(opts.step);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + h;
      const double up = static_cast<double>(loss_fn().item());
      values[i] = saved - h;
      const double down = static_cast<double>(loss_fn().item());
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = static_cast<double>(analytic[pi][i]) + opts.corrupt_analytic;
      const double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      ++result.coordinates;
      if (rel > result.max_rel_error || result.coordinates == 1) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        result.worst_param = pi;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace vfetps
