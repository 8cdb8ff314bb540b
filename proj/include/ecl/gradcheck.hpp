#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ecl/tensor.hpp"

namespace ecl {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // number of scalar partials compared
  bool passed = false;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor for the relative error, so partials that are
  // analytically ~0 are compared absolutely at this scale.
  double floor = 1e-5;
};

/// Relative discrepancy between an analytic and a numeric partial.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares backward() against central differences for every element of
/// every input that requires grad. `loss_fn` must rebuild the graph from
/// scratch on each call and be deterministic.
inline GradcheckResult check_gradients(std::string name, std::span<const Tensor> inputs,
                                       const std::function<Tensor()>& loss_fn,
                                       const GradcheckOptions& opt = {}) {
  GradcheckResult result;
  result.name = std::move(name);
  for (const auto& t : inputs) t.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) {
    if (t.requires_grad() && t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }
  NoGrad no_grad;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    if (!inputs[a].requires_grad()) continue;
    auto values = inputs[a].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opt.step;
      const double plus = loss_fn().item();
      values[i] = saved - opt.step;
      const double minus = loss_fn().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * opt.step);
      result.max_rel_error =
          std::max(result.max_rel_error, relative_error(analytic[a][i], numeric, opt.floor));
      ++result.checked;
    }
  }
  result.passed = result.max_rel_error < opt.tolerance && std::isfinite(result.max_rel_error);
  return result;
}

}  // namespace ecl
