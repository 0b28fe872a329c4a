// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite differences over every head weight, used as the oracle for
// analytic gradients. Test-only.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rr/head.hpp"

namespace rr::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdRelTol = 1e-6;
// Probes of hidden units whose pre-activation lies this close to the ReLU
// kink are skipped: a +-step perturbation could cross it.
inline constexpr double kKinkMargin = 1e-4;
// Denominator floor of the relative error. Central differences at step 1e-5
// carry ~1e-11 absolute round-off on an O(1) objective, so near-zero
// gradient entries are compared on this absolute scale instead.
inline constexpr double kRelFloor = 1e-4;

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelFloor});
}

struct GradCheckResult {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;
};

/// Pre-activation magnitudes of hidden units, minimum over the given inputs.
inline std::vector<double> min_abs_preactivation(const ProjectionHead& head,
                                                 const std::vector<std::vector<double>>& inputs) {
  std::vector<double> m(head.h, INFINITY);
  for (const auto& v : inputs) {
    auto t = forward_trace(head, v);
    for (std::size_t j = 0; j < head.h; ++j) m[j] = std::min(m[j], std::abs(t.pre[j]));
  }
  return m;
}

/// Compares grads with central differences of objective(head) over every
/// weight. kink_inputs are the image-side rows whose hidden units matter.
inline GradCheckResult check_gradients(ProjectionHead head, const HeadGradients& grads,
                                       const std::function<double(const ProjectionHead&)>& objective,
                                       const std::vector<std::vector<double>>& kink_inputs) {
  static const char* names[] = {"W1", "b1", "W2", "b2"};
  const auto pre = min_abs_preactivation(head, kink_inputs);
  GradCheckResult res;
  auto params = tensors(head);
  auto analytic = tensors(grads);
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const bool first_layer = t < 2;
      const std::size_t unit = t == 0 ? i / head.d : i;
      if (first_layer && pre[unit] < kKinkMargin) {
        ++res.skipped;
        continue;
      }
      const double old = params[t][i];
      params[t][i] = old + kFdStep;
      const double up = objective(head);
      params[t][i] = old - kFdStep;
      const double down = objective(head);
      params[t][i] = old;
      const double numeric = (up - down) / (2 * kFdStep);
      const double e = rel_error(analytic[t][i], numeric);
      ++res.checked;
      if (e > res.max_rel || std::isnan(e)) {
        res.max_rel = std::isnan(e) ? INFINITY : e;
        std::ostringstream os;
        os << names[t] << "[" << i << "] analytic=" << std::scientific << analytic[t][i] << " numeric=" << numeric;
        res.worst = os.str();
      }
    }
  }
  return res;
}

}  // namespace rr::testing
