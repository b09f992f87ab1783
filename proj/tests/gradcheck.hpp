// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference oracle for parameter gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "priormap/tensor.hpp"

namespace pmtest {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "name[index]"
  std::size_t checked = 0;
};

/// `build` records the loss on a fresh tape. Relative error uses a
/// denominator floored at 1e-6.
inline GradCheckResult grad_check(priormap::ParamStore& ps,
                                  const std::function<priormap::Var(priormap::Tape&, const priormap::ParamStore&)>& build,
                                  double h = 1e-5) {
  using namespace priormap;
  ps.zero_grads();
  {
    Tape t;
    Var loss = build(t, ps);
    t.backward(loss, ps);
  }
  auto eval = [&] {
    Tape t;
    return build(t, ps).value()[0];
  };
  GradCheckResult r;
  for (auto& [name, p] : ps) {
    auto& v = p.value.storage();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = eval();
      v[i] = orig - h;
      const double down = eval();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      if (rel > r.max_rel_err) {
        r.max_rel_err = rel;
        r.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                  " numeric=" + std::to_string(numeric);
      }
      ++r.checked;
    }
  }
  ps.zero_grads();
  return r;
}

}  // namespace pmtest
