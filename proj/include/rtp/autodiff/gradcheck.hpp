#pragma once

#include "rtp/autodiff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace rtp {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares tape gradients of a scalar-valued closure against central
/// finite differences over every element of every input. The relative
/// error uses max(|analytic|, |numeric|, 1e-8) as denominator.
inline GradcheckResult gradcheck(const std::function<Tensor<double>(Tape<double>&)>& fn,
                                 std::vector<Tensor<double>> inputs, double eps = 1e-5) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }
  Tape<double> tape;
  tape.backward(fn(tape));
  std::vector<Vector<double>> analytic;
  for (auto& in : inputs) analytic.push_back(in.has_grad() ? in.grad() : Vector<double>::Zero(in.size()));

  Tape<double> probe = Tape<double>::inference();
  auto eval = [&]() {
    probe.reset();
    return fn(probe).item();
  };

  GradcheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& vals = inputs[i].values();
    for (Index j = 0; j < vals.size(); ++j) {
      const double saved = vals[j];
      vals[j] = saved + eps;
      const double fp = eval();
      vals[j] = saved - eps;
      const double fm = eval();
      vals[j] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error) result = {rel, i, j, a, numeric};
    }
  }
  return result;
}

}  // namespace rtp
