#pragma once

#include <functional>
#include <string>

#include "ivf/nn/params.hpp"

namespace ivf::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]"
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Builds a scalar loss from parameters bound on a fresh tape.
using LossBuilder = std::function<Var<double>(Tape<double>&, const BoundParams<double>&)>;

// Central differences against tape gradients for every element of every parameter;
// relative error |a - n| / max(|a|, |n|, floor). The floor keeps gradients below the
// difference quotient's roundoff level from dominating.
GradCheckResult grad_check(const LossBuilder& loss, const ParamStore<double>& params, double eps = 1e-6,
                           double floor = 1e-8);

// Single-input convenience form: f maps a leaf variable to a scalar.
GradCheckResult grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                           double eps = 1e-6, double floor = 1e-8);

}  // namespace ivf::nn
