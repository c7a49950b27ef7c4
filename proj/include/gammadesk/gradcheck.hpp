#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "gammadesk/autodiff.hpp"

namespace gammadesk {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Builds a scalar loss on the given tape, watching parameters from the set
/// passed to gradient_check.
using LossFn = std::function<Var(Tape&)>;

/// Compares tape gradients with central differences for every scalar of
/// every parameter in `params`; error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
/// Throws NumericError naming the parameter and element when the loss is not finite.
GradCheckReport gradient_check(const LossFn& loss, ParameterSet& params, double epsilon = 1e-5);

}  // namespace gammadesk
