#pragma once

#include <cstdint>
#include <vector>

#include "gammadesk/autodiff.hpp"

namespace gammadesk {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators aligned with a ParameterSet by index.
struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

/// Bias-corrected Adam update of every parameter in `params`. Throws
/// ContractError when a parameter has no gradient or a mismatched one.
void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state);

struct SgdConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

struct SgdState {
  SgdConfig config;
  std::vector<Tensor> velocity;
  std::uint64_t step = 0;
};

/// Momentum SGD with L2 weight decay: v = mu*v + (g + wd*p); p -= lr*v.
void sgd_step(ParameterSet& params, const Gradients& grads, SgdState& state);

}  // namespace gammadesk
