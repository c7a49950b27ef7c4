#include "gammadesk/optim.hpp"

#include <cmath>

#include "gammadesk/errors.hpp"

namespace gammadesk {

namespace {

const Tensor& gradient_for(const Parameter& p, const Gradients& grads) {
  auto it = grads.find(&p);
  if (it == grads.end()) throw ContractError("no gradient for parameter '" + p.name + "'");
  if (it->second.shape() != p.value.shape())
    throw ContractError("gradient shape " + shape_str(it->second.shape()) + " does not match parameter '" + p.name +
                        "' " + shape_str(p.value.shape()));
  return it->second;
}

}  // namespace

void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state) {
  for (const auto& p : params) gradient_for(p, grads);
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros(p.value.shape()));
      state.v.push_back(Tensor::zeros(p.value.shape()));
    }
  }
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    const Tensor& g = gradient_for(p, grads);
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (m.shape() != p.value.shape()) throw ContractError("Adam state does not match parameter '" + p.name + "'");
    for (std::size_t k = 0; k < g.numel(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p.value[k] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void sgd_step(ParameterSet& params, const Gradients& grads, SgdState& state) {
  for (const auto& p : params) gradient_for(p, grads);
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.push_back(Tensor::zeros(p.value.shape()));
  }
  ++state.step;
  const auto& c = state.config;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    const Tensor& g = gradient_for(p, grads);
    Tensor& vel = state.velocity[i];
    for (std::size_t k = 0; k < g.numel(); ++k) {
      vel[k] = c.momentum * vel[k] + g[k] + c.weight_decay * p.value[k];
      p.value[k] -= c.lr * vel[k];
    }
  }
}

}  // namespace gammadesk
