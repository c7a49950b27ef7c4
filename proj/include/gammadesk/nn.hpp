#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "gammadesk/autodiff.hpp"
#include "gammadesk/rng.hpp"

namespace gammadesk::nn {

/// Tensor of i.i.d. N(0, stddev^2) draws.
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

/// Convolution with optional bias; parameters referenced by index into the
/// owning ParameterSet so models stay copyable.
struct Conv2d {
  std::size_t weight = 0;
  std::optional<std::size_t> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool reflect = false;  ///< mirror padding instead of zeros

  Var operator()(Tape& tape, ParameterSet& params, const Var& x) const;
};

Conv2d make_conv(ParameterSet& params, const std::string& name, std::size_t in_ch, std::size_t out_ch,
                 std::size_t kernel, std::size_t stride, std::size_t padding, bool with_bias, double init_std,
                 Rng& rng);

/// y = x W^T + b for x [N, in], W [out, in].
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;

  Var operator()(Tape& tape, ParameterSet& params, const Var& x) const;
};

Linear make_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, double init_std,
                   Rng& rng);

}  // namespace gammadesk::nn
