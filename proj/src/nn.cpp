#include "gammadesk/nn.hpp"

namespace gammadesk::nn {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

Var Conv2d::operator()(Tape& tape, ParameterSet& params, const Var& x) const {
  Var y = reflect && padding > 0 ? conv2d(reflect_pad(x, padding), tape.watch(params[weight]), stride, 0)
                                  : conv2d(x, tape.watch(params[weight]), stride, padding);
  if (bias) y = add_channel_bias(y, tape.watch(params[*bias]));
  return y;
}

Conv2d make_conv(ParameterSet& params, const std::string& name, std::size_t in_ch, std::size_t out_ch,
                 std::size_t kernel, std::size_t stride, std::size_t padding, bool with_bias, double init_std,
                 Rng& rng) {
  Conv2d c;
  c.weight = params.add(name + ".weight", normal_tensor({out_ch, in_ch, kernel, kernel}, init_std, rng));
  if (with_bias) c.bias = params.add(name + ".bias", Tensor::zeros({out_ch}));
  c.stride = stride;
  c.padding = padding;
  return c;
}

Var Linear::operator()(Tape& tape, ParameterSet& params, const Var& x) const {
  return add_channel_bias(matmul(x, transpose(tape.watch(params[weight]))), tape.watch(params[bias]));
}

Linear make_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, double init_std,
                   Rng& rng) {
  Linear l;
  l.weight = params.add(name + ".weight", normal_tensor({out, in}, init_std, rng));
  l.bias = params.add(name + ".bias", Tensor::zeros({out}));
  return l;
}

}  // namespace gammadesk::nn
