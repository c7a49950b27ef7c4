#pragma once

#include <array>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "gammadesk/tensor.hpp"

namespace gammadesk {

/// A named trainable tensor owned by a model.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Ordered, name-unique collection of parameters. Element addresses are
/// stable as long as no parameter is added after a tape starts watching them.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);

  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const noexcept;

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

/// Gradient per watched parameter, keyed by parameter identity.
using Gradients = std::unordered_map<const Parameter*, Tensor>;

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  bool needs_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// View handed to a node's backward rule. `grad_in(i)` is null when input i
/// does not lead to any watched parameter; otherwise it points at a
/// zero-initialized accumulator that the rule adds into.
class BackwardContext {
 public:
  const Tensor& grad_out() const { return *grad_out_; }
  const Tensor& output() const { return *output_; }
  const Tensor& input(std::size_t i) const { return *inputs_[i]; }
  Tensor* grad_in(std::size_t i) const { return grads_[i]; }

 private:
  friend class Tape;
  const Tensor* grad_out_ = nullptr;
  const Tensor* output_ = nullptr;
  std::vector<const Tensor*> inputs_;
  std::vector<Tensor*> grads_;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

/// Reverse-mode tape. Rebuilt for every forward pass; nodes are appended in
/// evaluation order so a reverse sweep is a valid topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf bound to a parameter; watching the same parameter twice returns the same node.
  /// Frozen parameters come back as constants and get no gradient entry.
  Var watch(Parameter& param);

  /// Treat every parameter of `params` as a constant on this tape.
  void freeze(const ParameterSet& params);
  /// Treat all parameters as constants (pure inference).
  void freeze_all() noexcept { freeze_all_ = true; }
  /// Non-parameter leaf whose gradient is reported by `leaf_gradient` after backward.
  Var variable(Tensor value);

  /// Appends an operation node. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Runs the reverse sweep from a single-element loss. Every watched
  /// parameter gets exactly one entry (zeros when unreachable from the loss).
  Gradients backward(const Var& loss);

  /// Gradient of a `variable` leaf from the last backward pass.
  const Tensor& leaf_gradient(const Var& v) const;

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  std::deque<Node> nodes_;  // deque: value() references stay valid while recording
  std::unordered_map<const Parameter*, std::size_t> watched_;
  std::unordered_map<const Parameter*, std::size_t> frozen_nodes_;
  std::unordered_set<const Parameter*> frozen_;
  bool freeze_all_ = false;
  std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must live on the same tape.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
/// a * s where s is a single-element Var (learnable gains).
Var scale_by(const Var& a, const Var& s);
/// Adds b[C] along axis 1 of a [N, C, ...].
Var add_channel_bias(const Var& a, const Var& b);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);

Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var tanh_act(const Var& a);
Var sigmoid(const Var& a);
Var absolute(const Var& a);
/// log(clamp(a, lo, hi)); clamped elements get zero gradient and bump `saturations`.
Var log_clamped(const Var& a, double lo, double hi, std::size_t* saturations = nullptr);

Var sum(const Var& a);
Var mean(const Var& a);

/// Numerically stable softmax along `axis` (max-subtracted).
Var softmax(const Var& a, std::size_t axis);

/// Cross-correlation of x [N, Cin, H, W] with w [Cout, Cin, kH, kW]; zero padding.
Var conv2d(const Var& x, const Var& w, std::size_t stride, std::size_t padding);
/// Mirror padding of NCHW input by `pad` on every side, edge excluded
/// (abc -> cb|abc|ba). Requires pad < H and pad < W.
Var reflect_pad(const Var& x, std::size_t pad);
Var upsample_nearest2x(const Var& x);
/// Per-sample, per-channel normalization without affine parameters.
Var instance_norm(const Var& x, double eps = 1e-5);

/// Region of interest in input-image coordinates (x_min, y_min, x_max, y_max).
using RoiBox = std::array<double, 4>;

/// Quantization-free bilinear RoI pooling over features [1, C, H, W].
/// Output [R, C, out_h, out_w]; each bin averages sampling_ratio^2 samples.
/// Gradients flow to the features only.
Var roi_align(const Var& features, const std::vector<RoiBox>& rois, std::size_t out_h, std::size_t out_w,
              double spatial_scale, std::size_t sampling_ratio = 2, bool aligned = true);

/// sum_i w_i * BCE(sigmoid(z_i), t_i) / normalizer.
Var bce_with_logits(const Var& logits, const Tensor& targets, const Tensor& weights, double normalizer);
/// sum_i w_i * smoothL1(p_i - t_i; beta) / normalizer.
Var smooth_l1(const Var& pred, const Tensor& target, const Tensor& weights, double beta, double normalizer);
/// sum over rows with label >= 0 of -log softmax(z)[label], divided by normalizer.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels, double normalizer);

/// Non-differentiable copy of a node's value onto the same tape.
Var detach(const Var& a);

// Plain-tensor kernels shared by the ops above and by reference tests.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d_forward(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding);

}  // namespace gammadesk
