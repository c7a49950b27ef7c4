#include "gammadesk/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include <Eigen/Core>

#include "gammadesk/errors.hpp"

namespace gammadesk {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void add_into(Tensor& acc, const Tensor& g) {
  double* a = acc.ptr();
  const double* b = g.ptr();
  for (std::size_t i = 0, n = acc.numel(); i < n; ++i) a[i] += b[i];
}

Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw ContractError("operation on an invalid Var");
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
  return a.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Elementwise unary op where the local derivative is a function of (x, y).
template <class F, class D>
Var unary(const Var& a, F f, D df) {
  const Tensor& x = a.value();
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = f(x[i]);
  return a.tape().record(std::move(y), {a}, [df](const BackwardContext& ctx) {
    Tensor* gx = ctx.grad_in(0);
    if (!gx) return;
    const Tensor& x = ctx.input(0);
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.grad_out();
    for (std::size_t i = 0; i < x.numel(); ++i) (*gx)[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterSet

std::size_t ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(true);
  params_.push_back(Parameter{std::move(name), std::move(value)});
  return params_.size() - 1;
}

Parameter& ParameterSet::get(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

const Parameter& ParameterSet::get(std::string_view name) const {
  return const_cast<ParameterSet*>(this)->get(name);
}

bool ParameterSet::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an invalid Var");
  return tape_->value(id_);
}

bool Var::needs_grad() const { return tape_ && tape_->needs_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

void Tape::freeze(const ParameterSet& params) {
  for (const auto& p : params) frozen_.insert(&p);
}

Var Tape::watch(Parameter& param) {
  if (freeze_all_ || frozen_.count(&param)) {
    if (auto it = frozen_nodes_.find(&param); it != frozen_nodes_.end()) return Var(this, it->second);
    Var c = constant(param.value);
    frozen_nodes_.emplace(&param, c.id_);
    return c;
  }
  if (auto it = watched_.find(&param); it != watched_.end()) return Var(this, it->second);
  nodes_.push_back(Node{param.value, {}, {}, &param, true});
  watched_.emplace(&param, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape_ != this) throw ContractError("input recorded on a different tape");
    node.inputs.push_back(in.id_);
    node.needs_grad = node.needs_grad || nodes_[in.id_].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw ContractError("loss recorded on a different tape");
  if (nodes_[loss.id_].value.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id_].value.shape()));

  grads_.assign(nodes_.size(), Tensor());
  grads_[loss.id_] = Tensor::full(nodes_[loss.id_].value.shape(), 1.0);

  BackwardContext ctx;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || grads_[id].empty()) continue;
    ctx.grad_out_ = &grads_[id];
    ctx.output_ = &node.value;
    ctx.inputs_.clear();
    ctx.grads_.clear();
    for (auto in : node.inputs) {
      ctx.inputs_.push_back(&nodes_[in].value);
      if (nodes_[in].needs_grad) {
        if (grads_[in].empty()) grads_[in] = Tensor::zeros(nodes_[in].value.shape());
        ctx.grads_.push_back(&grads_[in]);
      } else {
        ctx.grads_.push_back(nullptr);
      }
    }
    node.backward(ctx);
  }

  Gradients out;
  for (auto [param, id] : watched_) {
    Tensor g = grads_[id].empty() ? Tensor::zeros(nodes_[id].value.shape()) : grads_[id];
    out.emplace(param, std::move(g));
  }
  return out;
}

const Tensor& Tape::leaf_gradient(const Var& v) const {
  if (v.tape_ != this || v.id_ >= grads_.size())
    throw ContractError("leaf_gradient before backward or for a foreign Var");
  return grads_[v.id_];
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Var add(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  add_into(y, b.value());
  return t.record(std::move(y), {a, b}, [](const BackwardContext& ctx) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto* g = ctx.grad_in(i)) add_into(*g, ctx.grad_out());
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return t.record(std::move(y), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (auto* ga = ctx.grad_in(0)) add_into(*ga, g);
    if (auto* gb = ctx.grad_in(1))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return t.record(std::move(y), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (auto* ga = ctx.grad_in(0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * ctx.input(1)[i];
    if (auto* gb = ctx.grad_in(1))
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * ctx.input(0)[i];
  });
}

Var scale(const Var& a, double factor) {
  Tensor y = a.value();
  for (auto& v : y.data()) v *= factor;
  return a.tape().record(std::move(y), {a}, [factor](const BackwardContext& ctx) {
    if (auto* g = ctx.grad_in(0))
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += factor * ctx.grad_out()[i];
  });
}

Var add_scalar(const Var& a, double offset) {
  Tensor y = a.value();
  for (auto& v : y.data()) v += offset;
  return a.tape().record(std::move(y), {a}, [](const BackwardContext& ctx) {
    if (auto* g = ctx.grad_in(0)) add_into(*g, ctx.grad_out());
  });
}

Var scale_by(const Var& a, const Var& s) {
  Tape& t = same_tape(a, s);
  if (s.value().numel() != 1) throw ShapeError("scale_by: gain must be a single element");
  const double k = s.value()[0];
  Tensor y = a.value();
  for (auto& v : y.data()) v *= k;
  return t.record(std::move(y), {a, s}, [](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const Tensor& x = ctx.input(0);
    const double k = ctx.input(1)[0];
    if (auto* ga = ctx.grad_in(0))
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * k;
    if (auto* gs = ctx.grad_in(1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * x[i];
      (*gs)[0] += acc;
    }
  });
}

Var add_channel_bias(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const Shape& s = a.shape();
  if (s.size() < 2 || b.value().rank() != 1 || b.value().numel() != s[1])
    throw ShapeError("add_channel_bias: input " + shape_str(s) + " bias " + shape_str(b.shape()));
  const std::size_t n = s[0], c = s[1], inner = a.value().numel() / (n * c);
  Tensor y = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double* p = y.ptr() + (i * c + j) * inner;
      const double bj = b.value()[j];
      for (std::size_t k = 0; k < inner; ++k) p[k] += bj;
    }
  return t.record(std::move(y), {a, b}, [n, c, inner](const BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (auto* ga = ctx.grad_in(0)) add_into(*ga, g);
    if (auto* gb = ctx.grad_in(1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double* p = g.ptr() + (i * c + j) * inner;
          double acc = 0.0;
          for (std::size_t k = 0; k < inner; ++k) acc += p[k];
          (*gb)[j] += acc;
        }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul needs rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  if (b.dim(0) != q)
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor y = Tensor::zeros({p, r});
  MapMat(y.ptr(), p, r).noalias() = ConstMapMat(a.ptr(), p, q) * ConstMapMat(b.ptr(), q, r);
  return y;
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  Tensor y = matmul(a.value(), b.value());
  return t.record(std::move(y), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& A = ctx.input(0);
    const Tensor& B = ctx.input(1);
    const std::size_t p = A.dim(0), q = A.dim(1), r = B.dim(1);
    ConstMapMat G(ctx.grad_out().ptr(), p, r);
    if (auto* ga = ctx.grad_in(0)) MapMat(ga->ptr(), p, q).noalias() += G * ConstMapMat(B.ptr(), q, r).transpose();
    if (auto* gb = ctx.grad_in(1)) MapMat(gb->ptr(), q, r).noalias() += ConstMapMat(A.ptr(), p, q).transpose() * G;
  });
}

Var transpose(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2) throw ShapeError("transpose needs rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor y = Tensor::zeros({c, r});
  MapMat(y.ptr(), c, r) = ConstMapMat(x.ptr(), r, c).transpose();
  return a.tape().record(std::move(y), {a}, [r, c](const BackwardContext& ctx) {
    if (auto* g = ctx.grad_in(0)) MapMat(g->ptr(), r, c) += ConstMapMat(ctx.grad_out().ptr(), c, r).transpose();
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a}, [](const BackwardContext& ctx) {
    if (auto* g = ctx.grad_in(0)) add_into(*g, ctx.grad_out());
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var tanh_act(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var absolute(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var log_clamped(const Var& a, double lo, double hi, std::size_t* saturations) {
  if (!(lo > 0.0) || !(hi > lo)) throw ContractError("log_clamped: need 0 < lo < hi");
  const Tensor& x = a.value();
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double v = x[i];
    if (v < lo || v > hi) {
      v = std::clamp(v, lo, hi);
      if (saturations) ++*saturations;
    }
    y[i] = std::log(v);
  }
  return a.tape().record(std::move(y), {a}, [lo, hi](const BackwardContext& ctx) {
    Tensor* g = ctx.grad_in(0);
    if (!g) return;
    const Tensor& x = ctx.input(0);
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (x[i] >= lo && x[i] <= hi) (*g)[i] += ctx.grad_out()[i] / x[i];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [](const BackwardContext& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const double go = ctx.grad_out()[0];
      for (auto& v : g->data()) v += go;
    }
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().numel());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Tensor::scalar(s / n), {a}, [n](const BackwardContext& ctx) {
    if (auto* g = ctx.grad_in(0)) {
      const double go = ctx.grad_out()[0] / n;
      for (auto& v : g->data()) v += go;
    }
  });
}

Var softmax(const Var& a, std::size_t axis) {
  const Tensor& x = a.value();
  if (axis >= x.rank())
    throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);

  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= z;
    }

  return a.tape().record(std::move(y), {a}, [outer, inner, len](const BackwardContext& ctx) {
    Tensor* g = ctx.grad_in(0);
    if (!g) return;
    const Tensor& y = ctx.output();
    const Tensor& go = ctx.grad_out();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += go[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          (*g)[i] += y[i] * (go[i] - dot);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t col_rows() const { return cin * kh * kw; }
  std::size_t col_cols() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d needs NCHW input and OIHW kernel, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, padding, 0, 0};
  if (w.dim(1) != g.cin)
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding)
    throw ShapeError("conv2d kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

// Output columns [lo, hi) whose input column ox*s + j - p falls inside [0, w).
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t j) {
  const long w = static_cast<long>(g.w), pad = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  const long off = static_cast<long>(j) - pad;
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (w - 1 - off) < 0 ? 0 : (w - 1 - off) / s + 1;
  lo = std::min<long>(lo, static_cast<long>(g.ow));
  hi = std::clamp<long>(hi, lo, static_cast<long>(g.ow));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// cols[(c*kh + i)*kw + j, oy*ow + ox] = x[c, oy*s + i - p, ox*s + j - p]
void im2col(const double* x, const ConvGeom& g, double* cols) {
  const long h = static_cast<long>(g.h);
  const long pad = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * g.col_cols();
        const double* plane = x + c * g.h * g.w;
        const auto [lo, hi] = valid_columns(g, j);
        const long off = static_cast<long>(j) - pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * s + static_cast<long>(i) - pad;
          double* out = row + oy * g.ow;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + g.ow, 0.0);
            continue;
          }
          const double* src = plane + iy * static_cast<long>(g.w) + off;
          std::fill(out, out + lo, 0.0);
          if (s == 1) {
            std::copy(src + lo, src + hi, out + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = src[static_cast<long>(ox) * s];
          }
          std::fill(out + hi, out + g.ow, 0.0);
        }
      }
}

void col2im(const double* cols, const ConvGeom& g, double* dx) {
  const long h = static_cast<long>(g.h);
  const long pad = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * g.col_cols();
        double* plane = dx + c * g.h * g.w;
        const auto [lo, hi] = valid_columns(g, j);
        const long off = static_cast<long>(j) - pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * s + static_cast<long>(i) - pad;
          if (iy < 0 || iy >= h) continue;
          const double* in = row + oy * g.ow;
          double* dst = plane + iy * static_cast<long>(g.w) + off;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox) * s] += in[ox];
        }
      }
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
  const ConvGeom g = conv_geometry(x, w, stride, padding);
  Tensor y = Tensor::zeros({g.n, g.cout, g.oh, g.ow});
  ConstMapMat W(w.ptr(), g.cout, g.col_rows());
  std::vector<double> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* xn = x.ptr() + n * g.cin * g.h * g.w;
    const double* src = xn;
    if (!g.pointwise()) {
      im2col(xn, g, cols.data());
      src = cols.data();
    }
    MapMat(y.ptr() + n * g.cout * g.col_cols(), g.cout, g.col_cols()).noalias() =
        W * ConstMapMat(src, g.col_rows(), g.col_cols());
  }
  return y;
}

Var conv2d(const Var& x, const Var& w, std::size_t stride, std::size_t padding) {
  Tape& t = same_tape(x, w);
  Tensor y = conv2d_forward(x.value(), w.value(), stride, padding);
  return t.record(std::move(y), {x, w}, [stride, padding](const BackwardContext& ctx) {
    const Tensor& X = ctx.input(0);
    const Tensor& Wt = ctx.input(1);
    const ConvGeom g = conv_geometry(X, Wt, stride, padding);
    Tensor* gx = ctx.grad_in(0);
    Tensor* gw = ctx.grad_in(1);
    ConstMapMat W(Wt.ptr(), g.cout, g.col_rows());
    std::vector<double> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
    std::vector<double> dcols(gx && !g.pointwise() ? g.col_rows() * g.col_cols() : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
      ConstMapMat G(ctx.grad_out().ptr() + n * g.cout * g.col_cols(), g.cout, g.col_cols());
      const double* xn = X.ptr() + n * g.cin * g.h * g.w;
      if (gw) {
        const double* src = xn;
        if (!g.pointwise()) {
          im2col(xn, g, cols.data());
          src = cols.data();
        }
        MapMat(gw->ptr(), g.cout, g.col_rows()).noalias() +=
            G * ConstMapMat(src, g.col_rows(), g.col_cols()).transpose();
      }
      if (gx) {
        double* dxn = gx->ptr() + n * g.cin * g.h * g.w;
        if (g.pointwise()) {
          MapMat(dxn, g.col_rows(), g.col_cols()).noalias() += W.transpose() * G;
        } else {
          MapMat(dcols.data(), g.col_rows(), g.col_cols()).noalias() = W.transpose() * G;
          col2im(dcols.data(), g, dxn);
        }
      }
    }
  });
}

namespace {

std::size_t mirror(long i, long n) {
  if (i < 0) i = -i;
  if (i >= n) i = 2 * (n - 1) - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

Var reflect_pad(const Var& x, std::size_t pad) {
  const Tensor& in = x.value();
  if (in.rank() != 4) throw ShapeError("reflect_pad needs NCHW input, got " + shape_str(in.shape()));
  const std::size_t planes = in.dim(0) * in.dim(1), h = in.dim(2), w = in.dim(3);
  if (pad >= h || pad >= w)
    throw ShapeError("reflect_pad of " + std::to_string(pad) + " too large for " + shape_str(in.shape()));
  const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
  // Source index for every padded position, shared by both passes.
  auto src_index = std::make_shared<std::vector<std::size_t>>(ph * pw);
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t j = 0; j < pw; ++j)
      (*src_index)[i * pw + j] = mirror(static_cast<long>(i) - static_cast<long>(pad), static_cast<long>(h)) * w +
                                 mirror(static_cast<long>(j) - static_cast<long>(pad), static_cast<long>(w));
  Tensor y = Tensor::zeros({in.dim(0), in.dim(1), ph, pw});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t k = 0; k < ph * pw; ++k) y[p * ph * pw + k] = in[p * h * w + (*src_index)[k]];
  return x.tape().record(std::move(y), {x}, [planes, h, w, ph, pw, src_index](const BackwardContext& ctx) {
    Tensor* g = ctx.grad_in(0);
    if (!g) return;
    const Tensor& go = ctx.grad_out();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t k = 0; k < ph * pw; ++k) (*g)[p * h * w + (*src_index)[k]] += go[p * ph * pw + k];
  });
}

Var upsample_nearest2x(const Var& x) {
  const Tensor& in = x.value();
  if (in.rank() != 4) throw ShapeError("upsample_nearest2x needs NCHW input, got " + shape_str(in.shape()));
  const std::size_t planes = in.dim(0) * in.dim(1), h = in.dim(2), w = in.dim(3);
  Tensor y = Tensor::zeros({in.dim(0), in.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j)
        y[(p * 2 * h + i) * 2 * w + j] = in[(p * h + i / 2) * w + j / 2];
  return x.tape().record(std::move(y), {x}, [planes, h, w](const BackwardContext& ctx) {
    Tensor* g = ctx.grad_in(0);
    if (!g) return;
    const Tensor& go = ctx.grad_out();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * w; ++j) (*g)[(p * h + i / 2) * w + j / 2] += go[(p * 2 * h + i) * 2 * w + j];
  });
}

Var instance_norm(const Var& x, double eps) {
  const Tensor& in = x.value();
  if (in.rank() != 4) throw ShapeError("instance_norm needs NCHW input, got " + shape_str(in.shape()));
  const std::size_t planes = in.dim(0) * in.dim(1), hw = in.dim(2) * in.dim(3);
  Tensor y = Tensor::zeros(in.shape());
  auto inv_std = std::make_shared<std::vector<double>>(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = in.ptr() + p * hw;
    double mu = 0.0;
    for (std::size_t k = 0; k < hw; ++k) mu += src[k];
    mu /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t k = 0; k < hw; ++k) var += (src[k] - mu) * (src[k] - mu);
    var /= static_cast<double>(hw);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[p] = is;
    double* dst = y.ptr() + p * hw;
    for (std::size_t k = 0; k < hw; ++k) dst[k] = (src[k] - mu) * is;
  }
  return x.tape().record(std::move(y), {x}, [planes, hw, inv_std](const BackwardContext& ctx) {
    Tensor* g = ctx.grad_in(0);
    if (!g) return;
    const Tensor& y = ctx.output();
    const Tensor& go = ctx.grad_out();
    const double inv_n = 1.0 / static_cast<double>(hw);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* gy = go.ptr() + p * hw;
      const double* yy = y.ptr() + p * hw;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t k = 0; k < hw; ++k) {
        mg += gy[k];
        mgy += gy[k] * yy[k];
      }
      mg *= inv_n;
      mgy *= inv_n;
      double* dst = g->ptr() + p * hw;
      const double is = (*inv_std)[p];
      for (std::size_t k = 0; k < hw; ++k) dst[k] += is * (gy[k] - mg - yy[k] * mgy);
    }
  });
}

// ---------------------------------------------------------------------------
// RoI-Align

namespace {

struct Tap {
  std::size_t index;
  double weight;
};

// Bilinear taps at continuous feature coordinate (y, x); empty outside [-1, H] x [-1, W].
void bilinear_taps(double y, double x, std::size_t h, std::size_t w, double scale, std::vector<Tap>& taps) {
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  if (y < -1.0 || y > H || x < -1.0 || x > W) return;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x), y1, x1;
  if (y0 >= h - 1) {
    y0 = y1 = h - 1;
    y = static_cast<double>(y0);
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= w - 1) {
    x0 = x1 = w - 1;
    x = static_cast<double>(x0);
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  taps.push_back({y0 * w + x0, scale * hy * hx});
  taps.push_back({y0 * w + x1, scale * hy * lx});
  taps.push_back({y1 * w + x0, scale * ly * hx});
  taps.push_back({y1 * w + x1, scale * ly * lx});
}

}  // namespace

Var roi_align(const Var& features, const std::vector<RoiBox>& rois, std::size_t out_h, std::size_t out_w,
              double spatial_scale, std::size_t sampling_ratio, bool aligned) {
  const Tensor& f = features.value();
  if (f.rank() != 4 || f.dim(0) != 1) throw ShapeError("roi_align needs features [1,C,H,W], got " + shape_str(f.shape()));
  if (out_h == 0 || out_w == 0 || sampling_ratio == 0) throw ContractError("roi_align: output size must be positive");
  if (rois.empty()) throw ContractError("roi_align: no RoIs");
  const std::size_t c = f.dim(1), h = f.dim(2), w = f.dim(3), hw = h * w;
  const std::size_t bins = out_h * out_w;
  const double offset = aligned ? 0.5 : 0.0;
  const double per_bin = 1.0 / static_cast<double>(sampling_ratio * sampling_ratio);

  // taps for every (roi, bin); offsets[r * bins + b] .. offsets[r * bins + b + 1]
  auto taps = std::make_shared<std::vector<Tap>>();
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  offsets->reserve(rois.size() * bins + 1);
  offsets->push_back(0);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const auto& b = rois[r];
    if (!(b[2] > b[0]) || !(b[3] > b[1]) || !std::isfinite(b[0] + b[1] + b[2] + b[3]))
      throw ContractError("roi_align: RoI " + std::to_string(r) + " has zero or negative area");
    const double x0 = b[0] * spatial_scale - offset, y0 = b[1] * spatial_scale - offset;
    const double bin_w = (b[2] - b[0]) * spatial_scale / static_cast<double>(out_w);
    const double bin_h = (b[3] - b[1]) * spatial_scale / static_cast<double>(out_h);
    for (std::size_t py = 0; py < out_h; ++py)
      for (std::size_t px = 0; px < out_w; ++px) {
        for (std::size_t iy = 0; iy < sampling_ratio; ++iy) {
          const double y = y0 + bin_h * (static_cast<double>(py) + (static_cast<double>(iy) + 0.5) /
                                                                      static_cast<double>(sampling_ratio));
          for (std::size_t ix = 0; ix < sampling_ratio; ++ix) {
            const double x = x0 + bin_w * (static_cast<double>(px) + (static_cast<double>(ix) + 0.5) /
                                                                        static_cast<double>(sampling_ratio));
            bilinear_taps(y, x, h, w, per_bin, *taps);
          }
        }
        offsets->push_back(taps->size());
      }
  }

  const std::size_t nroi = rois.size();
  Tensor y = Tensor::zeros({nroi, c, out_h, out_w});
  for (std::size_t r = 0; r < nroi; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = f.ptr() + ch * hw;
      double* out = y.ptr() + (r * c + ch) * bins;
      for (std::size_t b = 0; b < bins; ++b) {
        double acc = 0.0;
        for (std::size_t k = (*offsets)[r * bins + b]; k < (*offsets)[r * bins + b + 1]; ++k)
          acc += (*taps)[k].weight * plane[(*taps)[k].index];
        out[b] = acc;
      }
    }

  return features.tape().record(std::move(y), {features}, [taps, offsets, nroi, c, hw, bins](const BackwardContext& ctx) {
    Tensor* g = ctx.grad_in(0);
    if (!g) return;
    const Tensor& go = ctx.grad_out();
    for (std::size_t r = 0; r < nroi; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* plane = g->ptr() + ch * hw;
        const double* gin = go.ptr() + (r * c + ch) * bins;
        for (std::size_t b = 0; b < bins; ++b)
          for (std::size_t k = (*offsets)[r * bins + b]; k < (*offsets)[r * bins + b + 1]; ++k)
            plane[(*taps)[k].index] += (*taps)[k].weight * gin[b];
      }
  });
}

// ---------------------------------------------------------------------------
// Losses

Var bce_with_logits(const Var& logits, const Tensor& targets, const Tensor& weights, double normalizer) {
  const Tensor& z = logits.value();
  if (targets.shape() != z.shape() || weights.shape() != z.shape())
    throw ShapeError("bce_with_logits: logits " + shape_str(z.shape()) + " targets " + shape_str(targets.shape()));
  if (!(normalizer > 0.0)) throw ContractError("bce_with_logits: normalizer must be positive");
  double loss = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    if (weights[i] == 0.0) continue;
    const double v = z[i];
    loss += weights[i] * (std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v))));
  }
  return logits.tape().record(Tensor::scalar(loss / normalizer), {logits},
                              [targets, weights, normalizer](const BackwardContext& ctx) {
                                Tensor* g = ctx.grad_in(0);
                                if (!g) return;
                                const Tensor& z = ctx.input(0);
                                const double go = ctx.grad_out()[0] / normalizer;
                                for (std::size_t i = 0; i < z.numel(); ++i) {
                                  if (weights[i] == 0.0) continue;
                                  const double s = z[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-z[i]))
                                                                : std::exp(z[i]) / (1.0 + std::exp(z[i]));
                                  (*g)[i] += go * weights[i] * (s - targets[i]);
                                }
                              });
}

Var smooth_l1(const Var& pred, const Tensor& target, const Tensor& weights, double beta, double normalizer) {
  const Tensor& p = pred.value();
  if (target.shape() != p.shape() || weights.shape() != p.shape())
    throw ShapeError("smooth_l1: pred " + shape_str(p.shape()) + " target " + shape_str(target.shape()));
  if (!(beta > 0.0) || !(normalizer > 0.0)) throw ContractError("smooth_l1: beta and normalizer must be positive");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    if (weights[i] == 0.0) continue;
    const double d = std::abs(p[i] - target[i]);
    loss += weights[i] * (d < beta ? 0.5 * d * d / beta : d - 0.5 * beta);
  }
  return pred.tape().record(Tensor::scalar(loss / normalizer), {pred},
                            [target, weights, beta, normalizer](const BackwardContext& ctx) {
                              Tensor* g = ctx.grad_in(0);
                              if (!g) return;
                              const Tensor& p = ctx.input(0);
                              const double go = ctx.grad_out()[0] / normalizer;
                              for (std::size_t i = 0; i < p.numel(); ++i) {
                                if (weights[i] == 0.0) continue;
                                const double d = p[i] - target[i];
                                const double dd = std::abs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0);
                                (*g)[i] += go * weights[i] * dd;
                              }
                            });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels, double normalizer) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  if (!(normalizer > 0.0)) throw ContractError("softmax_cross_entropy: normalizer must be positive");
  const std::size_t n = z.dim(0), k = z.dim(1);
  auto probs = std::make_shared<std::vector<double>>(n * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.ptr() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - mx) / s;
    if (labels[i] < 0) continue;
    if (static_cast<std::size_t>(labels[i]) >= k) throw ContractError("softmax_cross_entropy: label out of range");
    loss += -(row[labels[i]] - mx - std::log(s));
  }
  return logits.tape().record(Tensor::scalar(loss / normalizer), {logits},
                              [probs, labels, n, k, normalizer](const BackwardContext& ctx) {
                                Tensor* g = ctx.grad_in(0);
                                if (!g) return;
                                const double go = ctx.grad_out()[0] / normalizer;
                                for (std::size_t i = 0; i < n; ++i) {
                                  if (labels[i] < 0) continue;
                                  for (std::size_t j = 0; j < k; ++j) {
                                    const double t = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
                                    (*g)[i * k + j] += go * ((*probs)[i * k + j] - t);
                                  }
                                }
                              });
}

Var detach(const Var& a) { return a.tape().constant(a.value()); }

}  // namespace gammadesk
