#pragma once

// Test-only reference implementations. Deliberately naive and independent of
// the library kernels they are compared against.

#include <cmath>
#include <functional>
#include <vector>

#include "gammadesk/autodiff.hpp"
#include "gammadesk/rng.hpp"

namespace testsupport {

using gammadesk::Rng;
using gammadesk::Shape;
using gammadesk::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero (for kinked ops such as relu / abs).
inline Tensor random_nonzero(Shape shape, Rng& rng, double min_mag = 0.05) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.data()) {
    double m = rng.uniform(min_mag, 1.0);
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t p = a.dim(0), q = a.dim(1), r = b.dim(1);
  Tensor y = Tensor::zeros({p, r});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < q; ++k) s += a[i * q + k] * b[k * r + j];
      y[i * r + j] = s;
    }
  return y;
}

inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const long s = stride, p = pad;
  const long OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
  Tensor y = Tensor::zeros({(std::size_t)N, (std::size_t)O, (std::size_t)OH, (std::size_t)OW});
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          for (long c = 0; c < C; ++c)
            for (long i = 0; i < KH; ++i)
              for (long j = 0; j < KW; ++j) {
                long iy = oy * s + i - p, ix = ox * s + j - p;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[((n * C + c) * H + iy) * W + ix] * w[((o * C + c) * KH + i) * KW + j];
              }
          y[((n * O + o) * OH + oy) * OW + ox] = acc;
        }
  return y;
}

/// Central differences of a scalar function of one tensor.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, Tensor x, double eps = 1e-5) {
  Tensor g = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double up = f(x);
    x[i] = orig - eps;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

inline double max_rel_error(const Tensor& analytic, const Tensor& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double d = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / d);
  }
  return worst;
}

}  // namespace testsupport
