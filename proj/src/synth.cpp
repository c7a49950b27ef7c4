#include "gammadesk/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "gammadesk/errors.hpp"

namespace gammadesk::data {

namespace {

using Rgb = std::array<double, 3>;

// Work buffer in [0, 1] units, planar [3, S, S].
struct Canvas {
  std::size_t h, w;
  std::vector<double> px;
  Canvas(std::size_t h_, std::size_t w_) : h(h_), w(w_), px(3 * h_ * w_, 0.0) {}
  double& at(std::size_t c, std::size_t y, std::size_t x) { return px[(c * h + y) * w + x]; }
  void paint(std::size_t y, std::size_t x, const Rgb& col) {
    for (std::size_t c = 0; c < 3; ++c) at(c, y, x) = col[c];
  }
};

Canvas from_tensor(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("style transforms expect [3,H,W], got " + shape_str(t.shape()));
  Canvas cv(t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < cv.px.size(); ++i) cv.px[i] = (t[i] + 1.0) * 0.5;
  return cv;
}

Tensor to_tensor(const Canvas& cv) {
  Tensor t = Tensor::zeros({3, cv.h, cv.w});
  // snapped to the 8-bit grid so that a PNG round trip is lossless
  for (std::size_t i = 0; i < cv.px.size(); ++i)
    t[i] = std::round(std::clamp(cv.px[i], 0.0, 1.0) * 255.0) / 127.5 - 1.0;
  return t;
}

// Separable binomial blur with clamped edges.
void blur(Canvas& cv, const std::vector<double>& k) {
  const long r = static_cast<long>(k.size() / 2);
  std::vector<double> tmp(cv.px.size());
  const long h = static_cast<long>(cv.h), w = static_cast<long>(cv.w);
  for (long c = 0; c < 3; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long i = -r; i <= r; ++i) acc += k[i + r] * cv.px[(c * h + y) * w + std::clamp(x + i, 0L, w - 1)];
        tmp[(c * h + y) * w + x] = acc;
      }
  for (long c = 0; c < 3; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long i = -r; i <= r; ++i) acc += k[i + r] * tmp[(c * h + std::clamp(y + i, 0L, h - 1)) * w + x];
        cv.px[(c * h + y) * w + x] = acc;
      }
}

const std::vector<double> kBlur3 = {0.25, 0.5, 0.25};
const std::vector<double> kBlur5 = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

Rgb jitter(const Rgb& base, Rng& rng, double amount) {
  Rgb out;
  for (std::size_t c = 0; c < 3; ++c) out[c] = std::clamp(base[c] + rng.uniform(-amount, amount), 0.0, 1.0);
  return out;
}

template <std::size_t N>
Rgb pick(const std::array<Rgb, N>& palette, Rng& rng) {
  return palette[rng.below(N)];
}

void draw_background(Canvas& cv, Rng& rng) {
  // sand / soil / concrete tones, warm so the blue channel sits low
  const double base = rng.uniform(0.62, 0.88);
  const Rgb tone{base, base * rng.uniform(0.85, 0.95), base * rng.uniform(0.55, 0.7)};
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::array<Wave, 3> waves;
  for (auto& wv : waves) {
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double cycles = rng.uniform(1.0, 4.0);
    wv = {std::cos(angle) * cycles, std::sin(angle) * cycles, rng.uniform(0.0, 2 * std::numbers::pi),
          rng.uniform(0.02, 0.05)};
  }
  for (std::size_t y = 0; y < cv.h; ++y)
    for (std::size_t x = 0; x < cv.w; ++x) {
      const double u = static_cast<double>(x) / cv.w, v = static_cast<double>(y) / cv.h;
      double tex = 0.0;
      for (const auto& wv : waves) tex += wv.amp * std::sin(2 * std::numbers::pi * (wv.fx * u + wv.fy * v) + wv.phase);
      const double grain = rng.normal(0.0, 0.015);
      for (std::size_t c = 0; c < 3; ++c) cv.at(c, y, x) = tone[c] + tex + grain;
    }
}

struct Placement {
  long x0, y0, w, h;
};

// Shades a colour slightly from top to bottom so objects are not flat.
Rgb shade(const Rgb& col, double t) {
  const double f = 1.05 - 0.15 * t;
  return {std::min(1.0, col[0] * f), std::min(1.0, col[1] * f), std::min(1.0, col[2] * f)};
}

void draw_object(Canvas& cv, int cls, const Placement& p, Rng& rng) {
  static const std::array<Rgb, 3> plastic{{{0.96, 0.96, 0.98}, {0.86, 0.16, 0.14}, {0.18, 0.36, 0.92}}};
  static const std::array<Rgb, 2> rov{{{0.98, 0.82, 0.08}, {1.0, 0.52, 0.05}}};
  static const std::array<Rgb, 3> bio{{{0.2, 0.68, 0.3}, {0.56, 0.24, 0.66}, {0.95, 0.48, 0.7}}};
  static const std::array<Rgb, 1> tire{{{0.1, 0.1, 0.12}}};
  static const std::array<Rgb, 2> net{{{0.1, 0.55, 0.55}, {0.3, 0.8, 0.2}}};

  const double fh = static_cast<double>(p.h);
  auto fill_if = [&](auto&& inside, const Rgb& col) {
    for (long y = p.y0; y < p.y0 + p.h; ++y)
      for (long x = p.x0; x < p.x0 + p.w; ++x)
        if (inside(x - p.x0, y - p.y0)) cv.paint(y, x, shade(col, (y - p.y0) / fh));
  };

  switch (cls) {
    case 0: {  // plastic: solid rectangle with a darker fold line
      const Rgb col = jitter(pick(plastic, rng), rng, 0.04);
      fill_if([](long, long) { return true; }, col);
      const long fold = p.h / 2 + static_cast<long>(rng.between(-p.h / 6, p.h / 6));
      const Rgb dark{col[0] * 0.75, col[1] * 0.75, col[2] * 0.75};
      for (long x = p.x0; x < p.x0 + p.w; ++x) cv.paint(p.y0 + fold, x, dark);
      break;
    }
    case 1: {  // rov: hollow frame with a cross bar
      const Rgb col = jitter(pick(rov, rng), rng, 0.03);
      const long t = std::max(2L, std::min(p.w, p.h) / 7);
      const long mid = p.h / 2;
      fill_if([&](long x, long y) { return x < t || y < t || x >= p.w - t || y >= p.h - t || std::abs(y - mid) < t / 2 + 1; },
              col);
      break;
    }
    case 2: {  // bio: ellipse touching all four box sides
      const Rgb col = jitter(pick(bio, rng), rng, 0.05);
      const double rx = p.w / 2.0, ry = p.h / 2.0;
      fill_if(
          [&](long x, long y) {
            const double dx = (x + 0.5 - rx) / rx, dy = (y + 0.5 - ry) / ry;
            // every row/column through the centre keeps at least the middle pixel
            return dx * dx + dy * dy <= 1.0 || (std::abs(dx) < 1.0 / rx && std::abs(dy) <= 1.0) ||
                   (std::abs(dy) < 1.0 / ry && std::abs(dx) <= 1.0);
          },
          col);
      break;
    }
    case 3: {  // tire: thick dark ring
      const Rgb col = jitter(pick(tire, rng), rng, 0.03);
      const double rx = p.w / 2.0, ry = p.h / 2.0;
      fill_if(
          [&](long x, long y) {
            const double dx = (x + 0.5 - rx) / rx, dy = (y + 0.5 - ry) / ry;
            const double d = dx * dx + dy * dy;
            return (d <= 1.0 && d >= 0.3) || (std::abs(dy) < 1.0 / ry && std::abs(dx) <= 1.0 && std::abs(dx) > 0.55);
          },
          col);
      break;
    }
    default: {  // net: grid lines
      const Rgb col = jitter(pick(net, rng), rng, 0.03);
      const long step = std::max(3L, std::min(p.w, p.h) / 4);
      fill_if([&](long x, long y) { return x % step == 0 || y % step == 0 || x == p.w - 1 || y == p.h - 1; }, col);
      break;
    }
  }
}

bool overlaps(const Placement& a, const Placement& b, long margin) {
  return a.x0 < b.x0 + b.w + margin && b.x0 < a.x0 + a.w + margin && a.y0 < b.y0 + b.h + margin &&
         b.y0 < a.y0 + a.h + margin;
}

void check_size(std::size_t size) {
  if (size < 32) throw ContractError("synthetic images need size >= 32, got " + std::to_string(size));
}

}  // namespace

std::vector<std::string> class_names(std::size_t classes) {
  static const std::vector<std::string> all{"plastic", "rov", "bio", "tire", "net"};
  if (classes < 2 || classes > all.size())
    throw ContractError("synthetic class count must be in [2, 5], got " + std::to_string(classes));
  return {all.begin(), all.begin() + static_cast<long>(classes)};
}

DetectionSample render_scene(Rng& rng, std::size_t size, std::size_t classes) {
  check_size(size);
  class_names(classes);
  Canvas cv(size, size);
  draw_background(cv, rng);

  const long s = static_cast<long>(size);
  const std::size_t wanted = 1 + rng.below(3);
  std::vector<Placement> placed;
  std::vector<int> labels;
  for (std::size_t k = 0; k < wanted; ++k) {
    const int cls = static_cast<int>(rng.below(classes));
    for (int attempt = 0; attempt < 40; ++attempt) {
      const double base = rng.uniform(0.2, 0.42) * s;
      double w = base, h = base;
      switch (cls) {
        case 0: w *= rng.uniform(0.8, 1.3); h *= rng.uniform(0.6, 1.0); break;
        case 1: w *= rng.uniform(1.0, 1.3); h *= rng.uniform(0.7, 0.9); break;
        default: w *= rng.uniform(0.8, 1.2); h *= rng.uniform(0.7, 1.1); break;
      }
      Placement p;
      p.w = std::clamp(std::lround(w), 6L, s - 2);
      p.h = std::clamp(std::lround(h), 6L, s - 2);
      p.x0 = rng.between(1, s - 1 - p.w);
      p.y0 = rng.between(1, s - 1 - p.h);
      const bool clash = std::any_of(placed.begin(), placed.end(), [&](const Placement& q) { return overlaps(p, q, 2); });
      if (clash) continue;
      placed.push_back(p);
      labels.push_back(cls);
      break;
    }
  }

  DetectionSample out;
  for (std::size_t i = 0; i < placed.size(); ++i) {
    draw_object(cv, labels[i], placed[i], rng);
    const auto& p = placed[i];
    out.annotations.push_back({{static_cast<double>(p.x0), static_cast<double>(p.y0), static_cast<double>(p.x0 + p.w),
                                static_cast<double>(p.y0 + p.h)},
                               labels[i]});
  }
  out.image = to_tensor(cv);
  return out;
}

Tensor apply_underwater_style(const Tensor& image, Rng& rng) {
  Canvas cv = from_tensor(image);
  const double k = rng.uniform(0.85, 1.15);
  const Rgb gain{0.35 * k, 0.7, 0.6};
  const Rgb offset{0.03, 0.15 * k, 0.35 * k};
  const std::size_t hw = cv.h * cv.w;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      double& v = cv.px[c * hw + i];
      v = gain[c] * v + offset[c];
      mean += v;
    }
    mean /= static_cast<double>(hw);
    const double contrast = rng.uniform(0.65, 0.75);
    for (std::size_t i = 0; i < hw; ++i) cv.px[c * hw + i] = mean + contrast * (cv.px[c * hw + i] - mean);
  }
  blur(cv, kBlur3);
  const double cy = (cv.h - 1) / 2.0, cx = (cv.w - 1) / 2.0;
  const double rmax2 = cy * cy + cx * cx;
  const double strength = rng.uniform(0.25, 0.35);
  for (std::size_t y = 0; y < cv.h; ++y)
    for (std::size_t x = 0; x < cv.w; ++x) {
      const double r2 = ((y - cy) * (y - cy) + (x - cx) * (x - cx)) / rmax2;
      for (std::size_t c = 0; c < 3; ++c) cv.at(c, y, x) *= 1.0 - strength * r2;
    }
  return to_tensor(cv);
}

Tensor apply_turbidity(const Tensor& image, Rng& rng) {
  Canvas cv = from_tensor(image);
  const Rgb haze{rng.uniform(0.4, 0.5), rng.uniform(0.5, 0.6), rng.uniform(0.45, 0.55)};
  const double keep = rng.uniform(0.65, 0.75);
  const std::size_t hw = cv.h * cv.w;
  blur(cv, kBlur5);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      double& v = cv.px[c * hw + i];
      v = keep * v + (1.0 - keep) * haze[c];
    }
  for (double& v : cv.px) v += rng.normal(0.0, 0.03);
  return to_tensor(cv);
}

std::pair<std::vector<Tensor>, std::vector<Tensor>> synth_domain_images(std::uint64_t seed, std::size_t n_x,
                                                                        std::size_t n_y, std::size_t size) {
  check_size(size);
  const Rng root(derive_seed(seed, "synth_domain_pair"));
  std::vector<Tensor> xs, ys;
  xs.reserve(n_x);
  ys.reserve(n_y);
  for (std::size_t i = 0; i < n_x; ++i) {
    Rng rng = root.split("x/" + std::to_string(i));
    xs.push_back(render_scene(rng, size, 3).image);
  }
  for (std::size_t i = 0; i < n_y; ++i) {
    Rng rng = root.split("y/" + std::to_string(i));
    Tensor clean = render_scene(rng, size, 3).image;
    ys.push_back(apply_underwater_style(clean, rng));
  }
  return {std::move(xs), std::move(ys)};
}

std::pair<DomainDataset, DomainDataset> synth_domain_pair(std::uint64_t seed, std::size_t n_x, std::size_t n_y,
                                                          std::size_t size) {
  auto [xs, ys] = synth_domain_images(seed, n_x, n_y, size);
  return {DomainDataset(Domain::Terrestrial, std::move(xs), derive_seed(seed, "sampler/x")),
          DomainDataset(Domain::Underwater, std::move(ys), derive_seed(seed, "sampler/y"))};
}

std::vector<DetectionSample> synth_detection_set(std::uint64_t seed, std::size_t n, std::size_t size,
                                                 std::size_t classes, Degradations degradations) {
  check_size(size);
  class_names(classes);
  const Rng root(derive_seed(seed, "synth_detection_set"));
  std::vector<DetectionSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = root.split("image/" + std::to_string(i));
    DetectionSample s = render_scene(rng, size, classes);
    if (degradations.underwater) s.image = apply_underwater_style(s.image, rng);
    if (degradations.turbidity) s.image = apply_turbidity(s.image, rng);
    s.name = "synth/" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

double mean_channel(const std::vector<Tensor>& images, std::size_t c) {
  if (images.empty()) throw ContractError("mean_channel of an empty set");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& img : images) {
    const std::size_t hw = img.dim(1) * img.dim(2);
    for (std::size_t i = 0; i < hw; ++i) total += img[c * hw + i];
    count += hw;
  }
  return total / static_cast<double>(count);
}

}  // namespace gammadesk::data
