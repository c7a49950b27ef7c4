#include "gammadesk/attention.hpp"

#include <algorithm>
#include <cmath>

#include "gammadesk/checkpoint.hpp"
#include "gammadesk/errors.hpp"
#include "gammadesk/image.hpp"
#include "gammadesk/nn.hpp"

namespace gammadesk::sea {

AttentionParams make_attention(ParameterSet& params, const std::string& prefix, std::size_t channels, Rng& rng,
                               bool scale_scores) {
  if (channels == 0 || channels % 8 != 0)
    throw ContractError("attention channels must be a positive multiple of 8, got " + std::to_string(channels));
  const std::size_t reduced = channels / 8;
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(channels));
  AttentionParams ap;
  ap.channels = channels;
  ap.scale_scores = scale_scores;
  ap.w_q = params.add(prefix + ".w_q", nn::normal_tensor({reduced, channels, 1, 1}, std_dev, rng));
  ap.w_k = params.add(prefix + ".w_k", nn::normal_tensor({reduced, channels, 1, 1}, std_dev, rng));
  ap.w_v = params.add(prefix + ".w_v", nn::normal_tensor({channels, channels, 1, 1}, std_dev, rng));
  ap.gamma = params.add(prefix + ".gamma", Tensor::scalar(0.0));
  return ap;
}

namespace {

void check_features(const Var& f1, const AttentionParams& ap) {
  const Tensor& x = f1.value();
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != ap.channels)
    throw ShapeError("attention expects [1," + std::to_string(ap.channels) + ",H,W], got " + shape_str(x.shape()));
}

// [1, c, H, W] -> [HW, c]
Var flatten_positions(const Var& x) {
  const Shape& s = x.shape();
  return transpose(reshape(x, {s[1], s[2] * s[3]}));
}

}  // namespace

Projections project_qkv(Tape& tape, ParameterSet& params, const AttentionParams& ap, const Var& f1) {
  check_features(f1, ap);
  auto project = [&](std::size_t w) { return flatten_positions(conv2d(f1, tape.watch(params[w]), 1, 0)); };
  return {project(ap.w_q), project(ap.w_k), project(ap.w_v)};
}

Var attention_scores(const Var& q, const Var& k, bool scale) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() != 2 || ks.size() != 2 || qs != ks)
    throw ShapeError("attention_scores: q " + shape_str(qs) + " and k " + shape_str(ks) + " must both be [HW,d]");
  Var logits = matmul(q, transpose(k));
  if (scale) logits = gammadesk::scale(logits, 1.0 / std::sqrt(static_cast<double>(qs[1])));
  return softmax(logits, 1);
}

Var attention_map(const Var& scores, const Var& v, std::size_t height, std::size_t width) {
  const Shape& ss = scores.shape();
  const Shape& vs = v.shape();
  const std::size_t hw = height * width;
  if (ss.size() != 2 || ss[0] != hw || ss[1] != hw || vs.size() != 2 || vs[0] != hw)
    throw ShapeError("attention_map: scores " + shape_str(ss) + ", v " + shape_str(vs) + " for " +
                     std::to_string(height) + "x" + std::to_string(width));
  return reshape(transpose(matmul(scores, v)), {1, vs[1], height, width});
}

AttentionOutput sea_forward(Tape& tape, ParameterSet& params, const AttentionParams& ap, const Var& f1) {
  check_features(f1, ap);
  if (!f1.value().all_finite()) throw ContractError("sea_forward: non-finite feature values");
  const std::size_t h = f1.shape()[2], w = f1.shape()[3];
  Projections p = project_qkv(tape, params, ap, f1);
  AttentionOutput out;
  out.scores = attention_scores(p.q, p.k, ap.scale_scores);
  out.at_map = attention_map(out.scores, p.v, h, w);
  out.sa_map = add(scale_by(out.at_map, tape.watch(params[ap.gamma])), f1);
  return out;
}

std::vector<std::uint8_t> heatmap_pixels(const Tensor& at_map, std::size_t height, std::size_t width) {
  const Shape& s = at_map.shape();
  std::size_t off = 0;
  if (s.size() == 4 && s[0] == 1)
    off = 1;
  else if (s.size() != 3)
    throw ShapeError("heatmap expects [C,H,W] or [1,C,H,W], got " + shape_str(s));
  const std::size_t c = s[off], h = s[off + 1], w = s[off + 2];
  Tensor avg = Tensor::zeros({1, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) avg[i] += at_map[ch * h * w + i] / static_cast<double>(c);

  const auto [lo_it, hi_it] = std::minmax_element(avg.data().begin(), avg.data().end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<std::uint8_t> out(height * width, 128);
  if (!(hi > lo)) return out;
  for (double& v : avg.data()) v = (v - lo) / (hi - lo) * 255.0;
  Tensor big = data::resize_bilinear(avg, height, width);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(big[i], 0.0, 255.0)));
  return out;
}

std::vector<std::uint8_t> export_attention_heatmap(const Tensor& at_map, const Tensor& source_image,
                                                   const std::filesystem::path& stem) {
  if (source_image.rank() != 3 || source_image.dim(0) != 3)
    throw ShapeError("source image must be [3,H,W], got " + shape_str(source_image.shape()));
  const std::size_t h = source_image.dim(1), w = source_image.dim(2);
  std::vector<std::uint8_t> heat = heatmap_pixels(at_map, h, w);

  data::Raster gray{w, h, 1, heat};
  data::write_png(stem.string() + "_heat.png", gray);

  // "hot" colour ramp blended half-and-half with the source
  data::Raster base = data::tensor_to_raster(source_image);
  data::Raster overlay{w, h, 3, std::vector<std::uint8_t>(h * w * 3)};
  for (std::size_t i = 0; i < h * w; ++i) {
    const double t = heat[i] / 255.0;
    const double ramp[3] = {std::clamp(3.0 * t, 0.0, 1.0), std::clamp(3.0 * t - 1.0, 0.0, 1.0),
                            std::clamp(3.0 * t - 2.0, 0.0, 1.0)};
    for (std::size_t c = 0; c < 3; ++c)
      overlay.pixels[i * 3 + c] =
          static_cast<std::uint8_t>(std::lround(0.5 * base.pixels[i * 3 + c] + 0.5 * 255.0 * ramp[c]));
  }
  data::write_png(stem.string() + "_overlay.png", overlay);
  return heat;
}

void dump_attention_scores(const Tensor& scores, const std::filesystem::path& path) { save_tensor(path, scores); }

}  // namespace gammadesk::sea
