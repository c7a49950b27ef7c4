#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include "gammadesk/autodiff.hpp"
#include "gammadesk/rng.hpp"

namespace gammadesk::sea {

/// Learnable pieces of the self-attention block. Q and K reduce C to C/8
/// channels with 1x1 kernels, V keeps C channels, and gamma is a scalar gain
/// that starts at zero so a fresh block passes features through unchanged.
struct AttentionParams {
  std::size_t channels = 0;
  std::size_t w_q = 0;  // [C/8, C, 1, 1]
  std::size_t w_k = 0;  // [C/8, C, 1, 1]
  std::size_t w_v = 0;  // [C, C, 1, 1]
  std::size_t gamma = 0;  // [1]
  bool scale_scores = false;  // divide QK^T by sqrt(C/8); off unless asked for
};

/// Registers `prefix.w_q`, `prefix.w_k`, `prefix.w_v` and `prefix.gamma`.
/// Throws ContractError unless `channels` is a positive multiple of 8.
AttentionParams make_attention(ParameterSet& params, const std::string& prefix, std::size_t channels, Rng& rng,
                               bool scale_scores = false);

struct Projections {
  Var q;  // [HW, C/8]
  Var k;  // [HW, C/8]
  Var v;  // [HW, C]
};

/// 1x1 projections of f1 [1, C, H, W], flattened row-major over (y, x).
Projections project_qkv(Tape& tape, ParameterSet& params, const AttentionParams& ap, const Var& f1);

/// softmax over keys of q k^T; rows are query positions.
Var attention_scores(const Var& q, const Var& k, bool scale = false);

/// scores [HW, HW] times v [HW, C], returned as [1, C, height, width].
Var attention_map(const Var& scores, const Var& v, std::size_t height, std::size_t width);

struct AttentionOutput {
  Var scores;  // [HW, HW], row-stochastic
  Var at_map;  // [1, C, H, W]
  Var sa_map;  // gamma * at_map + f1
};

/// Full block on f1 [1, C, H, W]. Non-finite input raises ContractError.
AttentionOutput sea_forward(Tape& tape, ParameterSet& params, const AttentionParams& ap, const Var& f1);

/// Channel mean of at_map ([C,H,W] or [1,C,H,W]) min-max scaled to 0..255
/// and bilinearly resized to `height` x `width`. A flat map becomes 128.
std::vector<std::uint8_t> heatmap_pixels(const Tensor& at_map, std::size_t height, std::size_t width);

/// Writes `<stem>_heat.png` (grayscale) and `<stem>_overlay.png` (heat blended
/// onto the [3,H,W] source image) and returns the grayscale pixels.
std::vector<std::uint8_t> export_attention_heatmap(const Tensor& at_map, const Tensor& source_image,
                                                   const std::filesystem::path& stem);

/// Debug dump of a score matrix in the tensor binary format.
void dump_attention_scores(const Tensor& scores, const std::filesystem::path& path);

}  // namespace gammadesk::sea
