#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "gammadesk/tensor.hpp"

namespace gammadesk::data {

/// 8-bit interleaved RGB (or gray when channels == 1) pixels.
struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;
};

/// [3, H, W] tensor in [-1, 1] from 8-bit RGB: v / 127.5 - 1.
Tensor raster_to_tensor(const Raster& r);
/// Inverse mapping with rounding; values outside [-1, 1] are clamped.
Raster tensor_to_raster(const Tensor& image);

Raster read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Raster& r);
Raster read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Raster& r);

/// Decodes an 8-bit RGB PNG or binary PPM (by extension). Throws
/// IngestionError naming the file when it is unreadable or not 3-channel.
Tensor load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Tensor& image);

/// Bilinear resampling of a [C, H, W] tensor (half-pixel centers, edge clamp).
Tensor resize_bilinear(const Tensor& image, std::size_t out_h, std::size_t out_w);

/// Output size that makes min(H, W) == target while keeping the aspect ratio.
std::pair<std::size_t, std::size_t> shorter_side_size(std::size_t h, std::size_t w, std::size_t target);
Tensor resize_shorter_side(const Tensor& image, std::size_t target);

}  // namespace gammadesk::data
