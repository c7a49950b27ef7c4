#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gammadesk/dataset.hpp"

namespace gammadesk::data {

/// Which degradations a generated detection set receives.
struct Degradations {
  bool underwater = false;  // blue-green tint, contrast compression, blur, vignette
  bool turbidity = false;   // heavier blur, haze, sensor noise
};

/// "plastic", "rov", "bio", then "tire", "net" for larger class counts.
std::vector<std::string> class_names(std::size_t classes);
inline constexpr std::size_t kMaxSynthClasses = 5;

/// One clean scene: light textured ground with 1 to 3 non-overlapping
/// objects. Boxes are exact pixel extents of the drawn shapes.
DetectionSample render_scene(Rng& rng, std::size_t size, std::size_t classes);

/// Style transforms on [3,H,W] images in [-1, 1]; output stays in range.
Tensor apply_underwater_style(const Tensor& image, Rng& rng);
Tensor apply_turbidity(const Tensor& image, Rng& rng);

/// Independent scene draws for an unpaired translation corpus. X is clean
/// terrestrial, Y is underwater-styled. Throws ContractError for size < 32.
std::pair<DomainDataset, DomainDataset> synth_domain_pair(std::uint64_t seed, std::size_t n_x, std::size_t n_y,
                                                          std::size_t size);
std::pair<std::vector<Tensor>, std::vector<Tensor>> synth_domain_images(std::uint64_t seed, std::size_t n_x,
                                                                        std::size_t n_y, std::size_t size);

/// Annotated scenes with optional degradations. classes in [2, 5].
std::vector<DetectionSample> synth_detection_set(std::uint64_t seed, std::size_t n, std::size_t size,
                                                 std::size_t classes, Degradations degradations);

/// Mean of channel `c` (in [-1, 1] units) over a set of [3,H,W] images.
double mean_channel(const std::vector<Tensor>& images, std::size_t c);

}  // namespace gammadesk::data
