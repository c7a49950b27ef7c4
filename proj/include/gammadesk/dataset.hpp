#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "gammadesk/boxes.hpp"
#include "gammadesk/rng.hpp"
#include "gammadesk/tensor.hpp"

namespace gammadesk {

struct Annotation {
  Box box;
  int class_id = 0;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Image [3, H, W] in [-1, 1] plus its ground truth. `name` is the image's
/// path relative to the dataset root when the sample came from disk.
struct DetectionSample {
  Tensor image;
  std::vector<Annotation> annotations;
  std::string name;
};

/// Throws ContractError unless every box satisfies 0 <= min < max <= extent
/// and every class id is in [0, num_classes).
void validate_sample(const DetectionSample& sample, std::size_t num_classes);

struct Detection {
  Box box;
  int class_id = 0;
  double confidence = 0.0;
};

}  // namespace gammadesk

namespace gammadesk::data {

// ---------------------------------------------------------------------------
// Line-delimited JSON records. Annotation lines look like
//   {"format":"gammadesk.annotations","version":1,"image":"images/000003.png",
//    "width":64,"height":64,"boxes":[[x_min,y_min,x_max,y_max,class_id],...]}
// and detection lines use "format":"gammadesk.detections" with
//   "detections":[[x_min,y_min,x_max,y_max,class_id,confidence],...].

inline constexpr const char* kAnnotationFormat = "gammadesk.annotations";
inline constexpr const char* kDetectionFormat = "gammadesk.detections";
inline constexpr int kRecordVersion = 1;

struct AnnotationRecord {
  std::string image;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Annotation> boxes;
};

struct DetectionRecord {
  std::string image;
  std::vector<Detection> detections;
};

void write_annotations(const std::filesystem::path& path, const std::vector<AnnotationRecord>& records);
std::vector<AnnotationRecord> read_annotations(const std::filesystem::path& path);
void write_detections(const std::filesystem::path& path, const std::vector<DetectionRecord>& records);
std::vector<DetectionRecord> read_detections(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset directories: `manifest.txt` (one relative image path per line,
// '#' lines are comments and the first carries the tag), `images/`, and for
// detection sets `annotations.jsonl`.

struct ManifestEntry {
  std::string image;
  std::optional<std::vector<Annotation>> annotations;
};

struct Manifest {
  std::filesystem::path root;
  std::string tag;
  std::vector<ManifestEntry> entries;
};

/// Reads and checks that every listed file exists (IngestionError otherwise).
Manifest read_manifest(const std::filesystem::path& root);
void write_manifest(const std::filesystem::path& root, const std::string& tag, const std::vector<std::string>& images);

/// Hex FNV-1a digest over the manifest text, annotation text and image bytes.
std::string dataset_fingerprint(const std::filesystem::path& root);

void save_image_set(const std::filesystem::path& root, const std::string& tag, const std::vector<Tensor>& images);
std::vector<Tensor> load_image_set(const std::filesystem::path& root);

void save_detection_set(const std::filesystem::path& root, const std::string& tag,
                        const std::vector<DetectionSample>& samples);
std::vector<DetectionSample> load_detection_set(const std::filesystem::path& root);

/// Content digest of one sample (pixel values plus annotations).
std::uint64_t sample_fingerprint(const DetectionSample& sample);

/// Resizes the image so its shorter side is `target` and scales boxes to match.
DetectionSample resize_sample(const DetectionSample& sample, std::size_t target);

// ---------------------------------------------------------------------------

enum class Domain { Terrestrial, Underwater };
const char* domain_name(Domain d);

/// Unpaired image pool with a seeded sampler: each epoch visits every image
/// once in a fresh shuffled order.
class DomainDataset {
 public:
  DomainDataset(Domain domain, std::vector<Tensor> images, std::uint64_t seed);

  const Tensor& next();
  Domain domain() const noexcept { return domain_; }
  std::size_t size() const noexcept { return images_.size(); }
  std::size_t epoch() const noexcept { return epoch_; }
  const std::vector<Tensor>& images() const noexcept { return images_; }
  const Tensor& operator[](std::size_t i) const { return images_.at(i); }

 private:
  void reshuffle();

  Domain domain_;
  std::vector<Tensor> images_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// Fractions of the training mix drawn from the existing (real) pool and the
/// augmented (translated) pool.
struct MixSpec {
  double existing_fraction = 0.6;
  double augmented_fraction = 0.4;
  std::uint64_t seed = 0;
};

/// Seeded draw without replacement of round(existing_fraction * total)
/// existing samples plus the remainder from the augmented pool, shuffled
/// together. Any drawn sample whose fingerprint appears in `held_out`
/// raises ContractError, as does a pool smaller than its quota.
std::vector<DetectionSample> mix_split(const std::vector<DetectionSample>& existing,
                                       const std::vector<DetectionSample>& augmented, const MixSpec& spec,
                                       std::size_t total, const std::set<std::uint64_t>& held_out = {});

std::set<std::uint64_t> fingerprints(const std::vector<DetectionSample>& samples);

}  // namespace gammadesk::data
