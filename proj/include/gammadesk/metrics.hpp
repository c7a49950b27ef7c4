#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gammadesk/autodiff.hpp"
#include "gammadesk/boxes.hpp"

namespace gammadesk::metrics {

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits of image embeddings.

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t count = 0;
};

/// Sample mean and unbiased covariance of the rows of `features` (n x d),
/// symmetrized as (S + S^T) / 2. Needs n >= 2.
GaussianStats fit_gaussian(const Eigen::MatrixXd& features);

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues below -1e-6 * ||m||_2 raise NumericError; smaller negative
/// round-off is clamped to zero.
Eigen::MatrixXd matrix_sqrt(const Eigen::MatrixXd& m);

/// ||mu_x - mu_g||^2 + Tr(S_x + S_g - 2 (S_x S_g)^{1/2}), with the cross term
/// evaluated as Tr sqrt(S_x^{1/2} S_g S_x^{1/2}) so the result is symmetric in
/// its arguments. Tiny negative totals are clamped to zero.
double fid(const GaussianStats& x, const GaussianStats& g);

struct EncoderConfig {
  std::size_t image_size = 64;
  std::vector<std::size_t> channels{16, 32, 64};
};

/// Fixed random-weight conv encoder (stride-2 3x3 conv + relu per stage,
/// global average pooling). Weights are a pure function of the seed.
class RandomConvEncoder {
 public:
  explicit RandomConvEncoder(std::uint64_t seed, EncoderConfig config = {});

  std::size_t dimension() const noexcept { return config_.channels.back(); }
  const EncoderConfig& config() const noexcept { return config_; }

  /// One image [3, S, S] with S == config().image_size.
  Eigen::VectorXd embed(const Tensor& image) const;

 private:
  EncoderConfig config_;
  std::vector<Tensor> kernels_;
};

/// Embeds each image in order; result row i belongs to images[i].
Eigen::MatrixXd embed_images(const std::vector<Tensor>& images, const RandomConvEncoder& encoder);

/// Convenience: fid(fit_gaussian(embed(a)), fit_gaussian(embed(b))).
double fid_between(const std::vector<Tensor>& a, const std::vector<Tensor>& b, const RandomConvEncoder& encoder);

// ---------------------------------------------------------------------------
// Detection metrics.

/// Intersection over union; throws ContractError for a degenerate box.
double iou(const Box& a, const Box& b);

struct ScoredDetection {
  std::size_t image = 0;
  Box box;
  double score = 0.0;
};

struct GroundTruthBox {
  std::size_t image = 0;
  Box box;
};

struct ApResult {
  /// Absent when the class has neither ground truth nor detections.
  std::optional<double> ap;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  /// Set when ground truth is empty (AP forced to 0 or undefined).
  bool flagged = false;
};

/// All-point interpolated AP for one class. Detections are matched in
/// descending score order (stable for ties) to the best still-unmatched
/// ground-truth box of the same image with IoU >= iou_threshold.
ApResult average_precision(const std::vector<ScoredDetection>& detections,
                           const std::vector<GroundTruthBox>& ground_truth, double iou_threshold = 0.5);

/// Unweighted mean of the defined per-class APs. Throws ContractError if none is defined.
double mean_ap(const std::vector<std::optional<double>>& per_class);

struct LabeledBox {
  Box box;
  int class_id = 0;
};

struct LabeledDetection {
  Box box;
  int class_id = 0;
  double confidence = 0.0;
};

struct EvalResult {
  std::vector<ApResult> per_class;
  double map = 0.0;
  double iou_threshold = 0.5;
};

/// Per-class AP and mAP over a dataset; index i of both vectors is image i.
EvalResult evaluate_detections(const std::vector<std::vector<LabeledDetection>>& detections,
                               const std::vector<std::vector<LabeledBox>>& ground_truth, std::size_t num_classes,
                               double iou_threshold = 0.5);

}  // namespace gammadesk::metrics
