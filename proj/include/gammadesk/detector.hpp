#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gammadesk/attention.hpp"
#include "gammadesk/autodiff.hpp"
#include "gammadesk/boxes.hpp"
#include "gammadesk/dataset.hpp"
#include "gammadesk/metrics.hpp"
#include "gammadesk/nn.hpp"
#include "gammadesk/rng.hpp"

namespace gammadesk::det {

/// Backbone geometry: three stride-2 convs, 32 output channels.
inline constexpr std::size_t kStride = 8;
inline constexpr std::size_t kFeatureChannels = 32;

struct Anchor {
  double cx = 0.0;
  double cy = 0.0;
  double width = 0.0;
  double height = 0.0;
  std::size_t scale_index = 0;
  std::size_t aspect_index = 0;

  Box box() const noexcept { return {cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2}; }
};

/// Anchors for a feat_h x feat_w grid. Cell (y, x) is centred at
/// origin + ((x + 0.5) * stride, (y + 0.5) * stride); aspect a = h / w, so
/// width = s / sqrt(a) and height = s * sqrt(a). Anchor index is
/// ((y * feat_w + x) * scales + s) * aspects + a.
std::vector<Anchor> generate_anchors(std::size_t feat_h, std::size_t feat_w, double stride,
                                     const std::vector<double>& scales, const std::vector<double>& aspects,
                                     double origin_x = 0.0, double origin_y = 0.0);

struct DetectorConfig {
  std::size_t image_size = 64;
  std::vector<std::string> class_names{"plastic", "rov", "bio"};
  bool use_sea = true;

  std::vector<double> anchor_scales{12.0, 20.0, 32.0};
  std::vector<double> anchor_aspects{0.5, 1.0, 2.0};

  // Region proposals
  std::size_t rpn_pre_nms = 300;
  double rpn_nms_iou = 0.7;
  std::size_t train_proposals = 128;
  std::size_t test_proposals = 64;
  std::size_t rpn_batch = 64;
  double rpn_positive_fraction = 0.5;
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;

  // Second stage
  std::size_t roi_batch = 32;
  double roi_foreground_fraction = 0.25;
  double roi_foreground_iou = 0.5;
  std::size_t pool_size = 4;
  std::size_t fc_width = 128;
  std::size_t max_detections = 100;

  std::size_t num_classes() const noexcept { return class_names.size(); }
  std::size_t anchors_per_cell() const noexcept { return anchor_scales.size() * anchor_aspects.size(); }
  std::size_t feature_size() const noexcept { return image_size / kStride; }
  /// Throws ContractError on an unusable configuration.
  void validate() const;
};

/// Box-coder weights for the second stage (the RPN uses unit weights).
inline constexpr std::array<double, 4> kHeadCoderWeights{10.0, 10.0, 5.0, 5.0};

struct Features {
  Var f1;      // [1, C, h, w]
  Var sa_map;  // f1 itself when SEA is disabled
  std::optional<sea::AttentionOutput> attention;
};

struct RpnOutput {
  Var logits;  // [1, K, h, w], channel k = scale * aspects + aspect
  Var deltas;  // [1, 4K, h, w], channel 4k + (dx, dy, dw, dh)
};

struct HeadOutput {
  Var class_logits;  // [R, classes + 1], column 0 is background
  Var box_deltas;    // [R, 4 * classes]
};

/// Backbone, optional SEA block, RPN and box head sharing one ParameterSet.
/// Every component draws its initial weights from its own seed stream, so a
/// model built with use_sea = false has the same non-SEA weights as one with SEA.
class DetectorModel {
 public:
  DetectorModel(DetectorConfig config, std::uint64_t seed);

  const DetectorConfig& config() const noexcept { return config_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  const std::vector<Anchor>& anchors() const noexcept { return anchors_; }
  const std::optional<sea::AttentionParams>& attention() const noexcept { return attention_; }
  /// Current value of the SEA gain; 0 without SEA.
  double gamma() const;

  /// image [1, 3, S, S] -> f1 [1, 32, S/8, S/8]. ContractError on a size mismatch.
  Var backbone_forward(Tape& tape, const Var& image);
  Features features(Tape& tape, const Var& image);
  RpnOutput rpn_forward(Tape& tape, const Var& sa_map);
  HeadOutput head_forward(Tape& tape, const Var& sa_map, const std::vector<Box>& rois);

 private:
  DetectorConfig config_;
  ParameterSet params_;
  std::vector<nn::Conv2d> backbone_;
  std::optional<sea::AttentionParams> attention_;
  nn::Conv2d rpn_conv_, rpn_cls_, rpn_reg_;
  nn::Linear fc1_, fc2_, cls_, reg_;
  std::vector<Anchor> anchors_;
};

/// Decodes every anchor, clips to the image, drops boxes under one pixel,
/// keeps the `pre_nms` best by objectness, suppresses at `nms_iou` and
/// returns at most `post_nms` boxes scored by sigmoid(objectness).
std::vector<ScoredBox> select_proposals(const Tensor& logits, const Tensor& deltas, const std::vector<Anchor>& anchors,
                                        double image_size, std::size_t pre_nms, double nms_iou, std::size_t post_nms);

/// Sampled anchor labels: 1 positive, 0 negative, -1 ignored.
struct RpnTargets {
  std::vector<int> labels;
  std::vector<BoxDelta> deltas;  // valid where label == 1
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

RpnTargets assign_rpn_targets(const std::vector<Anchor>& anchors, const std::vector<Annotation>& ground_truth,
                              const DetectorConfig& config, Rng& rng);

struct RpnLoss {
  Var classification;
  Var regression;  // a zero constant when no anchor is positive
};

RpnLoss rpn_loss(Tape& tape, const RpnOutput& out, const RpnTargets& targets, const DetectorConfig& config);

struct RoiTargets {
  std::vector<Box> rois;
  std::vector<int> labels;       // 0 background, c + 1 for class c
  std::vector<BoxDelta> deltas;  // valid where label > 0
};

/// Samples second-stage RoIs from proposals plus the ground-truth boxes.
RoiTargets sample_rois(const std::vector<ScoredBox>& proposals, const std::vector<Annotation>& ground_truth,
                       const DetectorConfig& config, Rng& rng);

struct LossBreakdown {
  double rpn_classification = 0.0;
  double rpn_regression = 0.0;
  double head_classification = 0.0;
  double head_regression = 0.0;
  bool had_positive_anchor = true;

  double total() const noexcept {
    return rpn_classification + rpn_regression + head_classification + head_regression;
  }
};

/// Ldet for one annotated image, recorded on `tape`.
Var detection_loss(Tape& tape, DetectorModel& model, const DetectionSample& sample, Rng& rng,
                   LossBreakdown* breakdown = nullptr);

/// Full pipeline with frozen weights. Class-wise NMS; sorted by descending
/// confidence (ties by class then box); boxes clipped to the image.
std::vector<Detection> infer(DetectorModel& model, const Tensor& image, double score_threshold = 0.05,
                             double nms_threshold = 0.5);

struct DetectorTrainConfig {
  std::size_t iterations = 2000;
  std::size_t lr_boundary = 1600;  ///< first iteration that uses late_lr
  double base_lr = 1e-3;
  double late_lr = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  std::optional<std::filesystem::path> output_dir;

  void validate() const;
  double lr_at(std::size_t iteration) const noexcept { return iteration < lr_boundary ? base_lr : late_lr; }
};

struct IterationRecord {
  std::size_t iteration = 0;
  double lr = 0.0;
  LossBreakdown loss;  ///< batch mean
};

struct DetectorTrainResult {
  DetectorModel model;
  std::vector<IterationRecord> trace;
  std::size_t images_without_positive_anchor = 0;
};

using IterationObserver = std::function<void(const IterationRecord&)>;

/// Momentum SGD over mini-batches sampled without replacement per pass.
/// Writes trace.jsonl and checkpoints under output_dir when set. A
/// non-finite loss throws NumericError; the last checkpoint on disk is kept.
DetectorTrainResult train_detector(const std::vector<DetectionSample>& samples, DetectorModel model,
                                   const DetectorTrainConfig& config, const IterationObserver& observer = {});

/// Writes detector.ckpt and detector.json (format "gammadesk.detector").
void save_detector(const std::filesystem::path& dir, const DetectorModel& model);
DetectorModel load_detector(const std::filesystem::path& dir);

struct DetectionReport {
  metrics::EvalResult result;
  std::vector<std::vector<Detection>> detections;  // per sample
};

DetectionReport evaluate_detector(DetectorModel& model, const std::vector<DetectionSample>& samples,
                                  double score_threshold = 0.05, double nms_threshold = 0.5,
                                  double iou_threshold = 0.5);

}  // namespace gammadesk::det
