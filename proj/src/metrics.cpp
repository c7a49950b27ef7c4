#include "gammadesk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "gammadesk/errors.hpp"
#include "gammadesk/nn.hpp"
#include "gammadesk/rng.hpp"

namespace gammadesk::metrics {

GaussianStats fit_gaussian(const Eigen::MatrixXd& features) {
  if (features.rows() < 2)
    throw ContractError("fit_gaussian needs at least 2 samples, got " + std::to_string(features.rows()));
  GaussianStats s;
  s.count = static_cast<std::size_t>(features.rows());
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  s.cov = 0.5 * (cov + cov.transpose());
  return s;
}

Eigen::MatrixXd matrix_sqrt(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw ContractError("matrix_sqrt needs a square matrix");
  if (m.rows() == 0) return m;
  const double scale = std::max(m.cwiseAbs().maxCoeff(), 1e-300);
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
    throw NumericError("matrix_sqrt: input is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  if (eig.info() != Eigen::Success) throw NumericError("matrix_sqrt: eigendecomposition failed");
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  const double norm2 = lambda.cwiseAbs().maxCoeff();
  if (lambda.minCoeff() < -1e-6 * norm2)
    throw NumericError("matrix_sqrt: matrix is not positive semidefinite (eigenvalue " +
                       std::to_string(lambda.minCoeff()) + ")");
  const Eigen::VectorXd root = lambda.cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

double fid(const GaussianStats& x, const GaussianStats& g) {
  if (x.mean.size() != g.mean.size() || x.cov.rows() != g.cov.rows())
    throw ContractError("fid: dimension mismatch " + std::to_string(x.mean.size()) + " vs " +
                        std::to_string(g.mean.size()));
  const double mean_term = (x.mean - g.mean).squaredNorm();
  const Eigen::MatrixXd sx = matrix_sqrt(x.cov);
  Eigen::MatrixXd inner = sx * g.cov * sx;
  inner = 0.5 * (inner + inner.transpose());
  const double cross = matrix_sqrt(inner).trace();
  const double total = mean_term + x.cov.trace() + g.cov.trace() - 2.0 * cross;
  const double slack = 1e-8 * (1.0 + x.cov.trace() + g.cov.trace() + mean_term);
  if (total < -slack) throw NumericError("fid: negative distance " + std::to_string(total));
  return std::max(total, 0.0);
}

RandomConvEncoder::RandomConvEncoder(std::uint64_t seed, EncoderConfig config) : config_(std::move(config)) {
  if (config_.channels.empty()) throw ContractError("encoder needs at least one stage");
  Rng rng = Rng(seed).split("fid-encoder");
  std::size_t in = 3;
  for (auto out : config_.channels) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
    kernels_.push_back(nn::normal_tensor({out, in, 3, 3}, stddev, rng));
    in = out;
  }
}

Eigen::VectorXd RandomConvEncoder::embed(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != config_.image_size ||
      image.dim(2) != config_.image_size)
    throw ContractError("encoder expects [3," + std::to_string(config_.image_size) + "," +
                        std::to_string(config_.image_size) + "] images, got " + shape_str(image.shape()));
  Tensor x = image.reshaped({1, 3, image.dim(1), image.dim(2)});
  for (const auto& k : kernels_) {
    x = conv2d_forward(x, k, 2, 1);
    for (auto& v : x.data()) v = std::max(v, 0.0);
  }
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Eigen::VectorXd e(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += x[ch * hw + k];
    e[static_cast<Eigen::Index>(ch)] = s / static_cast<double>(hw);
  }
  return e;
}

Eigen::MatrixXd embed_images(const std::vector<Tensor>& images, const RandomConvEncoder& encoder) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(encoder.dimension()));
  for (std::size_t i = 0; i < images.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = encoder.embed(images[i]);
  return out;
}

double fid_between(const std::vector<Tensor>& a, const std::vector<Tensor>& b, const RandomConvEncoder& encoder) {
  return fid(fit_gaussian(embed_images(a, encoder)), fit_gaussian(embed_images(b, encoder)));
}

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw ContractError("iou: degenerate box");
  return box_overlap(a, b);
}

ApResult average_precision(const std::vector<ScoredDetection>& detections,
                           const std::vector<GroundTruthBox>& ground_truth, double iou_threshold) {
  ApResult r;
  if (ground_truth.empty()) {
    r.flagged = true;
    r.false_positives = detections.size();
    if (!detections.empty()) r.ap = 0.0;
    return r;
  }
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<bool> matched(ground_truth.size(), false);
  std::vector<bool> is_tp;
  is_tp.reserve(order.size());
  for (auto di : order) {
    const auto& d = detections[di];
    double best = -1.0;
    std::size_t best_gt = 0;
    for (std::size_t gi = 0; gi < ground_truth.size(); ++gi) {
      if (matched[gi] || ground_truth[gi].image != d.image) continue;
      const double o = box_overlap(d.box, ground_truth[gi].box);
      if (o > best) {
        best = o;
        best_gt = gi;
      }
    }
    const bool tp = best >= iou_threshold;
    if (tp) matched[best_gt] = true;
    is_tp.push_back(tp);
  }

  const double n_gt = static_cast<double>(ground_truth.size());
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (bool t : is_tp) {
    t ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  // Precision envelope, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
  }
  r.ap = ap;
  r.true_positives = tp;
  r.false_positives = fp;
  r.false_negatives = ground_truth.size() - tp;
  return r;
}

double mean_ap(const std::vector<std::optional<double>>& per_class) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& ap : per_class)
    if (ap) {
      s += *ap;
      ++n;
    }
  if (n == 0) throw ContractError("mean_ap: no class has a defined AP");
  return s / static_cast<double>(n);
}

EvalResult evaluate_detections(const std::vector<std::vector<LabeledDetection>>& detections,
                               const std::vector<std::vector<LabeledBox>>& ground_truth, std::size_t num_classes,
                               double iou_threshold) {
  if (detections.size() != ground_truth.size())
    throw ContractError("evaluate_detections: " + std::to_string(detections.size()) + " detection lists for " +
                        std::to_string(ground_truth.size()) + " images");
  std::vector<std::vector<ScoredDetection>> dets(num_classes);
  std::vector<std::vector<GroundTruthBox>> gts(num_classes);
  for (std::size_t img = 0; img < detections.size(); ++img) {
    for (const auto& d : detections[img]) {
      if (d.class_id < 0 || static_cast<std::size_t>(d.class_id) >= num_classes)
        throw ContractError("evaluate_detections: class id out of range");
      dets[d.class_id].push_back({img, d.box, d.confidence});
    }
    for (const auto& g : ground_truth[img]) {
      if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= num_classes)
        throw ContractError("evaluate_detections: class id out of range");
      gts[g.class_id].push_back({img, g.box});
    }
  }
  EvalResult out;
  out.iou_threshold = iou_threshold;
  std::vector<std::optional<double>> aps;
  for (std::size_t c = 0; c < num_classes; ++c) {
    out.per_class.push_back(average_precision(dets[c], gts[c], iou_threshold));
    // Classes with neither ground truth nor detections are excluded from the mean.
    aps.push_back(out.per_class.back().ap);
  }
  out.map = mean_ap(aps);
  return out;
}

}  // namespace gammadesk::metrics
