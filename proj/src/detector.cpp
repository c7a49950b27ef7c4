#include "gammadesk/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "gammadesk/checkpoint.hpp"
#include "gammadesk/errors.hpp"
#include "gammadesk/optim.hpp"

namespace gammadesk::det {

namespace fs = std::filesystem;

std::vector<Anchor> generate_anchors(std::size_t feat_h, std::size_t feat_w, double stride,
                                     const std::vector<double>& scales, const std::vector<double>& aspects,
                                     double origin_x, double origin_y) {
  if (!(stride > 0.0)) throw ContractError("anchor stride must be positive");
  std::vector<Anchor> out;
  out.reserve(feat_h * feat_w * scales.size() * aspects.size());
  for (std::size_t y = 0; y < feat_h; ++y)
    for (std::size_t x = 0; x < feat_w; ++x)
      for (std::size_t s = 0; s < scales.size(); ++s)
        for (std::size_t a = 0; a < aspects.size(); ++a) {
          const double root = std::sqrt(aspects[a]);
          out.push_back({origin_x + (static_cast<double>(x) + 0.5) * stride,
                         origin_y + (static_cast<double>(y) + 0.5) * stride, scales[s] / root, scales[s] * root, s,
                         a});
        }
  return out;
}

void DetectorConfig::validate() const {
  if (class_names.empty()) throw ContractError("detector needs at least one class");
  if (image_size < 2 * kStride || image_size % kStride != 0)
    throw ContractError("detector image size must be a multiple of " + std::to_string(kStride) + " and at least " +
                        std::to_string(2 * kStride) + ", got " + std::to_string(image_size));
  if (anchor_scales.empty() || anchor_aspects.empty()) throw ContractError("anchor scales and aspects must be non-empty");
  for (double v : anchor_scales)
    if (!(v > 0.0)) throw ContractError("anchor scales must be positive");
  for (double v : anchor_aspects)
    if (!(v > 0.0)) throw ContractError("anchor aspects must be positive");
  if (!(rpn_nms_iou > 0.0 && rpn_nms_iou < 1.0)) throw ContractError("rpn_nms_iou must lie in (0,1)");
  if (rpn_batch == 0 || roi_batch == 0 || train_proposals == 0 || test_proposals == 0 || rpn_pre_nms == 0)
    throw ContractError("proposal and sampling budgets must be positive");
  if (!(rpn_negative_iou <= rpn_positive_iou)) throw ContractError("rpn negative IoU must not exceed positive IoU");
  if (pool_size == 0 || fc_width == 0) throw ContractError("pool size and fc width must be positive");
}

// ---------------------------------------------------------------------------
// Model

namespace {

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

void require_image(const Var& image, std::size_t size) {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != 3 || s[2] != size || s[3] != size)
    throw ContractError("detector expects an image [1,3," + std::to_string(size) + "," + std::to_string(size) +
                        "], got " + shape_str(s));
}

Var as_batch_of_one(Tape& tape, const Tensor& image) {
  if (image.rank() == 3) return tape.constant(image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}));
  return tape.constant(image);
}

}  // namespace

DetectorModel::DetectorModel(DetectorConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const Rng root(derive_seed(seed, "detector"));

  struct Layer {
    std::size_t in, out, stride;
  };
  const Layer layers[] = {{3, 16, 1}, {16, 16, 2}, {16, 32, 1}, {32, 32, 2}, {32, 32, 1}, {32, kFeatureChannels, 2}};
  Rng rng = root.split("backbone");
  for (std::size_t i = 0; i < std::size(layers); ++i) {
    const auto& l = layers[i];
    backbone_.push_back(nn::make_conv(params_, "backbone.conv" + std::to_string(i), l.in, l.out, 3, l.stride, 1, true,
                                      he_std(l.in * 9), rng));
  }

  if (config_.use_sea) {
    Rng sea_rng = root.split("sea");
    attention_ = sea::make_attention(params_, "sea", kFeatureChannels, sea_rng);
  }

  const std::size_t k = config_.anchors_per_cell();
  rng = root.split("rpn");
  rpn_conv_ = nn::make_conv(params_, "rpn.conv", kFeatureChannels, kFeatureChannels, 3, 1, 1, true, 0.01, rng);
  rpn_cls_ = nn::make_conv(params_, "rpn.cls", kFeatureChannels, k, 1, 1, 0, true, 0.01, rng);
  rpn_reg_ = nn::make_conv(params_, "rpn.reg", kFeatureChannels, 4 * k, 1, 1, 0, true, 0.01, rng);

  rng = root.split("head");
  const std::size_t pooled = kFeatureChannels * config_.pool_size * config_.pool_size;
  fc1_ = nn::make_linear(params_, "head.fc1", pooled, config_.fc_width, he_std(pooled), rng);
  fc2_ = nn::make_linear(params_, "head.fc2", config_.fc_width, config_.fc_width, he_std(config_.fc_width), rng);
  cls_ = nn::make_linear(params_, "head.cls", config_.fc_width, config_.num_classes() + 1, 0.01, rng);
  reg_ = nn::make_linear(params_, "head.reg", config_.fc_width, 4 * config_.num_classes(), 0.001, rng);

  const std::size_t fs = config_.feature_size();
  anchors_ = generate_anchors(fs, fs, static_cast<double>(kStride), config_.anchor_scales, config_.anchor_aspects);
}

double DetectorModel::gamma() const { return attention_ ? params_[attention_->gamma].value[0] : 0.0; }

Var DetectorModel::backbone_forward(Tape& tape, const Var& image) {
  require_image(image, config_.image_size);
  Var h = image;
  for (const auto& conv : backbone_) h = relu(conv(tape, params_, h));
  return h;
}

Features DetectorModel::features(Tape& tape, const Var& image) {
  Features f;
  f.f1 = backbone_forward(tape, image);
  if (attention_) {
    f.attention = sea::sea_forward(tape, params_, *attention_, f.f1);
    f.sa_map = f.attention->sa_map;
  } else {
    f.sa_map = f.f1;
  }
  return f;
}

RpnOutput DetectorModel::rpn_forward(Tape& tape, const Var& sa_map) {
  const std::size_t fs = config_.feature_size();
  const Shape& s = sa_map.shape();
  if (s.size() != 4 || s[0] != 1 || s[1] != kFeatureChannels || s[2] != fs || s[3] != fs)
    throw ContractError("rpn expects features [1," + std::to_string(kFeatureChannels) + "," + std::to_string(fs) + "," +
                        std::to_string(fs) + "] to match the anchor grid, got " + shape_str(s));
  Var h = relu(rpn_conv_(tape, params_, sa_map));
  return {rpn_cls_(tape, params_, h), rpn_reg_(tape, params_, h)};
}

HeadOutput DetectorModel::head_forward(Tape& tape, const Var& sa_map, const std::vector<Box>& rois) {
  if (rois.empty()) throw ContractError("detection head needs at least one RoI");
  std::vector<RoiBox> r;
  r.reserve(rois.size());
  for (const auto& b : rois) r.push_back(b.coords());
  const std::size_t p = config_.pool_size;
  Var pooled = roi_align(sa_map, r, p, p, 1.0 / static_cast<double>(kStride), 2, true);
  Var h = reshape(pooled, {rois.size(), kFeatureChannels * p * p});
  h = relu(fc1_(tape, params_, h));
  h = relu(fc2_(tape, params_, h));
  return {cls_(tape, params_, h), reg_(tape, params_, h)};
}

// ---------------------------------------------------------------------------
// Proposals and targets

namespace {

const BoxCoder& rpn_coder() {
  static const BoxCoder coder;
  return coder;
}

const BoxCoder& head_coder() {
  static const BoxCoder coder(kHeadCoderWeights);
  return coder;
}

double sigmoid_of(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Position of anchor i's objectness in a [1, K, h, w] tensor.
struct AnchorSlot {
  std::size_t channel;
  std::size_t cell;
};

AnchorSlot slot_of(std::size_t anchor, std::size_t k) { return {anchor % k, anchor / k}; }

std::vector<std::size_t> take_random(std::vector<std::size_t> pool, std::size_t n, Rng& rng) {
  if (pool.size() > n) {
    rng.shuffle(pool);
    pool.resize(n);
    std::sort(pool.begin(), pool.end());
  }
  return pool;
}

}  // namespace

std::vector<ScoredBox> select_proposals(const Tensor& logits, const Tensor& deltas, const std::vector<Anchor>& anchors,
                                        double image_size, std::size_t pre_nms, double nms_iou, std::size_t post_nms) {
  if (logits.rank() != 4 || deltas.rank() != 4 || deltas.dim(1) != 4 * logits.dim(1))
    throw ShapeError("proposal tensors " + shape_str(logits.shape()) + " and " + shape_str(deltas.shape()) +
                     " are inconsistent");
  const std::size_t k = logits.dim(1), cells = logits.dim(2) * logits.dim(3);
  if (anchors.size() != k * cells)
    throw ContractError("anchor grid of " + std::to_string(anchors.size()) + " does not match RPN output " +
                        shape_str(logits.shape()));

  std::vector<ScoredBox> all;
  all.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto [c, cell] = slot_of(i, k);
    const BoxDelta d{deltas[(4 * c + 0) * cells + cell], deltas[(4 * c + 1) * cells + cell],
                     deltas[(4 * c + 2) * cells + cell], deltas[(4 * c + 3) * cells + cell]};
    const Box b = clip_box(rpn_coder().decode(anchors[i].box(), d), image_size, image_size);
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    all.push_back({b, logits[c * cells + cell]});
  }
  // Stable order on ties keeps the result independent of the sort algorithm.
  std::stable_sort(all.begin(), all.end(), [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  if (all.size() > pre_nms) all.resize(pre_nms);
  std::vector<ScoredBox> out;
  for (std::size_t idx : nms(all, nms_iou)) {
    if (out.size() == post_nms) break;
    out.push_back({all[idx].box, sigmoid_of(all[idx].score)});
  }
  return out;
}

RpnTargets assign_rpn_targets(const std::vector<Anchor>& anchors, const std::vector<Annotation>& ground_truth,
                              const DetectorConfig& config, Rng& rng) {
  const std::size_t n = anchors.size(), m = ground_truth.size();
  RpnTargets t;
  t.labels.assign(n, -1);
  t.deltas.assign(n, {});
  std::vector<double> best(n, 0.0);
  std::vector<std::size_t> best_gt(n, 0);
  std::vector<double> gt_best(m, 0.0);
  std::vector<std::vector<double>> overlap(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const Box a = anchors[i].box();
    for (std::size_t g = 0; g < m; ++g) {
      const double v = box_overlap(a, ground_truth[g].box);
      overlap[i][g] = v;
      if (v > best[i]) best[i] = v, best_gt[i] = g;
      gt_best[g] = std::max(gt_best[g], v);
    }
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < n; ++i) {
    bool positive = best[i] >= config.rpn_positive_iou;
    for (std::size_t g = 0; g < m && !positive; ++g)
      if (gt_best[g] > 0.0 && overlap[i][g] == gt_best[g]) {
        positive = true;
        best_gt[i] = g;
      }
    if (positive)
      pos.push_back(i);
    else if (best[i] < config.rpn_negative_iou)
      neg.push_back(i);
  }
  const auto max_pos = static_cast<std::size_t>(std::lround(config.rpn_positive_fraction * config.rpn_batch));
  pos = take_random(std::move(pos), max_pos, rng);
  neg = take_random(std::move(neg), config.rpn_batch - pos.size(), rng);
  for (std::size_t i : pos) {
    t.labels[i] = 1;
    t.deltas[i] = rpn_coder().encode(anchors[i].box(), ground_truth[best_gt[i]].box);
  }
  for (std::size_t i : neg) t.labels[i] = 0;
  t.positives = pos.size();
  t.negatives = neg.size();
  return t;
}

RpnLoss rpn_loss(Tape& tape, const RpnOutput& out, const RpnTargets& targets, const DetectorConfig& config) {
  const Shape& ls = out.logits.shape();
  const std::size_t k = config.anchors_per_cell(), cells = ls[2] * ls[3];
  if (targets.labels.size() != k * cells) throw ContractError("rpn targets do not match the anchor grid");
  Tensor cls_t = Tensor::zeros(ls), cls_w = Tensor::zeros(ls);
  const Shape& ds = out.deltas.shape();
  Tensor reg_t = Tensor::zeros(ds), reg_w = Tensor::zeros(ds);
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    const int label = targets.labels[i];
    if (label < 0) continue;
    const auto [c, cell] = slot_of(i, k);
    cls_w[c * cells + cell] = 1.0;
    cls_t[c * cells + cell] = label;
    if (label == 1) {
      const auto& d = targets.deltas[i];
      const double v[4] = {d.dx, d.dy, d.dw, d.dh};
      for (std::size_t j = 0; j < 4; ++j) {
        reg_t[(4 * c + j) * cells + cell] = v[j];
        reg_w[(4 * c + j) * cells + cell] = 1.0;
      }
    }
  }
  const double sampled = std::max<double>(1.0, static_cast<double>(targets.positives + targets.negatives));
  RpnLoss loss;
  loss.classification = bce_with_logits(out.logits, cls_t, cls_w, sampled);
  loss.regression = targets.positives > 0 ? smooth_l1(out.deltas, reg_t, reg_w, 1.0 / 9.0, sampled)
                                          : tape.constant(Tensor::scalar(0.0));
  return loss;
}

RoiTargets sample_rois(const std::vector<ScoredBox>& proposals, const std::vector<Annotation>& ground_truth,
                       const DetectorConfig& config, Rng& rng) {
  std::vector<Box> candidates;
  candidates.reserve(proposals.size() + ground_truth.size());
  for (const auto& p : proposals) candidates.push_back(p.box);
  for (const auto& g : ground_truth) candidates.push_back(g.box);

  std::vector<std::size_t> fg, bg;
  std::vector<std::size_t> match(candidates.size(), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0.0;
    for (std::size_t g = 0; g < ground_truth.size(); ++g) {
      const double v = box_overlap(candidates[i], ground_truth[g].box);
      if (v > best) best = v, match[i] = g;
    }
    (best >= config.roi_foreground_iou ? fg : bg).push_back(i);
  }
  const auto max_fg = static_cast<std::size_t>(std::lround(config.roi_foreground_fraction * config.roi_batch));
  fg = take_random(std::move(fg), max_fg, rng);
  bg = take_random(std::move(bg), config.roi_batch - fg.size(), rng);

  RoiTargets t;
  for (std::size_t i : fg) {
    const auto& gt = ground_truth[match[i]];
    t.rois.push_back(candidates[i]);
    t.labels.push_back(gt.class_id + 1);
    t.deltas.push_back(head_coder().encode(candidates[i], gt.box));
  }
  for (std::size_t i : bg) {
    t.rois.push_back(candidates[i]);
    t.labels.push_back(0);
    t.deltas.push_back({});
  }
  return t;
}

Var detection_loss(Tape& tape, DetectorModel& model, const DetectionSample& sample, Rng& rng,
                   LossBreakdown* breakdown) {
  const DetectorConfig& cfg = model.config();
  validate_sample(sample, cfg.num_classes());
  const Features f = model.features(tape, as_batch_of_one(tape, sample.image));
  const RpnOutput rpn = model.rpn_forward(tape, f.sa_map);
  for (const Var* v : {&rpn.logits, &rpn.deltas})
    for (double x : v->value().data())
      if (!std::isfinite(x)) throw NumericError("non-finite RPN output on " + sample.name);

  const RpnTargets rt = assign_rpn_targets(model.anchors(), sample.annotations, cfg, rng);
  const RpnLoss rl = rpn_loss(tape, rpn, rt, cfg);

  const auto proposals = select_proposals(rpn.logits.value(), rpn.deltas.value(), model.anchors(),
                                          static_cast<double>(cfg.image_size), cfg.rpn_pre_nms, cfg.rpn_nms_iou,
                                          cfg.train_proposals);
  const RoiTargets roi = sample_rois(proposals, sample.annotations, cfg, rng);

  Var total = add(rl.classification, rl.regression);
  double head_cls = 0.0, head_reg = 0.0;
  if (!roi.rois.empty()) {
    const HeadOutput head = model.head_forward(tape, f.sa_map, roi.rois);
    const double r = static_cast<double>(roi.rois.size());
    Var cls = softmax_cross_entropy(head.class_logits, roi.labels, r);
    const Shape& ds = head.box_deltas.shape();
    Tensor reg_t = Tensor::zeros(ds), reg_w = Tensor::zeros(ds);
    for (std::size_t i = 0; i < roi.rois.size(); ++i) {
      if (roi.labels[i] <= 0) continue;
      const std::size_t col = 4 * static_cast<std::size_t>(roi.labels[i] - 1);
      const auto& d = roi.deltas[i];
      const double v[4] = {d.dx, d.dy, d.dw, d.dh};
      for (std::size_t j = 0; j < 4; ++j) {
        reg_t[i * ds[1] + col + j] = v[j];
        reg_w[i * ds[1] + col + j] = 1.0;
      }
    }
    Var reg = smooth_l1(head.box_deltas, reg_t, reg_w, 1.0, r);
    head_cls = cls.value()[0];
    head_reg = reg.value()[0];
    total = add(total, add(cls, reg));
  }
  if (breakdown) {
    breakdown->rpn_classification = rl.classification.value()[0];
    breakdown->rpn_regression = rl.regression.value()[0];
    breakdown->head_classification = head_cls;
    breakdown->head_regression = head_reg;
    breakdown->had_positive_anchor = rt.positives > 0;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Inference

std::vector<Detection> infer(DetectorModel& model, const Tensor& image, double score_threshold,
                             double nms_threshold) {
  const DetectorConfig& cfg = model.config();
  Tape tape;
  tape.freeze_all();
  const Features f = model.features(tape, as_batch_of_one(tape, image));
  const RpnOutput rpn = model.rpn_forward(tape, f.sa_map);
  const double size = static_cast<double>(cfg.image_size);
  const auto proposals = select_proposals(rpn.logits.value(), rpn.deltas.value(), model.anchors(), size,
                                          cfg.rpn_pre_nms, cfg.rpn_nms_iou, cfg.test_proposals);
  if (proposals.empty()) return {};
  std::vector<Box> rois;
  for (const auto& p : proposals) rois.push_back(p.box);
  const HeadOutput head = model.head_forward(tape, f.sa_map, rois);
  const Tensor& logits = head.class_logits.value();
  const Tensor& deltas = head.box_deltas.value();
  const std::size_t classes = cfg.num_classes(), width = classes + 1;

  std::vector<Detection> out;
  std::vector<double> prob(width);
  std::vector<std::vector<ScoredBox>> per_class(classes);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const double* z = logits.ptr() + r * width;
    const double zmax = *std::max_element(z, z + width);
    double norm = 0.0;
    for (std::size_t c = 0; c < width; ++c) norm += prob[c] = std::exp(z[c] - zmax);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = prob[c + 1] / norm;
      if (p < score_threshold) continue;
      const double* d = deltas.ptr() + r * 4 * classes + 4 * c;
      const Box b = clip_box(head_coder().decode(rois[r], {d[0], d[1], d[2], d[3]}), size, size);
      if (!b.valid()) continue;
      per_class[c].push_back({b, p});
    }
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t idx : nms(per_class[c], nms_threshold))
      out.push_back({per_class[c][idx].box, static_cast<int>(c), per_class[c][idx].score});
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.box.coords() < b.box.coords();
  });
  if (out.size() > cfg.max_detections) out.resize(cfg.max_detections);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

nlohmann::json config_json(const DetectorConfig& c) {
  return {{"format", "gammadesk.detector"},
          {"version", 1},
          {"image_size", c.image_size},
          {"class_names", c.class_names},
          {"use_sea", c.use_sea},
          {"anchor_scales", c.anchor_scales},
          {"anchor_aspects", c.anchor_aspects},
          {"rpn_pre_nms", c.rpn_pre_nms},
          {"rpn_nms_iou", c.rpn_nms_iou},
          {"train_proposals", c.train_proposals},
          {"test_proposals", c.test_proposals},
          {"rpn_batch", c.rpn_batch},
          {"rpn_positive_fraction", c.rpn_positive_fraction},
          {"rpn_positive_iou", c.rpn_positive_iou},
          {"rpn_negative_iou", c.rpn_negative_iou},
          {"roi_batch", c.roi_batch},
          {"roi_foreground_fraction", c.roi_foreground_fraction},
          {"roi_foreground_iou", c.roi_foreground_iou},
          {"pool_size", c.pool_size},
          {"fc_width", c.fc_width},
          {"max_detections", c.max_detections}};
}

DetectorConfig config_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "gammadesk.detector" || j.value("version", 0) != 1)
    throw IngestionError("detector.json has an unknown format tag or version");
  DetectorConfig c;
  j.at("image_size").get_to(c.image_size);
  j.at("class_names").get_to(c.class_names);
  j.at("use_sea").get_to(c.use_sea);
  j.at("anchor_scales").get_to(c.anchor_scales);
  j.at("anchor_aspects").get_to(c.anchor_aspects);
  j.at("rpn_pre_nms").get_to(c.rpn_pre_nms);
  j.at("rpn_nms_iou").get_to(c.rpn_nms_iou);
  j.at("train_proposals").get_to(c.train_proposals);
  j.at("test_proposals").get_to(c.test_proposals);
  j.at("rpn_batch").get_to(c.rpn_batch);
  j.at("rpn_positive_fraction").get_to(c.rpn_positive_fraction);
  j.at("rpn_positive_iou").get_to(c.rpn_positive_iou);
  j.at("rpn_negative_iou").get_to(c.rpn_negative_iou);
  j.at("roi_batch").get_to(c.roi_batch);
  j.at("roi_foreground_fraction").get_to(c.roi_foreground_fraction);
  j.at("roi_foreground_iou").get_to(c.roi_foreground_iou);
  j.at("pool_size").get_to(c.pool_size);
  j.at("fc_width").get_to(c.fc_width);
  j.at("max_detections").get_to(c.max_detections);
  return c;
}

}  // namespace

void save_detector(const fs::path& dir, const DetectorModel& model) {
  fs::create_directories(dir);
  save_checkpoint(dir / "detector.ckpt", model.params());
  std::ofstream out(dir / "detector.json");
  if (!out) throw IngestionError("cannot write " + (dir / "detector.json").string());
  out << config_json(model.config()).dump(2) << '\n';
}

DetectorModel load_detector(const fs::path& dir) {
  const fs::path meta = dir / "detector.json";
  std::ifstream in(meta);
  if (!in) throw IngestionError("missing " + meta.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(meta.string() + ": " + e.what());
  }
  DetectorConfig cfg;
  try {
    cfg = config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(meta.string() + ": " + e.what());
  }
  DetectorModel model(std::move(cfg), 0);
  load_checkpoint_into(dir / "detector.ckpt", model.params());
  return model;
}

// ---------------------------------------------------------------------------
// Training

void DetectorTrainConfig::validate() const {
  if (iterations == 0) throw ContractError("detector training needs at least one iteration");
  if (batch_size == 0) throw ContractError("detector batch size must be >= 1");
  if (!(base_lr > 0.0) || !(late_lr > 0.0)) throw ContractError("detector learning rates must be positive");
  if (momentum < 0.0 || weight_decay < 0.0) throw ContractError("momentum and weight decay must be non-negative");
}

namespace {

std::string iteration_dir(std::size_t it) {
  std::ostringstream ss;
  ss << "iter_" << std::setw(6) << std::setfill('0') << it;
  return ss.str();
}

}  // namespace

DetectorTrainResult train_detector(const std::vector<DetectionSample>& samples, DetectorModel model,
                                   const DetectorTrainConfig& config, const IterationObserver& observer) {
  config.validate();
  if (samples.empty()) throw ContractError("detector training needs at least one annotated sample");
  for (const auto& s : samples) validate_sample(s, model.config().num_classes());

  DetectorTrainResult result{std::move(model), {}, 0};
  DetectorModel& m = result.model;
  SgdState opt;
  opt.config = {config.base_lr, config.momentum, config.weight_decay};

  std::optional<fs::path> trace_path;
  if (config.output_dir) {
    fs::create_directories(*config.output_dir);
    trace_path = *config.output_dir / "trace.jsonl";
    std::ofstream(*trace_path, std::ios::trunc);
  }

  Rng order_rng(derive_seed(config.seed, "detector/order"));
  Rng target_rng(derive_seed(config.seed, "detector/targets"));
  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();

  for (std::size_t it = 0; it < config.iterations; ++it) {
    opt.config.lr = config.lr_at(it);
    IterationRecord rec;
    rec.iteration = it;
    rec.lr = opt.config.lr;

    Tape tape;
    Var total;
    const double share = 1.0 / static_cast<double>(config.batch_size);
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        order_rng.shuffle(order);
        cursor = 0;
      }
      LossBreakdown part;
      Var loss = scale(detection_loss(tape, m, samples[order[cursor++]], target_rng, &part), share);
      total = total.valid() ? add(total, loss) : loss;
      rec.loss.rpn_classification += share * part.rpn_classification;
      rec.loss.rpn_regression += share * part.rpn_regression;
      rec.loss.head_classification += share * part.head_classification;
      rec.loss.head_regression += share * part.head_regression;
      if (!part.had_positive_anchor) {
        rec.loss.had_positive_anchor = false;
        ++result.images_without_positive_anchor;
      }
    }
    if (!std::isfinite(total.value()[0]))
      throw NumericError("detector loss became non-finite at iteration " + std::to_string(it));
    sgd_step(m.params(), tape.backward(total), opt);

    result.trace.push_back(rec);
    if (trace_path) {
      nlohmann::json j = {{"format", "gammadesk.detector_trace"},
                          {"version", 1},
                          {"iteration", rec.iteration},
                          {"lr", rec.lr},
                          {"loss", rec.loss.total()},
                          {"rpn_cls", rec.loss.rpn_classification},
                          {"rpn_reg", rec.loss.rpn_regression},
                          {"head_cls", rec.loss.head_classification},
                          {"head_reg", rec.loss.head_regression},
                          {"gamma", m.gamma()}};
      std::ofstream(*trace_path, std::ios::app) << j.dump() << '\n';
    }
    if (observer) observer(rec);
    if (config.output_dir && config.checkpoint_every && (it + 1) % config.checkpoint_every == 0)
      save_detector(*config.output_dir / "checkpoints" / iteration_dir(it + 1), m);
  }
  if (config.output_dir) save_detector(*config.output_dir / "final", m);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

DetectionReport evaluate_detector(DetectorModel& model, const std::vector<DetectionSample>& samples,
                                  double score_threshold, double nms_threshold, double iou_threshold) {
  DetectionReport report;
  std::vector<std::vector<metrics::LabeledDetection>> dets;
  std::vector<std::vector<metrics::LabeledBox>> truth;
  for (const auto& s : samples) {
    report.detections.push_back(infer(model, s.image, score_threshold, nms_threshold));
    auto& d = dets.emplace_back();
    for (const auto& x : report.detections.back()) d.push_back({x.box, x.class_id, x.confidence});
    auto& t = truth.emplace_back();
    for (const auto& a : s.annotations) t.push_back({a.box, a.class_id});
  }
  report.result = metrics::evaluate_detections(dets, truth, model.config().num_classes(), iou_threshold);
  return report;
}

}  // namespace gammadesk::det
