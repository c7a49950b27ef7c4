#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Dense>

#include "gammadesk/errors.hpp"
#include "gammadesk/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace gammadesk;
using namespace gammadesk::metrics;

namespace {

GaussianStats stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) { return {std::move(mean), std::move(cov), 100}; }

Eigen::MatrixXd random_psd(std::size_t d, Rng& rng, std::size_t rank = 0) {
  const std::size_t k = rank ? rank : d;
  Eigen::MatrixXd b(d, k);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.normal();
  return b * b.transpose();
}

}  // namespace

TEST(FitGaussian, IdenticalVectorsGiveZeroCovariance) {
  Eigen::MatrixXd f(4, 3);
  for (int i = 0; i < 4; ++i) f.row(i) << 1.5, -2.0, 0.25;
  auto s = fit_gaussian(f);
  EXPECT_EQ(s.mean, Eigen::Vector3d(1.5, -2.0, 0.25));
  EXPECT_EQ(s.cov.cwiseAbs().maxCoeff(), 0.0);
}

TEST(FitGaussian, HandCovariance) {
  Eigen::MatrixXd f(2, 2);
  f << 0, 0, 2, 0;
  auto s = fit_gaussian(f);
  EXPECT_EQ(s.mean, Eigen::Vector2d(1, 0));
  Eigen::Matrix2d expect;
  expect << 2, 0, 0, 0;
  EXPECT_EQ(s.cov, expect);
  EXPECT_EQ(s.count, 2u);
}

TEST(FitGaussian, SymmetricAndNeedsTwoSamples) {
  Rng rng(3);
  Eigen::MatrixXd f(30, 7);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.normal();
  auto s = fit_gaussian(f);
  EXPECT_LE((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(fit_gaussian(Eigen::MatrixXd::Zero(1, 3)), ContractError);
}

TEST(MatrixSqrt, IdentityAndDiagonal) {
  EXPECT_LT((matrix_sqrt(Eigen::MatrixXd::Identity(4, 4)) - Eigen::MatrixXd::Identity(4, 4)).norm(), 1e-14);
  Eigen::MatrixXd d = Eigen::Vector2d(4, 9).asDiagonal();
  Eigen::MatrixXd r = matrix_sqrt(d);
  EXPECT_NEAR(r(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(r(1, 1), 3.0, 1e-14);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-14);
}

TEST(MatrixSqrt, ReconstructsRandomPsd) {
  Rng rng(12);
  for (std::size_t d : {1u, 2u, 5u, 16u, 33u, 64u}) {
    for (std::size_t rank : {std::size_t{0}, d / 2 + 1}) {
      Eigen::MatrixXd a = random_psd(d, rng, rank);
      Eigen::MatrixXd s = matrix_sqrt(a);
      EXPECT_LT((s * s - a).norm() / a.norm(), 1e-8) << "d=" << d;
    }
  }
}

TEST(MatrixSqrt, RejectsIndefinite) {
  Eigen::MatrixXd m = Eigen::Vector2d(1.0, -0.5).asDiagonal();
  EXPECT_THROW(matrix_sqrt(m), NumericError);
}

TEST(Fid, AnalyticCases) {
  auto eye = Eigen::MatrixXd::Identity(2, 2);
  auto s = stats(Eigen::Vector2d(0.3, -1), 2.0 * eye);
  EXPECT_NEAR(fid(s, s), 0.0, 1e-8);
  EXPECT_NEAR(fid(stats(Eigen::Vector2d(0, 0), eye), stats(Eigen::Vector2d(1, 0), eye)), 1.0, 1e-8);
  EXPECT_NEAR(fid(stats(Eigen::Vector2d(0, 0), 4.0 * eye), stats(Eigen::Vector2d(0, 0), eye)), 2.0, 1e-8);
}

TEST(Fid, SymmetricAndSelfZeroOnRandomStats) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 2 + rng.below(20);
    Eigen::VectorXd m1(d), m2(d);
    for (std::size_t i = 0; i < d; ++i) {
      m1[i] = rng.normal();
      m2[i] = rng.normal();
    }
    auto a = stats(m1, random_psd(d, rng));
    auto b = stats(m2, random_psd(d, rng, d / 2 + 1));
    EXPECT_NEAR(fid(a, b), fid(b, a), 1e-8 * (1.0 + fid(a, b)));
    EXPECT_NEAR(fid(a, a), 0.0, 1e-8 * (1.0 + a.cov.trace()));
    EXPECT_GE(fid(a, b), 0.0);
  }
}

TEST(Fid, DimensionMismatch) {
  EXPECT_THROW(fid(stats(Eigen::Vector2d(0, 0), Eigen::MatrixXd::Identity(2, 2)),
                   stats(Eigen::Vector3d(0, 0, 0), Eigen::MatrixXd::Identity(3, 3))),
               ContractError);
}

TEST(Encoder, DeterministicOrderedAndSizeChecked) {
  RandomConvEncoder enc(5, {16, {8, 12}});
  Rng rng(2);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(testsupport::random_tensor({3, 16, 16}, rng));
  auto e = embed_images(imgs, enc);
  ASSERT_EQ(e.rows(), 3);
  ASSERT_EQ(e.cols(), 12);
  EXPECT_EQ(e.row(1).transpose(), enc.embed(imgs[1]));
  EXPECT_EQ(RandomConvEncoder(5, {16, {8, 12}}).embed(imgs[0]), enc.embed(imgs[0]));
  EXPECT_THROW(enc.embed(Tensor::zeros({3, 8, 8})), ContractError);
}

TEST(Iou, Cases) {
  Box a{0, 0, 10, 10}, b{5, 5, 15, 15};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{20, 20, 30, 30}), 0.0);
  EXPECT_NEAR(iou(a, b), 1.0 / 7.0, 1e-15);
  EXPECT_THROW(iou(a, Box{1, 1, 1, 5}), ContractError);
}

TEST(Iou, SymmetricAndScaleInvariant) {
  Rng rng(31);
  for (int i = 0; i < 500; ++i) {
    auto a = oracles::random_box(rng, 30, false), b = oracles::random_box(rng, 30, false);
    EXPECT_EQ(iou(a, b), iou(b, a));
    const double s = rng.uniform(0.1, 10.0);
    EXPECT_NEAR(iou(scale_box(a, s, s), scale_box(b, s, s)), iou(a, b), 1e-12);
    EXPECT_NEAR(iou(a, b), oracles::iou_ref(a, b), 1e-12);
  }
}

TEST(AveragePrecision, HandCurves) {
  std::vector<GroundTruthBox> gt{{0, {0, 0, 10, 10}}};
  EXPECT_EQ(*average_precision({{0, {0, 0, 10, 10}, 0.9}}, gt).ap, 1.0);
  // TP ranked above FP
  EXPECT_EQ(*average_precision({{0, {0, 0, 10, 10}, 0.9}, {0, {50, 50, 60, 60}, 0.5}}, gt).ap, 1.0);
  // FP ranked above TP: precision 1/2 at recall 1
  EXPECT_EQ(*average_precision({{0, {0, 0, 10, 10}, 0.4}, {0, {50, 50, 60, 60}, 0.5}}, gt).ap, 0.5);
}

TEST(AveragePrecision, DuplicatesAndEmptyCases) {
  std::vector<GroundTruthBox> gt{{0, {0, 0, 10, 10}}};
  auto r = average_precision({{0, {0, 0, 10, 10}, 0.9}, {0, {0, 0, 10, 9}, 0.8}}, gt);
  EXPECT_EQ(r.true_positives, 1u);
  EXPECT_EQ(r.false_positives, 1u);
  EXPECT_EQ(*r.ap, 1.0);
  auto no_gt = average_precision({{0, {0, 0, 1, 1}, 0.3}}, {});
  EXPECT_TRUE(no_gt.flagged);
  EXPECT_EQ(*no_gt.ap, 0.0);
  auto nothing = average_precision({}, {});
  EXPECT_TRUE(nothing.flagged);
  EXPECT_FALSE(nothing.ap.has_value());
  auto missed = average_precision({}, gt);
  EXPECT_EQ(*missed.ap, 0.0);
  EXPECT_EQ(missed.false_negatives, 1u);
}

TEST(AveragePrecision, MatchesBruteForceOracle) {
  Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<ScoredDetection> dets;
    std::vector<GroundTruthBox> gts;
    const std::size_t images = 1 + rng.below(3);
    const std::size_t ng = 1 + rng.below(8), nd = rng.below(13);
    for (std::size_t i = 0; i < ng; ++i) gts.push_back({rng.below(images), oracles::random_box(rng, 12)});
    for (std::size_t i = 0; i < nd; ++i)
      dets.push_back({rng.below(images), oracles::random_box(rng, 12), static_cast<double>(rng.below(6)) / 5.0});
    const double thr = rng.uniform() < 0.5 ? 0.5 : rng.uniform(0.1, 0.9);
    EXPECT_NEAR(*average_precision(dets, gts, thr).ap, oracles::ap_ref(dets, gts, thr), 1e-12);
  }
}

TEST(AveragePrecision, DependsOnlyOnScoreRanks) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoredDetection> dets;
    std::vector<GroundTruthBox> gts;
    for (int i = 0; i < 6; ++i) gts.push_back({0, oracles::random_box(rng, 15)});
    for (int i = 0; i < 10; ++i) dets.push_back({0, oracles::random_box(rng, 15), rng.uniform(-2, 2)});
    auto transformed = dets;
    for (auto& d : transformed) d.score = std::exp(3.0 * d.score) + 7.0;
    EXPECT_EQ(*average_precision(dets, gts).ap, *average_precision(transformed, gts).ap);
  }
}

TEST(MeanAp, TableValues) {
  EXPECT_EQ(mean_ap({95.6, 90.3, 93.1}), 93.0);
  EXPECT_EQ(mean_ap({85.0}), 85.0);
  EXPECT_NEAR(mean_ap({0.7, 0.7, 0.7}), 0.7, 1e-15);
  EXPECT_EQ(mean_ap({0.5, std::nullopt, 1.0}), 0.75);
  EXPECT_THROW(mean_ap({std::nullopt}), ContractError);
}

TEST(EvaluateDetections, MeanOfPerClass) {
  std::vector<std::vector<LabeledBox>> gt{{{{0, 0, 10, 10}, 0}, {{20, 20, 30, 30}, 1}}, {{{5, 5, 9, 9}, 2}}};
  std::vector<std::vector<LabeledDetection>> det{{{{0, 0, 10, 10}, 0, 0.9}, {{20, 20, 30, 30}, 2, 0.8}},
                                                 {{{5, 5, 9, 9}, 2, 0.7}}};
  auto r = evaluate_detections(det, gt, 3);
  ASSERT_EQ(r.per_class.size(), 3u);
  EXPECT_EQ(*r.per_class[0].ap, 1.0);
  EXPECT_EQ(*r.per_class[1].ap, 0.0);
  EXPECT_EQ(*r.per_class[2].ap, 0.5);  // the 0.8 false positive outranks the 0.7 hit
  EXPECT_EQ(r.map, 0.5);
}

TEST(Nms, BasicCases) {
  std::vector<ScoredBox> one{{{0, 0, 5, 5}, 0.3}};
  EXPECT_EQ(nms(one, 0.5), std::vector<std::size_t>{0});
  std::vector<ScoredBox> twins{{{0, 0, 5, 5}, 0.8}, {{0, 0, 5, 5}, 0.9}};
  EXPECT_EQ(nms(twins, 0.5), std::vector<std::size_t>{1});
  EXPECT_THROW(nms(twins, 1.0), ContractError);
}

TEST(Nms, MatchesBruteForceOracle) {
  Rng rng(55);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ScoredBox> boxes;
    const std::size_t n = trial < 100 ? 50 : 1 + rng.below(100);
    for (std::size_t i = 0; i < n; ++i)
      boxes.push_back({oracles::random_box(rng, 25), static_cast<double>(rng.below(10)) / 10.0});
    const double thr = rng.uniform(0.05, 0.95);
    EXPECT_EQ(nms(boxes, thr), oracles::nms_ref(boxes, thr));
  }
}
