#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gammadesk/attention.hpp"
#include "gammadesk/checkpoint.hpp"
#include "gammadesk/errors.hpp"
#include "gammadesk/gradcheck.hpp"
#include "gammadesk/image.hpp"
#include "support.hpp"

using namespace gammadesk;
using namespace gammadesk::sea;
using testsupport::random_tensor;

namespace {

Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

struct Fixture {
  ParameterSet params;
  AttentionParams ap;
  Fixture(std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    ap = make_attention(params, "sea", c, rng);
  }
};

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "gammadesk_sea_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(MakeAttention, RejectsChannelsNotDivisibleByEight) {
  ParameterSet p;
  Rng rng(1);
  EXPECT_THROW(make_attention(p, "a", 12, rng), ContractError);
  EXPECT_THROW(make_attention(p, "b", 0, rng), ContractError);
  EXPECT_NO_THROW(make_attention(p, "c", 16, rng));
}

TEST(MakeAttention, ParameterShapesAndZeroGain) {
  Fixture f(32, 3);
  EXPECT_EQ(f.params[f.ap.w_q].value.shape(), (Shape{4, 32, 1, 1}));
  EXPECT_EQ(f.params[f.ap.w_k].value.shape(), (Shape{4, 32, 1, 1}));
  EXPECT_EQ(f.params[f.ap.w_v].value.shape(), (Shape{32, 32, 1, 1}));
  EXPECT_EQ(f.params[f.ap.gamma].value.item(), 0.0);
}

TEST(ProjectQkv, ShapeContract) {
  Fixture f(8, 5);
  Rng rng(9);
  Tape tape;
  auto p = project_qkv(tape, f.params, f.ap, tape.constant(random_tensor({1, 8, 4, 4}, rng)));
  EXPECT_EQ(p.q.shape(), (Shape{16, 1}));
  EXPECT_EQ(p.k.shape(), (Shape{16, 1}));
  EXPECT_EQ(p.v.shape(), (Shape{16, 8}));
}

TEST(ProjectQkv, IdentityValueProjectionFlattensFeatures) {
  Fixture f(8, 5);
  Tensor& wv = f.params[f.ap.w_v].value;
  for (auto& x : wv.data()) x = 0.0;
  for (std::size_t c = 0; c < 8; ++c) wv[c * 8 + c] = 1.0;
  Rng rng(2);
  Tensor x = random_tensor({1, 8, 3, 5}, rng);
  Tape tape;
  auto p = project_qkv(tape, f.params, f.ap, tape.constant(x));
  for (std::size_t pos = 0; pos < 15; ++pos)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(p.v.value()[pos * 8 + c], x[c * 15 + pos]);
}

TEST(ProjectQkv, ZeroFeaturesGiveZeroProjections) {
  Fixture f(16, 5);
  Tape tape;
  auto p = project_qkv(tape, f.params, f.ap, tape.constant(Tensor::zeros({1, 16, 2, 3})));
  for (const Var* v : {&p.q, &p.k, &p.v})
    for (double x : v->value().data()) EXPECT_EQ(x, 0.0);
}

TEST(ProjectQkv, WrongChannelCountIsShapeError) {
  Fixture f(16, 5);
  Tape tape;
  EXPECT_THROW(project_qkv(tape, f.params, f.ap, tape.constant(Tensor::zeros({1, 8, 2, 2}))), ShapeError);
}

TEST(AttentionScores, ZeroInputsAreUniform) {
  Tape tape;
  Var s = attention_scores(tape.constant(Tensor::zeros({6, 2})), tape.constant(Tensor::zeros({6, 2})));
  for (double v : s.value().data()) EXPECT_DOUBLE_EQ(v, 1.0 / 6.0);
}

TEST(AttentionScores, TwoPositionHandCase) {
  Tape tape;
  Var s = attention_scores(tape.constant(matrix(2, 1, {1, 0})), tape.constant(matrix(2, 1, {1, 0})));
  const double e = std::exp(1.0);
  EXPECT_NEAR(s.value()[0], e / (e + 1.0), 1e-15);
  EXPECT_NEAR(s.value()[1], 1.0 / (e + 1.0), 1e-15);
  EXPECT_NEAR(s.value()[2], 0.5, 1e-15);
  EXPECT_NEAR(s.value()[3], 0.5, 1e-15);
}

TEST(AttentionScores, OptionalScalingDividesLogits) {
  Tape tape;
  Var q = tape.constant(matrix(2, 4, {1, 1, 1, 1, 0, 0, 0, 0}));
  Var s = attention_scores(q, q, true);
  // q0.q0 = 4, scaled by 1/sqrt(4) -> 2
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(s.value()[0], e2 / (e2 + 1.0), 1e-15);
}

TEST(AttentionScores, MismatchedShapesThrow) {
  Tape tape;
  EXPECT_THROW(attention_scores(tape.constant(Tensor::zeros({4, 2})), tape.constant(Tensor::zeros({4, 3}))),
               ShapeError);
  EXPECT_THROW(attention_scores(tape.constant(Tensor::zeros({4, 2})), tape.constant(Tensor::zeros({5, 2}))),
               ShapeError);
}

TEST(AttentionScores, RowsAreStochasticAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Rng rng(seed);
    const std::size_t hw = 1 + rng.below(40), d = 1 + rng.below(6);
    const double mag = rng.uniform(0.1, 30.0);
    Tape tape;
    Var s = attention_scores(tape.constant(random_tensor({hw, d}, rng, -mag, mag)),
                             tape.constant(random_tensor({hw, d}, rng, -mag, mag)));
    for (std::size_t i = 0; i < hw; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < hw; ++j) {
        EXPECT_GE(s.value()[i * hw + j], 0.0);
        row += s.value()[i * hw + j];
      }
      EXPECT_NEAR(row, 1.0, 1e-12) << "seed " << seed << " row " << i;
    }
  }
}

TEST(AttentionMap, MatchesWeightedSumOracle) {
  Rng rng(77);
  const std::size_t h = 3, w = 4, hw = 12, c = 5;
  Tape tape;
  Var s = attention_scores(tape.constant(random_tensor({hw, 2}, rng)), tape.constant(random_tensor({hw, 2}, rng)));
  Tensor v = random_tensor({hw, c}, rng);
  Var at = attention_map(s, tape.constant(v), h, w);
  ASSERT_EQ(at.shape(), (Shape{1, c, h, w}));
  double worst = 0.0;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t j = 0; j < hw; ++j) acc += s.value()[i * hw + j] * v[j * c + ch];
      worst = std::max(worst, std::abs(acc - at.value()[ch * hw + i]));
    }
  EXPECT_LT(worst, 1e-12);
}

TEST(AttentionMap, IdentityScoresReturnValues) {
  Rng rng(4);
  Tensor eye = Tensor::zeros({6, 6});
  for (std::size_t i = 0; i < 6; ++i) eye[i * 6 + i] = 1.0;
  Tensor v = random_tensor({6, 3}, rng);
  Tape tape;
  Var at = attention_map(tape.constant(eye), tape.constant(v), 2, 3);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(at.value()[c * 6 + i], v[i * 3 + c]);
}

TEST(AttentionMap, ConstantValuesStayConstant) {
  Rng rng(8);
  Tensor v = Tensor::zeros({9, 2});
  for (std::size_t i = 0; i < 9; ++i) {
    v[i * 2] = 0.25;
    v[i * 2 + 1] = -3.0;
  }
  Tape tape;
  Var s = attention_scores(tape.constant(random_tensor({9, 3}, rng)), tape.constant(random_tensor({9, 3}, rng)));
  Var at = attention_map(s, tape.constant(v), 3, 3);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_NEAR(at.value()[i], 0.25, 1e-14);
    EXPECT_NEAR(at.value()[9 + i], -3.0, 1e-14);
  }
}

TEST(AttentionMap, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(attention_map(tape.constant(Tensor::zeros({4, 4})), tape.constant(Tensor::zeros({5, 2})), 2, 2),
               ShapeError);
  EXPECT_THROW(attention_map(tape.constant(Tensor::zeros({4, 4})), tape.constant(Tensor::zeros({4, 2})), 2, 3),
               ShapeError);
}

TEST(SeaForward, FreshModuleIsExactIdentity) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Fixture f(16, seed);
    Rng rng(seed + 100);
    Tensor x = random_tensor({1, 16, 1 + rng.below(6), 1 + rng.below(6)}, rng, -5, 5);
    Tape tape;
    auto out = sea_forward(tape, f.params, f.ap, tape.constant(x));
    EXPECT_TRUE(bitwise_equal(out.sa_map.value(), x));
    EXPECT_EQ(out.sa_map.shape(), x.shape());
  }
}

TEST(SeaForward, UnitGainAddsAttentionMap) {
  Fixture f(8, 12);
  f.params[f.ap.gamma].value[0] = 1.0;
  Rng rng(3);
  Tensor x = random_tensor({1, 8, 3, 3}, rng);
  Tape tape;
  auto out = sea_forward(tape, f.params, f.ap, tape.constant(x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.sa_map.value()[i], out.at_map.value()[i] + x[i]);
}

TEST(SeaForward, ConvexityBoundPerChannel) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Fixture f(8, seed);
    Rng rng(seed * 7 + 1);
    const std::size_t h = 2 + rng.below(4), w = 2 + rng.below(4), hw = h * w;
    Tensor x = random_tensor({1, 8, h, w}, rng, -3, 3);
    Tape tape;
    auto proj = project_qkv(tape, f.params, f.ap, tape.constant(x));
    auto out = sea_forward(tape, f.params, f.ap, tape.constant(x));
    for (std::size_t c = 0; c < 8; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < hw; ++i) {
        lo = std::min(lo, proj.v.value()[i * 8 + c]);
        hi = std::max(hi, proj.v.value()[i * 8 + c]);
      }
      for (std::size_t i = 0; i < hw; ++i) {
        const double a = out.at_map.value()[c * hw + i];
        EXPECT_GE(a, lo - 1e-12);
        EXPECT_LE(a, hi + 1e-12);
      }
    }
  }
}

TEST(SeaForward, NonFiniteInputIsContractError) {
  Fixture f(8, 1);
  Tensor x = Tensor::zeros({1, 8, 2, 2});
  x[3] = std::nan("");
  Tape tape;
  EXPECT_THROW(sea_forward(tape, f.params, f.ap, tape.constant(x)), ContractError);
}

TEST(SeaForward, GradientCheckAllParametersAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Fixture f(8, seed);
    Rng rng(seed + 1000);
    f.params[f.ap.gamma].value[0] = rng.uniform(-1.0, 1.0);
    const std::size_t h = 2 + rng.below(2), w = 2 + rng.below(2);
    f.params.add("f1", random_tensor({1, 8, h, w}, rng));
    Tensor r = random_tensor({1, 8, h, w}, rng);
    auto loss = [&](Tape& tape) {
      auto out = sea_forward(tape, f.params, f.ap, tape.watch(f.params.get("f1")));
      return sum(mul(out.sa_map, tape.constant(r)));
    };
    auto rep = gradient_check(loss, f.params);
    EXPECT_LT(rep.max_rel_error, 1e-4) << "seed " << seed << " worst " << rep.worst_param;
  }
}

TEST(SeaForward, GammaGradientMatchesFiniteDifference) {
  Fixture f(16, 42);
  Rng rng(5);
  Tensor x = random_tensor({1, 16, 3, 3}, rng);
  Tensor r = random_tensor({1, 16, 3, 3}, rng);
  auto eval = [&](double g) {
    f.params[f.ap.gamma].value[0] = g;
    Tape tape;
    auto out = sea_forward(tape, f.params, f.ap, tape.constant(x));
    Var l = sum(mul(out.sa_map, tape.constant(r)));
    return std::make_pair(l.value().item(), tape.backward(l).at(&f.params[f.ap.gamma]).item());
  };
  const double analytic = eval(0.0).second;
  const double numeric = (eval(1e-5).first - eval(-1e-5).first) / 2e-5;
  EXPECT_LT(std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-12}), 1e-4);
  EXPECT_NE(analytic, 0.0);
}

TEST(Heatmap, ConstantMapIsMidGray) {
  Tensor at = Tensor::full({4, 3, 3}, 0.7);
  auto px = heatmap_pixels(at, 12, 10);
  ASSERT_EQ(px.size(), 120u);
  for (auto p : px) EXPECT_EQ(p, 128);
}

TEST(Heatmap, ExtremesMapToFullRange) {
  Tensor at = Tensor::zeros({1, 2, 2, 2});
  at[0] = 1.0;  // channel 0 pixel (0,0)
  at[4] = 3.0;  // channel 1 pixel (0,0)
  auto px = heatmap_pixels(at, 2, 2);
  EXPECT_EQ(px[0], 255);
  EXPECT_EQ(px[3], 0);
}

TEST(Heatmap, ExportWritesBothFilesAtSourceSize) {
  Rng rng(6);
  Tensor at = random_tensor({1, 8, 4, 4}, rng);
  Tensor img = random_tensor({3, 32, 24}, rng);
  auto stem = scratch("export");
  auto px = export_attention_heatmap(at, img, stem);
  auto gray = data::read_png(stem.string() + "_heat.png");
  auto over = data::read_png(stem.string() + "_overlay.png");
  EXPECT_EQ(gray.channels, 1u);
  EXPECT_EQ(gray.width, 24u);
  EXPECT_EQ(gray.height, 32u);
  EXPECT_EQ(gray.pixels, px);
  EXPECT_EQ(over.channels, 3u);
  EXPECT_EQ(over.width, 24u);
  EXPECT_EQ(over.height, 32u);
}

TEST(Heatmap, ScoreDumpRoundTrips) {
  Rng rng(10);
  Tensor s = random_tensor({9, 9}, rng);
  auto path = scratch("scores.bin");
  dump_attention_scores(s, path);
  EXPECT_TRUE(bitwise_equal(load_tensor(path), s));
}
