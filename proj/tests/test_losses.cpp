#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "made/losses.hpp"

using namespace made;
using ad::Graph;
using ad::Parameter;
using ad::Var;
using made::testing::grad_check;
using made::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

Tensor<double> matrix(std::size_t r, std::size_t c, std::vector<double> v) {
  Tensor<double> t(Shape{r, c});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

Tensor<double> identity(std::size_t n) {
  Tensor<double> t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

double nce(const Tensor<double>& sim, double tau, std::span<const std::uint8_t> allowed = {}) {
  Graph<double> g;
  return loss::info_nce(g.constant(sim), tau, allowed).value()[0];
}

double span_giou(double s1, double e1, double s2, double e2) {
  return loss::giou_1d(loss::Span1d{(s1 + e1) / 2, e1 - s1}, loss::Span1d{(s2 + e2) / 2, e2 - s2});
}

// Reference symmetric InfoNCE written out with plain loops.
double reference_nce(const Tensor<double>& sim, double tau, const std::vector<std::uint8_t>& allowed) {
  const std::size_t n = sim.rows();
  auto ok = [&](std::size_t i, std::size_t j) { return allowed.empty() || allowed[i * n + j] != 0; };
  double rows = 0;
  double cols = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double zr = 0;
    double zc = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (ok(i, j)) zr += std::exp(sim(i, j) / tau);
      if (ok(j, i)) zc += std::exp(sim(j, i) / tau);
    }
    rows += std::log(zr) - sim(i, i) / tau;
    cols += std::log(zc) - sim(i, i) / tau;
  }
  return 0.5 * (rows + cols) / static_cast<double>(n);
}

}  // namespace

TEST(InfoNce, SingleItemIsZero) {
  EXPECT_NEAR(nce(matrix(1, 1, {0.3}), 0.07), 0.0, 1e-12);
}

TEST(InfoNce, UniformMatrixGivesLogB) {
  for (std::size_t b : {2u, 3u, 7u}) {
    Tensor<double> sim(Shape{b, b}, 0.25);
    EXPECT_NEAR(nce(sim, 0.5), std::log(static_cast<double>(b)), 1e-12);
  }
}

TEST(InfoNce, IdentityTwoByTwo) {
  EXPECT_NEAR(nce(identity(2), 1.0), 0.31326168751822286, 1e-12);
  EXPECT_NEAR(nce(identity(2), 1.0), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
}

TEST(InfoNce, EmptyBatchThrows) {
  Graph<double> g;
  EXPECT_THROW(loss::info_nce(g.constant(Tensor<double>(Shape{0, 0})), 1.0), ContractError);
}

TEST(InfoNce, NonNegativeAndVanishesWhenPositivesDominate) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    EXPECT_GE(nce(random_tensor({5, 5}, rng), 0.1), 0.0);
  }
  Tensor<double> sim = identity(4);
  for (auto& v : sim.storage()) v *= 100.0;
  EXPECT_LT(nce(sim, 1.0), 1e-30);
}

TEST(InfoNce, MatchesLoopReference) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 20; ++i) {
    const Tensor<double> sim = random_tensor({6, 6}, rng, 0.5);
    EXPECT_NEAR(nce(sim, 0.07), reference_nce(sim, 0.07, {}), 1e-10);
  }
}

TEST(InfoNce, LearnableScaleUsesExpAndCapsAtHundred) {
  std::mt19937_64 rng(1);
  const Tensor<double> sim = random_tensor({4, 4}, rng, 0.3);
  {
    Graph<double> g;
    Var<double> ls = g.constant(Tensor<double>::scalar(std::log(1.0 / 0.07)));
    EXPECT_NEAR(loss::info_nce(g.constant(sim), ls).value()[0], nce(sim, 0.07), 1e-10);
  }
  Parameter<double> ls("ls", Tensor<double>::scalar(std::log(1000.0)));
  Graph<double> g;
  Var<double> l = loss::info_nce(g.constant(sim), g.param(ls));
  EXPECT_NEAR(l.value()[0], nce(sim, 1.0 / loss::kMaxLogitScale), 1e-10);
  g.backward(l);
  EXPECT_EQ(ls.grad[0], 0.0);
}

TEST(SameTrackMask, MasksOffDiagonalDuplicates) {
  const std::vector<std::string> tracks{"a", "b", "a"};
  const auto mask = loss::same_track_mask(tracks, loss::DuplicatePolicy::mask_same_track);
  const std::vector<std::uint8_t> want{1, 1, 0, 1, 1, 1, 0, 1, 1};
  EXPECT_EQ(mask, want);
  const auto none = loss::same_track_mask(tracks, loss::DuplicatePolicy::none);
  for (auto v : none) EXPECT_EQ(v, 1);
}

TEST(InfoNce, MaskRemovesDuplicateNegatives) {
  const std::vector<std::string> tracks{"a", "b", "a"};
  const auto mask = loss::same_track_mask(tracks, loss::DuplicatePolicy::mask_same_track);
  std::mt19937_64 rng(5);
  const Tensor<double> sim = random_tensor({3, 3}, rng);
  EXPECT_NEAR(nce(sim, 0.5, mask), reference_nce(sim, 0.5, mask), 1e-12);
  EXPECT_LT(nce(sim, 0.5, mask), nce(sim, 0.5));
  // Changing a masked entry has no effect.
  Tensor<double> moved = sim;
  moved(0, 2) += 5.0;
  moved(2, 0) -= 3.0;
  EXPECT_NEAR(nce(moved, 0.5, mask), nce(sim, 0.5, mask), 1e-12);
}

TEST(MatchingLoss, JointDoublesWhenSimsEqual) {
  std::mt19937_64 rng(2);
  const Tensor<double> sim = random_tensor({4, 4}, rng, 0.4);
  Graph<double> g;
  Var<double> ls = g.constant(Tensor<double>::scalar(std::log(10.0)));
  Var<double> s = g.constant(sim);
  const double joint = loss::matching_loss(s, s, LossMode::joint, ls).value()[0];
  EXPECT_NEAR(joint, 2.0 * nce(sim, 0.1), 1e-10);
}

TEST(MatchingLoss, JointDiffersFromSingle) {
  std::mt19937_64 rng(3);
  Graph<double> g;
  Var<double> ls = g.constant(Tensor<double>::scalar(std::log(10.0)));
  Var<double> a = g.constant(random_tensor({4, 4}, rng, 0.4));
  Var<double> b = g.constant(random_tensor({4, 4}, rng, 0.4));
  const double joint = loss::matching_loss(a, b, LossMode::joint, ls).value()[0];
  const double single = loss::matching_loss(a, b, LossMode::single, ls).value()[0];
  EXPECT_GT(std::abs(joint - single), 1e-3);
  Graph<double> g2;
  Var<double> sum = g2.constant(ad::add(a, b).value());
  Var<double> ls2 = g2.constant(Tensor<double>::scalar(std::log(10.0)));
  EXPECT_NEAR(single, loss::info_nce(sum, ls2).value()[0], 1e-12);
}

TEST(MatchingLoss, ShapeMismatchThrows) {
  Graph<double> g;
  Var<double> ls = g.constant(Tensor<double>::scalar(0.0));
  EXPECT_THROW(loss::matching_loss(g.constant(identity(2)), g.constant(identity(3)),
                                   LossMode::joint, ls),
               DimensionError);
}

TEST(Giou, KnownValues) {
  EXPECT_NEAR(span_giou(0, 1, 0, 1), 1.0, 1e-15);
  EXPECT_NEAR(span_giou(0, 1, 2, 3), -1.0 / 3.0, 1e-15);
  EXPECT_NEAR(span_giou(0, 2, 1, 3), 1.0 / 3.0, 1e-15);
}

TEST(Giou, NonPositiveWidthThrows) {
  EXPECT_THROW(loss::giou_1d(loss::Span1d{0.5, 0.0}, loss::Span1d{0.5, 0.2}), ContractError);
  EXPECT_THROW(loss::giou_1d(loss::Span1d{0.5, 0.2}, loss::Span1d{0.5, -0.1}), ContractError);
}

TEST(Giou, SymmetricBoundedAndBelowIou) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const loss::Span1d a{u(rng), 0.01 + u(rng) * 0.5};
    const loss::Span1d b{u(rng), 0.01 + u(rng) * 0.5};
    const double g1 = loss::giou_1d(a, b);
    EXPECT_NEAR(g1, loss::giou_1d(b, a), 1e-15);
    EXPECT_GT(g1, -1.0);
    EXPECT_LE(g1, 1.0);
    const double inter = std::max(0.0, std::min(a.end(), b.end()) - std::max(a.start(), b.start()));
    const double iou = inter / (a.width + b.width - inter);
    const bool meet = std::min(a.end(), b.end()) >= std::max(a.start(), b.start());
    if (meet) {
      EXPECT_NEAR(g1, iou, 1e-12);
    } else {
      EXPECT_LT(g1, iou);
    }
  }
}

TEST(Giou, GraphMatchesScalar) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Tensor<double> pc(Shape{50, 1}), pw(Shape{50, 1}), yc(Shape{50, 1}), yw(Shape{50, 1});
  for (std::size_t i = 0; i < 50; ++i) {
    pc[i] = u(rng);
    pw[i] = u(rng) * 0.4;
    yc[i] = u(rng);
    yw[i] = u(rng) * 0.4;
  }
  Graph<double> g;
  const Tensor<double> out =
      loss::giou_1d(g.constant(pc), g.constant(pw), g.constant(yc), g.constant(yw)).value();
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_NEAR(out[i], loss::giou_1d(loss::Span1d{pc[i], pw[i]}, loss::Span1d{yc[i], yw[i]}),
                1e-12);
  }
}

TEST(DetectionLoss, ZeroAtTarget) {
  Graph<double> g;
  const Tensor<double> target = matrix(2, 2, {0.3, 0.2, 0.6, 0.1});
  MomentPrediction<double> p{g.constant(matrix(2, 1, {0.3, 0.6})), g.constant(matrix(2, 1, {0.2, 0.1}))};
  EXPECT_NEAR(loss::detection_loss(p, target).value()[0], 0.0, 1e-15);
}

TEST(DetectionLoss, WorkedExample) {
  Graph<double> g;
  MomentPrediction<double> p{g.constant(matrix(1, 1, {0.5})), g.constant(matrix(1, 1, {0.2}))};
  EXPECT_NEAR(loss::detection_loss(p, matrix(1, 2, {0.5, 0.4})).value()[0], 2.5, 1e-12);
}

TEST(DetectionLoss, ShapeMismatchThrows) {
  Graph<double> g;
  MomentPrediction<double> p{g.constant(matrix(2, 1, {0.5, 0.5})), g.constant(matrix(2, 1, {0.2, 0.2}))};
  EXPECT_THROW(loss::detection_loss(p, matrix(1, 2, {0.5, 0.4})), DimensionError);
}

TEST(DetectionLoss, DecreasesTowardTarget) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 50; ++trial) {
    const double yc = u(rng), yw = 0.05 + 0.3 * u(rng);
    const double pc = u(rng), pw = 0.05 + 0.3 * u(rng);
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 10; ++step) {
      const double t = step / 10.0;
      Graph<double> g;
      MomentPrediction<double> p{g.constant(matrix(1, 1, {pc + t * (yc - pc)})),
                                 g.constant(matrix(1, 1, {pw + t * (yw - pw)}))};
      const double l = loss::detection_loss(p, matrix(1, 2, {yc, yw})).value()[0];
      EXPECT_LT(l, prev);
      prev = l;
    }
  }
}

TEST(DetectionLoss, HalvingCoordinatesHalvesL1AndKeepsGiou) {
  Graph<double> g;
  auto run = [&](double f, loss::DetectionWeights w) {
    MomentPrediction<double> p{g.constant(matrix(1, 1, {0.4 * f})), g.constant(matrix(1, 1, {0.3 * f}))};
    return loss::detection_loss(p, matrix(1, 2, {0.5 * f, 0.2 * f}), w).value()[0];
  };
  EXPECT_NEAR(run(0.5, {1.0, 0.0}), 0.5 * run(1.0, {1.0, 0.0}), 1e-15);
  EXPECT_NEAR(run(0.5, {0.0, 1.0}), run(1.0, {0.0, 1.0}), 1e-12);
}

TEST(TotalLoss, SumsWithUnitWeights) {
  Graph<double> g;
  Var<double> zero = g.constant(Tensor<double>::scalar(0.0));
  Var<double> x = g.constant(Tensor<double>::scalar(1.75));
  EXPECT_EQ(loss::total_loss(zero, x).value()[0], 1.75);
  EXPECT_EQ(loss::total_loss(x, zero).value()[0], 1.75);
}

TEST(TotalLoss, GradientIsSumOfGradients) {
  Parameter<double> a("a", matrix(1, 3, {0.1, -0.4, 0.9}));
  Graph<double> g;
  Var<double> av = g.param(a);
  Var<double> m = ad::sum(ad::mul(av, av));
  Var<double> d = ad::sum(ad::scale(av, 3.0));
  g.backward(loss::total_loss(m, d));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.grad[i], 2 * a.value[i] + 3.0, 1e-12);
}

TEST(TotalLoss, NonFiniteIsNumericError) {
  auto run = [] {
    Graph<double> g(ad::GraphOptions{false, false, nullptr});
    Var<double> bad = g.constant(Tensor<double>::scalar(std::nan("")));
    return loss::total_loss(bad, g.constant(Tensor<double>::scalar(1.0)));
  };
  EXPECT_THROW(run(), NumericError);
}

// ---- finite-difference checks ----------------------------------------------

TEST(LossGradient, InfoNceWithLearnableScale) {
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    std::mt19937_64 rng(700 + inst);
    Parameter<double> sim("sim", random_tensor({4, 4}, rng, 0.5));
    Parameter<double> ls("ls", Tensor<double>::scalar(1.0 + 0.5 * inst / 20.0));
    const std::vector<std::string> tracks{"a", "b", "a", "c"};
    const auto mask = inst % 2 ? loss::same_track_mask(tracks, loss::DuplicatePolicy::mask_same_track)
                               : std::vector<std::uint8_t>{};
    const auto res = grad_check({&sim, &ls}, [&](Graph<double>& g) {
      return loss::info_nce(g.param(sim), g.param(ls), mask);
    }, rng);
    EXPECT_LT(res.max_rel_error, kGradTol);
  }
}

TEST(LossGradient, MatchingLossBothModes) {
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    std::mt19937_64 rng(800 + inst);
    Parameter<double> s0("s0", random_tensor({3, 3}, rng, 0.5));
    Parameter<double> s1("s1", random_tensor({3, 3}, rng, 0.5));
    Parameter<double> ls("ls", Tensor<double>::scalar(1.2));
    const LossMode mode = inst % 2 ? LossMode::single : LossMode::joint;
    const auto res = grad_check({&s0, &s1, &ls}, [&](Graph<double>& g) {
      return loss::matching_loss(g.param(s0), g.param(s1), mode, g.param(ls));
    }, rng);
    EXPECT_LT(res.max_rel_error, kGradTol);
  }
}

TEST(LossGradient, DetectionLoss) {
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    std::mt19937_64 rng(900 + inst);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    Tensor<double> c(Shape{4, 1}), w(Shape{4, 1}), target(Shape{4, 2});
    for (std::size_t i = 0; i < 4; ++i) {
      c[i] = u(rng);
      w[i] = 0.3 * u(rng);
      target(i, 0) = u(rng);
      target(i, 1) = 0.3 * u(rng);
    }
    Parameter<double> pc("pc", c);
    Parameter<double> pw("pw", w);
    const auto res = grad_check({&pc, &pw}, [&](Graph<double>& g) {
      return loss::detection_loss(MomentPrediction<double>{g.param(pc), g.param(pw)}, target);
    }, rng, 1e-6);
    EXPECT_LT(res.max_rel_error, kGradTol);
  }
}

TEST(LossGradient, DetectionObjectiveLayersAndTokens) {
  for (std::uint64_t inst = 0; inst < 20; ++inst) {
    std::mt19937_64 rng(1000 + inst);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    const std::size_t n = 3;
    const std::size_t nq = inst % 2 ? 4 : 1;
    const std::size_t layers = 2;
    std::vector<Parameter<double>> ps;
    ps.reserve(2 * layers + 1);
    for (std::size_t l = 0; l < layers; ++l) {
      Tensor<double> c(Shape{n * nq, 1}), w(Shape{n * nq, 1});
      for (std::size_t i = 0; i < n * nq; ++i) {
        c[i] = u(rng);
        w[i] = 0.3 * u(rng);
      }
      ps.emplace_back("c" + std::to_string(l), c);
      ps.emplace_back("w" + std::to_string(l), w);
    }
    Tensor<double> conf(Shape{n * nq, 1});
    for (auto& v : conf.storage()) v = u(rng);
    ps.emplace_back("conf", conf);
    Tensor<double> target(Shape{n, 2});
    for (std::size_t i = 0; i < n; ++i) {
      target(i, 0) = u(rng);
      target(i, 1) = 0.3 * u(rng);
    }
    std::vector<Parameter<double>*> ptrs;
    for (auto& p : ps) ptrs.push_back(&p);
    const auto res = grad_check(ptrs, [&](Graph<double>& g) {
      DetectionOutput<double> det;
      det.query_tokens = nq;
      for (std::size_t l = 0; l < layers; ++l) {
        det.layers.push_back({g.param(ps[2 * l]), g.param(ps[2 * l + 1])});
      }
      det.confidence = g.param(ps.back());
      return loss::detection_objective(det, target);
    }, rng, 1e-6);
    EXPECT_LT(res.max_rel_error, kGradTol);
  }
}

TEST(DetectionObjective, SingleTokenSumsLayers) {
  Graph<double> g;
  const Tensor<double> target = matrix(1, 2, {0.5, 0.4});
  DetectionOutput<double> det;
  det.layers.push_back({g.constant(matrix(1, 1, {0.5})), g.constant(matrix(1, 1, {0.2}))});
  det.layers.push_back({g.constant(matrix(1, 1, {0.5})), g.constant(matrix(1, 1, {0.4}))});
  EXPECT_NEAR(loss::detection_objective(det, target).value()[0], 2.5, 1e-12);
}

TEST(DetectionObjective, NoLayersThrows) {
  DetectionOutput<double> det;
  EXPECT_THROW(loss::detection_objective(det, matrix(1, 2, {0.5, 0.4})), ContractError);
}
