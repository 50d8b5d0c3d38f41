#include <doctest.h>

#include <random>

#include "cordseg/losses.hpp"

using namespace cordseg;

namespace {

SoftMask random_soft(int n0, int n1, int n2, std::mt19937 &rng) {
  std::uniform_real_distribution<float> u(0.f, 1.f);
  SoftMask m(n0, n1, n2);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

SoftMask random_binary(int n0, int n1, int n2, std::mt19937 &rng) {
  std::bernoulli_distribution b(0.4);
  SoftMask m(n0, n1, n2);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = b(rng) ? 1.f : 0.f;
  return m;
}

} // namespace

TEST_CASE("dice loss: hand values") {
  SoftMask gt(4, 1, 1), pred(4, 1, 1);
  gt.setConstant(1.f);
  pred.setValues({{{1.f}}, {{1.f}}, {{0.f}}, {{0.f}}});
  CHECK(dice_loss(pred, gt) == doctest::Approx(1.0 / 3.0).epsilon(1e-5));
  CHECK(dice_loss(gt, gt) == doctest::Approx(0.0).epsilon(1e-9));

  SoftMask a(4, 1, 1), b(4, 1, 1);
  a.setValues({{{1.f}}, {{1.f}}, {{0.f}}, {{0.f}}});
  b.setValues({{{0.f}}, {{0.f}}, {{1.f}}, {{1.f}}});
  CHECK(dice_loss(a, b) == doctest::Approx(1.0).epsilon(1e-5));

  SoftMask e(3, 3, 3);
  e.setZero();
  CHECK(dice_loss(e, e) == doctest::Approx(0.0));

  DiceOptions lin{1e-5, DiceDenominator::Linear};
  SoftMask h(2, 1, 1), g(2, 1, 1);
  h.setValues({{{0.5f}}, {{0.5f}}});
  g.setValues({{{1.f}}, {{0.f}}});
  // 1 - (1 + s) / (1 + 1 + s)
  CHECK(dice_loss(h, g, lin) == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("dice loss: shape mismatch") {
  SoftMask a(2, 2, 2), b(2, 2, 3);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(dice_loss(a, b), Error);
}

TEST_CASE("dice loss: gradient matches central differences") {
  std::mt19937 rng(5);
  for (auto den : {DiceDenominator::Squared, DiceDenominator::Linear}) {
    const DiceOptions opt{1e-5, den};
    for (int trial = 0; trial < 5; ++trial) {
      SoftMask p = random_soft(4, 4, 4, rng), g = random_binary(4, 4, 4, rng);
      std::vector<float> grad(p.size(), 0.f);
      dice_loss(p.data(), g.data(), p.size(), opt, grad.data());
      const double h = 1e-4;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        // double-precision probe on a copy to keep the step exact
        std::vector<double> pd(p.data(), p.data() + p.size());
        auto eval = [&](double v) {
          pd[i] = v;
          double num = 0, dp = 0, dg = 0;
          for (Eigen::Index k = 0; k < p.size(); ++k) {
            num += pd[k] * g.data()[k];
            dp += den == DiceDenominator::Squared ? pd[k] * pd[k] : pd[k];
            dg += g.data()[k];
          }
          return 1.0 - (2.0 * num + opt.smooth) / (dp + dg + opt.smooth);
        };
        const double x = p.data()[i];
        const double fd = (eval(x + h) - eval(x - h)) / (2 * h);
        CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-3).scale(1e-3));
      }
      // the float routine agrees with the double probe
      std::vector<double> pd(p.data(), p.data() + p.size());
      double num = 0, dp = 0, dg = 0;
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        num += pd[k] * g.data()[k];
        dp += den == DiceDenominator::Squared ? pd[k] * pd[k] : pd[k];
        dg += g.data()[k];
      }
      CHECK(dice_loss(p.data(), g.data(), p.size(), opt) ==
            doctest::Approx(1.0 - (2 * num + opt.smooth) / (dp + dg + opt.smooth)).epsilon(1e-6));
    }
  }
}

TEST_CASE("dice loss: properties on random instances") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    SoftMask p = random_soft(4, 3, 2, rng), g = random_binary(4, 3, 2, rng);
    const double l = dice_loss(p, g);
    CHECK(l >= 0.0);
    CHECK(l <= 1.0);

    SoftMask pb = random_binary(4, 3, 2, rng);
    CHECK(dice_loss(pb, g) == doctest::Approx(dice_loss(g, pb)).epsilon(1e-12));

    // move one voxel toward its target
    std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
    const Eigen::Index i = pick(rng);
    SoftMask q = p;
    q.data()[i] = 0.5f * (q.data()[i] + g.data()[i]);
    CHECK(dice_loss(q, g) <= l + 1e-12);
  }
}

TEST_CASE("multiclass dice loss") {
  Geometry geo;
  geo.shape = {4, 4, 2};
  LabelSet gt(geo);
  gt[LabelClass::Tumor](0, 0, 0) = 1.f;
  gt[LabelClass::Cavity](1, 1, 0) = 1.f;
  gt[LabelClass::Edema](2, 2, 1) = 1.f;
  gt.recompute_whole();

  LossValue perfect = multiclass_dice_loss(gt, gt);
  CHECK(perfect.value == doctest::Approx(0.0).epsilon(1e-6));

  LabelSet pred = gt;
  pred[LabelClass::Edema].setZero();
  pred[LabelClass::Edema](3, 3, 0) = 1.f;
  // keep whole identical to gt's so exactly one class is wrong
  pred[LabelClass::Whole] = gt[LabelClass::Whole];
  LossValue one_wrong = multiclass_dice_loss(pred, gt);
  CHECK(one_wrong.value == doctest::Approx(0.25).epsilon(1e-5));
  REQUIRE(one_wrong.per_class);
  double mean = 0;
  for (double v : *one_wrong.per_class) mean += v;
  CHECK(one_wrong.value == mean / 4.0);

  Geometry other = geo;
  other.shape = {4, 4, 3};
  CHECK_THROWS_AS(multiclass_dice_loss(LabelSet(other), gt), Error);

  // feature-map overload: gradient is the per-channel gradient / channels
  std::mt19937 rng(3);
  FeatureMap fp(3, 3, 2, 4), fg(3, 3, 2, 4), grad;
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (Eigen::Index i = 0; i < fp.size(); ++i) {
    fp.data()[i] = u(rng);
    fg.data()[i] = u(rng) > 0.5f ? 1.f : 0.f;
  }
  LossValue lv = multiclass_dice_loss(fp, fg, &grad);
  const Eigen::Index n = 3 * 3 * 2;
  double acc = 0;
  for (int c = 0; c < 4; ++c) {
    std::vector<float> g1(n, 0.f);
    acc += dice_loss(fp.data() + c * n, fg.data() + c * n, n, {}, g1.data());
    for (Eigen::Index i = 0; i < n; ++i) CHECK(grad.data()[c * n + i] == doctest::Approx(g1[i] / 4.0));
  }
  CHECK(lv.value == doctest::Approx(acc / 4.0));
}
