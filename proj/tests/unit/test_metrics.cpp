#include <doctest.h>

#include <random>

#include "cordseg/metrics.hpp"

using namespace cordseg;

namespace {

Mask line(int n0, std::initializer_list<int> on) {
  Mask m(n0, 1, 1);
  m.setZero();
  for (int i : on) m(i, 0, 0) = 1;
  return m;
}

} // namespace

TEST_CASE("dice score") {
  const Mask a = line(8, {0, 1, 2, 3}), b = line(8, {2, 3, 4, 5}), e = line(8, {});
  CHECK(dice_score(a, a) == 1.0);
  CHECK(dice_score(a, b) == 0.5);
  CHECK(dice_score(b, a) == 0.5);
  CHECK(dice_score(a, e) == 0.0);
  CHECK(dice_score(e, e) == 1.0);
  CHECK_THROWS_AS(dice_score(a, line(7, {})), Error);
}

TEST_CASE("detection at the 6 mm3 boundary") {
  const Spacing3 sp{1, 1, 2};
  const Mask gt = line(8, {0, 1, 2, 3});
  auto d = detection(line(8, {0, 1, 2}), gt, sp);
  REQUIRE(d.tp);
  CHECK(*d.tp);
  CHECK(!d.fp);
  d = detection(line(8, {0, 1, 6}), gt, sp);
  CHECK(!*d.tp);
  d = detection(line(8, {0, 1}), line(8, {}), sp);
  REQUIRE(d.fp);
  CHECK(!*d.fp);
  CHECK(!d.tp);
  d = detection(line(8, {0, 1, 5}), line(8, {}), sp);
  CHECK(*d.fp);
}

TEST_CASE("detection is spacing invariant for the same physical masks") {
  // z-slabs at 2 mm vs each slab duplicated at 1 mm
  std::mt19937 rng(4);
  std::bernoulli_distribution b(0.1);
  for (int trial = 0; trial < 30; ++trial) {
    Mask p2(4, 4, 3), g2(4, 4, 3);
    for (Eigen::Index i = 0; i < p2.size(); ++i) {
      p2.data()[i] = b(rng);
      g2.data()[i] = trial % 3 == 0 ? 0 : b(rng);
    }
    Mask p1(4, 4, 6), g1(4, 4, 6);
    for (int z = 0; z < 6; ++z)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          p1(x, y, z) = p2(x, y, z / 2);
          g1(x, y, z) = g2(x, y, z / 2);
        }
    const Detection a = detection(p2, g2, {1, 1, 2}), c = detection(p1, g1, {1, 1, 1});
    CHECK(a.tp == c.tp);
    CHECK(a.fp == c.fp);
  }
}

TEST_CASE("precision recall and volume difference") {
  const Mask gt = line(8, {0, 1, 2, 3});
  auto pr = precision_recall(gt, gt);
  CHECK(*pr.first == 1.0);
  CHECK(*pr.second == 1.0);
  pr = precision_recall(line(8, {0, 1}), gt);
  CHECK(*pr.first == 1.0);
  CHECK(*pr.second == 0.5);
  pr = precision_recall(line(8, {5, 6}), gt);
  CHECK(*pr.first == 0.0);
  CHECK(*pr.second == 0.0);
  pr = precision_recall(line(8, {}), gt);
  CHECK(!pr.first);

  // 200 mm3 gt vs 220 mm3 prediction at 10 mm3 voxels
  Mask g(30, 1, 1), p(30, 1, 1);
  g.setZero();
  p.setZero();
  for (int i = 0; i < 20; ++i) g(i, 0, 0) = 1;
  for (int i = 0; i < 22; ++i) p(i, 0, 0) = 1;
  VolumeDifference v = volume_differences(p, g, {1, 1, 10});
  CHECK(v.rel == doctest::Approx(-10.0));
  CHECK(v.abs == doctest::Approx(10.0));
  CHECK(volume_differences(g, g, {1, 1, 10}).rel == 0.0);
  CHECK(volume_differences(line(30, {}), g, {1, 1, 10}).rel == 100.0);
  CHECK_THROWS_AS(volume_differences(g, line(30, {}), {1, 1, 1}), Error);
}

TEST_CASE("evaluate_subject") {
  Geometry geo;
  geo.shape = {8, 8, 4};
  geo.spacing = {1, 1, 2};
  LabelSet gt(geo);
  for (int x = 0; x < 4; ++x) gt[LabelClass::Tumor](x, 1, 1) = 1;
  for (int x = 0; x < 4; ++x) gt[LabelClass::Cavity](x, 3, 1) = 1;
  for (int x = 0; x < 4; ++x) gt[LabelClass::Edema](x, 5, 2) = 1;
  gt.recompute_whole();

  const SubjectMetrics self = evaluate_subject(gt, gt, "s");
  for (const ClassMetrics &c : self.classes) {
    CHECK(*c.dice == 1.0);
    CHECK(*c.detected_tp);
    CHECK(*c.rel_vol_diff == 0.0);
    CHECK(*c.precision == 1.0);
    CHECK(*c.recall == 1.0);
  }
  const SubjectMetrics empty = evaluate_subject(LabelSet(geo), gt);
  for (const ClassMetrics &c : empty.classes) {
    CHECK(*c.dice == 0.0);
    CHECK(!*c.detected_tp);
  }
  Geometry other = geo;
  other.spacing = {1, 1, 3};
  CHECK_THROWS_AS(evaluate_subject(LabelSet(other), gt), Error);

  // brute-force counting oracle
  std::mt19937 rng(9);
  std::bernoulli_distribution b(0.3);
  Geometry small;
  small.shape = {8, 8, 4};
  small.spacing = {0.5, 1, 3};
  for (int trial = 0; trial < 20; ++trial) {
    LabelSet p(small), g(small);
    for (int c = 0; c < 3; ++c)
      for (Eigen::Index i = 0; i < p.masks[c].size(); ++i) {
        p.masks[c].data()[i] = b(rng);
        g.masks[c].data()[i] = (trial % 4 == c) ? 0 : b(rng);
      }
    p.recompute_whole();
    g.recompute_whole();
    const SubjectMetrics m = evaluate_subject(p, g);
    for (int c = 0; c < kNumClasses; ++c) {
      int np = 0, ng = 0, both = 0;
      for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) {
            const bool a = p.masks[c](x, y, z) > 0, q = g.masks[c](x, y, z) > 0;
            np += a;
            ng += q;
            both += a && q;
          }
      const ClassMetrics &k = m.classes[c];
      CHECK(k.gt_present == (ng > 0));
      CHECK(*k.dice == doctest::Approx(np + ng == 0 ? 1.0 : 2.0 * both / (np + ng)));
      if (ng > 0) {
        CHECK(*k.detected_tp == (both * 1.5 >= 6.0));
        CHECK(*k.recall == doctest::Approx(double(both) / ng));
        CHECK(*k.rel_vol_diff == doctest::Approx(100.0 * (ng - np) / ng));
        CHECK(*k.abs_vol_diff == std::abs(*k.rel_vol_diff));
      } else {
        CHECK(*k.detected_fp == (np * 1.5 >= 6.0));
        CHECK(!k.rel_vol_diff);
      }
      if (np > 0) CHECK(*k.precision == doctest::Approx(double(both) / np));
    }
  }
}

TEST_CASE("aggregate") {
  auto subject = [](double dice, std::optional<bool> tp) {
    SubjectMetrics s;
    s.classes[0].dice = dice;
    s.classes[0].detected_tp = tp;
    return s;
  };
  CHECK_THROWS_AS(aggregate({}), Error);

  const AggregateReport one = aggregate({{subject(0.6, true)}});
  CHECK(*one.at(LabelClass::Tumor, Metric::Dice).std == 0.0);

  const AggregateReport two = aggregate({{subject(0.6, true)}, {subject(0.8, false)}});
  CHECK(*two.at(LabelClass::Tumor, Metric::Dice).mean == doctest::Approx(0.7));
  CHECK(*two.at(LabelClass::Tumor, Metric::Dice).std == doctest::Approx(0.1));

  const std::vector<SubjectMetrics> run{subject(1, true), subject(1, true), subject(1, false),
                                        subject(1, std::nullopt)};
  CHECK(*run_value(run, LabelClass::Tumor, Metric::TpRate) == doctest::Approx(2.0 / 3.0));
  CHECK(!run_value(run, LabelClass::Cavity, Metric::Precision));

  const std::string table = format_report(two);
  CHECK(table.find("70.0 ± 10.0") != std::string::npos);
}
