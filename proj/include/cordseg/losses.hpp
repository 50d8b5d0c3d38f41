#pragma once

#include <array>
#include <optional>

#include "cordseg/tensor.hpp"
#include "cordseg/volume.hpp"

namespace cordseg {

enum class DiceDenominator { Squared, Linear };

struct DiceOptions {
  double smooth = 1e-5;
  DiceDenominator denominator = DiceDenominator::Squared;
};

struct LossValue {
  double value = 0.0;
  std::optional<std::array<double, kNumClasses>> per_class;
};

/// 1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s), or with linear sums in
/// the denominator. When `grad` is given, grad_scale * dL/dp is added to it.
double dice_loss(const float *pred, const float *gt, Eigen::Index n, const DiceOptions &opt = {},
                 float *grad = nullptr, double grad_scale = 1.0);

/// Throws ShapeMismatch.
double dice_loss(const SoftMask &pred, const SoftMask &gt, const DiceOptions &opt = {});

/// Unweighted mean of the per-class losses over all four channels.
/// Throws ClassMismatch when the label sets do not share a lattice.
LossValue multiclass_dice_loss(const LabelSet &pred, const LabelSet &gt, const DiceOptions &opt = {});

/// Channel-wise mean Dice loss on network outputs (x, y, z, class). When
/// `grad` is non-null it receives dL/dpred (overwritten). Throws ClassMismatch.
LossValue multiclass_dice_loss(const FeatureMap &pred, const FeatureMap &gt, FeatureMap *grad,
                               const DiceOptions &opt = {});

} // namespace cordseg
