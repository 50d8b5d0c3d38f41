#include "cordseg/losses.hpp"

#include <cmath>

namespace cordseg {

double dice_loss(const float *pred, const float *gt, Eigen::Index n, const DiceOptions &opt, float *grad,
                 double grad_scale) {
  if (!(opt.smooth > 0.0))
    throw Error(ErrorKind::InvalidConfig, "dice smoothing must be positive");
  double pg = 0.0, pp = 0.0, gg = 0.0;
  const bool squared = opt.denominator == DiceDenominator::Squared;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = pred[i], g = gt[i];
    pg += p * g;
    pp += squared ? p * p : p;
    gg += squared ? g * g : g;
  }
  const double num = 2.0 * pg + opt.smooth;
  const double den = pp + gg + opt.smooth;
  if (grad) {
    // dL/dp_i = -(2 g_i den - num dden/dp_i) / den^2
    const double a = -2.0 / den * grad_scale;
    const double b = num / (den * den) * grad_scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dden = squared ? 2.0 * pred[i] : 1.0;
      grad[i] += static_cast<float>(a * gt[i] + b * dden);
    }
  }
  return 1.0 - num / den;
}

double dice_loss(const SoftMask &pred, const SoftMask &gt, const DiceOptions &opt) {
  if (pred.dimensions() != gt.dimensions())
    throw Error(ErrorKind::ShapeMismatch, "prediction and ground truth shapes differ");
  return dice_loss(pred.data(), gt.data(), pred.size(), opt);
}

LossValue multiclass_dice_loss(const LabelSet &pred, const LabelSet &gt, const DiceOptions &opt) {
  LossValue out;
  std::array<double, kNumClasses> per{};
  for (int c = 0; c < kNumClasses; ++c) {
    if (pred.masks[c].dimensions() != gt.masks[c].dimensions())
      throw Error(ErrorKind::ClassMismatch, "class " + std::string(kClassNames[c]) + " lattice differs");
    per[c] = dice_loss(pred.masks[c].data(), gt.masks[c].data(), pred.masks[c].size(), opt);
  }
  double sum = 0.0;
  for (double v : per) sum += v;
  out.value = sum / kNumClasses;
  out.per_class = per;
  return out;
}

LossValue multiclass_dice_loss(const FeatureMap &pred, const FeatureMap &gt, FeatureMap *grad,
                               const DiceOptions &opt) {
  if (pred.dimensions() != gt.dimensions())
    throw Error(ErrorKind::ClassMismatch, "prediction and target channel layouts differ");
  const Eigen::Index channels = pred.dimension(3);
  const Eigen::Index n = pred.dimension(0) * pred.dimension(1) * pred.dimension(2);
  if (grad) {
    *grad = FeatureMap(pred.dimensions());
    grad->setZero();
  }
  LossValue out;
  std::array<double, kNumClasses> per{};
  double sum = 0.0;
  for (Eigen::Index c = 0; c < channels; ++c) {
    const double l = dice_loss(pred.data() + c * n, gt.data() + c * n, n, opt,
                               grad ? grad->data() + c * n : nullptr, 1.0 / static_cast<double>(channels));
    if (c < kNumClasses) per[c] = l;
    sum += l;
  }
  out.value = sum / static_cast<double>(channels);
  if (channels == kNumClasses) out.per_class = per;
  return out;
}

} // namespace cordseg
