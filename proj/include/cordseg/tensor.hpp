#pragma once

#include <unsupported/Eigen/CXX11/Tensor>

namespace cordseg {

/// Feature maps are (axis0, axis1, axis2, channel), column-major.
using FeatureMap = Eigen::Tensor<float, 4>;
/// Batches are (axis0, axis1, axis2, channel, sample).
using Batch = Eigen::Tensor<float, 5>;

} // namespace cordseg
