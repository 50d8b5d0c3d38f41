#pragma once

// Dense 3D network kernels on channel-planar feature maps: each channel is a
// contiguous column-major (axis 0 fastest) grid, channels follow each other.
// Weight layouts match the ONNX initializer layouts byte for byte:
//   conv3      [K x Cout] column-major, K index = ((ci*3 + k2)*3 + k1)*3 + k0
//   upconv2    [8*Cout x Cin] column-major, row index = co*8 + (k2*4 + k1*2 + k0)
//   pointwise  [Cin x Cout] column-major

#include <Eigen/Core>

#include "cordseg/volume.hpp"

namespace cordseg::kernels {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;
using Vector = Eigen::Matrix<float, Eigen::Dynamic, 1>;

/// Output lattice of a 3x3x3 convolution with zero padding 1.
inline Index3 conv3_output_shape(const Index3 &in, int stride) { return (in - 1) / stride + 1; }

/// out = conv3(in, W), stride 1 or 2, no bias.
void conv3_forward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight, int stride,
                   float *out);

/// dW += d(out)/dW contribution; d_in += d(out)/d(in) (d_in must be initialized).
void conv3_backward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight, int stride,
                    const float *d_out, Matrix &d_weight, float *d_in);

/// Transposed convolution, kernel 2 stride 2: out shape = 2 * in shape.
void upconv2_forward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight,
                     const Vector &bias, float *out);
void upconv2_backward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight,
                      const float *d_out, Matrix &d_weight, Vector &d_bias, float *d_in);

/// 1x1x1 convolution with bias.
void pointwise_forward(const float *in, Eigen::Index voxels, int cin, const Matrix &weight,
                       const Vector &bias, float *out);
void pointwise_backward(const float *in, Eigen::Index voxels, int cin, const Matrix &weight,
                        const float *d_out, Matrix &d_weight, Vector &d_bias, float *d_in);

/// Instance normalization + affine + leaky rectifier (0 < slope < 1). Stores the normalized
/// pre-affine values and per-channel inverse standard deviation for backward.
void norm_act_forward(const float *x, Eigen::Index voxels, int channels, const Vector &gamma,
                      const Vector &beta, float eps, float slope, float *xhat, Vector &inv_std,
                      float *out);
/// `d_out` is overwritten; gradient w.r.t. x is written to d_x.
void norm_act_backward(const float *xhat, const float *out, const Vector &inv_std, Eigen::Index voxels,
                       int channels, const Vector &gamma, float slope, float *d_out, Vector &d_gamma,
                       Vector &d_beta, float *d_x);

/// Nearest-neighbour x2 upsampling and its adjoint (sum over children).
void upsample2_forward(const float *in, const Index3 &in_shape, int channels, float *out);
void upsample2_backward(const float *d_out, const Index3 &in_shape, int channels, float *d_in);

} // namespace cordseg::kernels
