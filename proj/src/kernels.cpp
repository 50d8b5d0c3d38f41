#include "cordseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <utility>
#include <vector>

namespace cordseg::kernels {

namespace {

using MatrixMap = Eigen::Map<Matrix, 0, Eigen::OuterStride<>>;
using ConstMatrixMap = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;

// Target number of column-gradient elements per tile (~4 MB of floats).
constexpr Eigen::Index kTileElements = Eigen::Index(1) << 20;

Eigen::Index rows_per_tile(Eigen::Index row_len, Eigen::Index k) {
  return std::max<Eigen::Index>(1, kTileElements / std::max<Eigen::Index>(1, row_len * k));
}

/// Scatter-adds a tile of column gradients (rows: output voxels, columns:
/// (ci, k2, k1, k0) taps) back into the input gradient.
void col2im_add(const float *col, const Index3 &in_shape, int cin, const Index3 &out_shape, int stride,
                Eigen::Index r0, Eigen::Index nrows, float *d_in) {
  const Eigen::Index d0 = in_shape[0], d1 = in_shape[1], d2 = in_shape[2];
  const Eigen::Index o0n = out_shape[0], o1n = out_shape[1];
  const Eigen::Index plane = d0 * d1 * d2;
  const Eigen::Index t = nrows * o0n;
  for (int ci = 0; ci < cin; ++ci)
    for (int k2 = 0; k2 < 3; ++k2)
      for (int k1 = 0; k1 < 3; ++k1)
        for (int k0 = 0; k0 < 3; ++k0) {
          const Eigen::Index kk = ((ci * 3 + k2) * 3 + k1) * 3 + k0;
          const float *c = col + kk * t;
          for (Eigen::Index r = 0; r < nrows; ++r) {
            const Eigen::Index row = r0 + r;
            const Eigen::Index o1 = row % o1n, o2 = row / o1n;
            const Eigen::Index i1 = stride * o1 + k1 - 1, i2 = stride * o2 + k2 - 1;
            if (i1 < 0 || i1 >= d1 || i2 < 0 || i2 >= d2) continue;
            const float *srcc = c + r * o0n;
            float *dst = d_in + ci * plane + (i1 + i2 * d1) * d0;
            if (stride == 1) {
              const Eigen::Index lo = k0 == 0 ? 1 : 0;
              const Eigen::Index hi = k0 == 2 ? o0n - 1 : o0n;
              const Eigen::Index shift = k0 - 1;
              for (Eigen::Index o0 = lo; o0 < hi; ++o0)
                dst[o0 + shift] += srcc[o0];
            } else {
              for (Eigen::Index o0 = 0; o0 < o0n; ++o0) {
                const Eigen::Index i0 = stride * o0 + k0 - 1;
                if (i0 >= 0 && i0 < d0) dst[i0] += srcc[o0];
              }
            }
          }
        }
}

// Direct convolution on staged axis-0 lines. Each output line is computed for
// a block of CB output channels with two vector registers of lanes per channel
// kept in registers across all taps.

using Vec = float __attribute__((vector_size(64)));
constexpr Eigen::Index kLanes = 16;
constexpr Eigen::Index kChunk = 2 * kLanes;

inline Vec loadu(const float *p) {
  Vec v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void storeu(float *p, Vec v) { std::memcpy(p, &v, sizeof v); }

inline float hsum(Vec v) {
  float s = 0.0f;
  for (int i = 0; i < kLanes; ++i) s += v[i];
  return s;
}

/// Input lines feeding one output line (o1, o2), grouped per (ci, k2, k1).
/// Each line holds a leading zero so tap k0 of output x is read at
/// group + tap(k0) + x:
///   stride 1: one line of in(i0 - 1), taps {0, 1, 2};
///   stride 2: odd samples in(2x - 1) then even samples in(2x),
///             taps {0, L + 1, 1} for line length L.
struct LineStage {
  int stride;
  Eigen::Index n0_out, padded, line_len, group_len;
  std::vector<float> buf;
  std::vector<float> even, odd; // decimated input planes for stride 2

  LineStage(Eigen::Index n0_out_, int channels, int stride_)
      : stride(stride_), n0_out(n0_out_), padded((n0_out_ + kChunk - 1) / kChunk * kChunk),
        line_len(padded + kChunk), group_len(stride_ == 1 ? line_len : 2 * line_len),
        buf(static_cast<std::size_t>(group_len * channels * 9), 0.0f) {}

  Eigen::Index tap(int k0) const {
    if (stride == 1) return k0;
    return k0 == 0 ? 0 : k0 == 1 ? line_len + 1 : 1;
  }

  void decimate(const float *in, const Index3 &shape, int channels) {
    const Eigen::Index d0 = shape[0], lines = Eigen::Index(shape[1]) * shape[2] * channels;
    even.assign(static_cast<std::size_t>(lines * n0_out), 0.0f);
    odd.assign(static_cast<std::size_t>(lines * n0_out), 0.0f);
    for (Eigen::Index r = 0; r < lines; ++r) {
      const float *src = in + r * d0;
      float *e = even.data() + r * n0_out, *o = odd.data() + r * n0_out;
      for (Eigen::Index x = 0; 2 * x < d0; ++x) e[x] = src[2 * x];
      for (Eigen::Index x = 0; 2 * x + 1 < d0; ++x) o[x] = src[2 * x + 1];
    }
  }

  void fill(const float *in, const Index3 &shape, int channels, Eigen::Index o1, Eigen::Index o2) {
    const Eigen::Index d1 = shape[1], d2 = shape[2];
    for (int c = 0; c < channels; ++c)
      for (int k2 = 0; k2 < 3; ++k2)
        for (int k1 = 0; k1 < 3; ++k1) {
          float *g = buf.data() + ((c * 3 + k2) * 3 + k1) * group_len;
          const Eigen::Index i1 = stride * o1 + k1 - 1, i2 = stride * o2 + k2 - 1;
          const bool outside = i1 < 0 || i1 >= d1 || i2 < 0 || i2 >= d2;
          const Eigen::Index line = (c * d2 + i2) * d1 + i1;
          if (stride == 1) {
            if (outside)
              std::fill(g + 1, g + 1 + n0_out, 0.0f);
            else
              std::memcpy(g + 1, in + line * n0_out, sizeof(float) * n0_out);
          } else if (outside) {
            std::fill(g + 1, g + 1 + n0_out, 0.0f);
            std::fill(g + line_len + 1, g + line_len + 1 + n0_out, 0.0f);
          } else {
            std::memcpy(g + 1, odd.data() + line * n0_out, sizeof(float) * n0_out);
            std::memcpy(g + line_len + 1, even.data() + line * n0_out, sizeof(float) * n0_out);
          }
        }
  }
};

template <int CB, int S>
void direct_line(const LineStage &st, Eigen::Index groups, const float *wpack, float *out) {
  const float *lines = st.buf.data();
  const Eigen::Index taps[3] = {S == 1 ? 0 : st.tap(0), S == 1 ? 1 : st.tap(1), S == 1 ? 2 : st.tap(2)};
  for (Eigen::Index x = 0; x < st.padded; x += kChunk) {
    Vec a0[CB], a1[CB];
    for (int c = 0; c < CB; ++c) a0[c] = a1[c] = Vec{};
    for (Eigen::Index l = 0; l < groups; ++l) {
      const float *p = lines + l * st.group_len + x;
      const float *w = wpack + l * 3 * CB;
      for (int k0 = 0; k0 < 3; ++k0) {
        const Vec s0 = loadu(p + taps[k0]), s1 = loadu(p + taps[k0] + kLanes);
        for (int c = 0; c < CB; ++c) {
          const float wc = w[k0 * CB + c];
          a0[c] += s0 * wc;
          a1[c] += s1 * wc;
        }
      }
    }
    for (int c = 0; c < CB; ++c) {
      storeu(out + c * st.padded + x, a0[c]);
      storeu(out + c * st.padded + x + kLanes, a1[c]);
    }
  }
}

template <int CB, int S>
void direct_weight_line(const LineStage &st, Eigen::Index groups, const float *grad, Vec *dw) {
  const float *lines = st.buf.data();
  const Eigen::Index taps[3] = {S == 1 ? 0 : st.tap(0), S == 1 ? 1 : st.tap(1), S == 1 ? 2 : st.tap(2)};
  for (Eigen::Index l = 0; l < groups; ++l) {
    const float *p = lines + l * st.group_len;
    Vec acc[3][CB];
    for (int k0 = 0; k0 < 3; ++k0)
      for (int c = 0; c < CB; ++c) acc[k0][c] = Vec{};
    for (Eigen::Index x = 0; x < st.padded; x += kLanes) {
      const Vec s0 = loadu(p + taps[0] + x), s1 = loadu(p + taps[1] + x), s2 = loadu(p + taps[2] + x);
      for (int c = 0; c < CB; ++c) {
        const Vec g = loadu(grad + c * st.line_len + x);
        acc[0][c] += s0 * g;
        acc[1][c] += s1 * g;
        acc[2][c] += s2 * g;
      }
    }
    for (int k0 = 0; k0 < 3; ++k0)
      for (int c = 0; c < CB; ++c) dw[(l * 3 + k0) * CB + c] += acc[k0][c];
  }
}

/// Output channel blocks: as many blocks of 8 as fit, then 4, 2, 1.
std::vector<std::pair<int, int>> channel_blocks(int channels) {
  std::vector<std::pair<int, int>> blocks;
  int c = 0;
  for (int cb : {8, 4, 2, 1})
    while (channels - c >= cb) {
      blocks.emplace_back(c, cb);
      c += cb;
    }
  return blocks;
}

template <int S, typename F> void dispatch_block(int cb, F &&f) {
  switch (cb) {
  case 8: f(std::integral_constant<int, 8>{}, std::integral_constant<int, S>{}); break;
  case 4: f(std::integral_constant<int, 4>{}, std::integral_constant<int, S>{}); break;
  case 2: f(std::integral_constant<int, 2>{}, std::integral_constant<int, S>{}); break;
  default: f(std::integral_constant<int, 1>{}, std::integral_constant<int, S>{}); break;
  }
}

template <typename F> void dispatch(int cb, int stride, F &&f) {
  if (stride == 1)
    dispatch_block<1>(cb, f);
  else
    dispatch_block<2>(cb, f);
}

/// weight is [27*cin x cout]; out (cout planes) is overwritten or accumulated.
void conv3_direct(const float *in, const Index3 &shape, int cin, const Matrix &weight, int stride,
                  float *out, bool accumulate) {
  const int cout = static_cast<int>(weight.cols());
  const Index3 out_shape = conv3_output_shape(shape, stride);
  const Eigen::Index n0 = out_shape[0], plane = voxel_count(out_shape);
  const Eigen::Index k = 27 * Eigen::Index(cin);
  LineStage stage(n0, cin, stride);
  if (stride == 2)
    stage.decimate(in, shape, cin);
  const auto blocks = channel_blocks(cout);
  std::vector<std::vector<float>> packs;
  for (auto [c0, cb] : blocks) {
    std::vector<float> w(static_cast<std::size_t>(k * cb));
    for (Eigen::Index r = 0; r < k; ++r)
      for (int c = 0; c < cb; ++c) w[r * cb + c] = weight(r, c0 + c);
    packs.push_back(std::move(w));
  }
  std::vector<float> tmp(static_cast<std::size_t>(8 * stage.padded));
  for (Eigen::Index o2 = 0; o2 < out_shape[2]; ++o2)
    for (Eigen::Index o1 = 0; o1 < out_shape[1]; ++o1) {
      stage.fill(in, shape, cin, o1, o2);
      const Eigen::Index row_off = (o1 + o2 * out_shape[1]) * n0;
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto [c0, cb] = blocks[b];
        dispatch(cb, stride, [&](auto cbc, auto sc) {
          direct_line<decltype(cbc)::value, decltype(sc)::value>(stage, 9 * Eigen::Index(cin), packs[b].data(),
                                                                  tmp.data());
        });
        for (int c = 0; c < cb; ++c) {
          float *dst = out + (c0 + c) * plane + row_off;
          const float *src = tmp.data() + c * stage.padded;
          if (accumulate)
            for (Eigen::Index x = 0; x < n0; ++x) dst[x] += src[x];
          else
            std::memcpy(dst, src, sizeof(float) * n0);
        }
      }
    }
}

void conv3_direct_weight_grad(const float *in, const Index3 &shape, int cin, int stride, const float *d_out,
                              Matrix &d_weight) {
  const int cout = static_cast<int>(d_weight.cols());
  const Index3 out_shape = conv3_output_shape(shape, stride);
  const Eigen::Index n0 = out_shape[0], plane = voxel_count(out_shape);
  const Eigen::Index k = 27 * Eigen::Index(cin);
  LineStage stage(n0, cin, stride);
  if (stride == 2)
    stage.decimate(in, shape, cin);
  const auto blocks = channel_blocks(cout);
  // lane-wise partial sums, reduced once at the end
  std::vector<std::vector<Vec>> acc;
  for (auto [c0, cb] : blocks) acc.emplace_back(static_cast<std::size_t>(k * cb), Vec{});
  std::vector<float> grad(static_cast<std::size_t>(8 * stage.line_len), 0.0f);
  for (Eigen::Index o2 = 0; o2 < out_shape[2]; ++o2)
    for (Eigen::Index o1 = 0; o1 < out_shape[1]; ++o1) {
      stage.fill(in, shape, cin, o1, o2);
      const Eigen::Index row_off = (o1 + o2 * out_shape[1]) * n0;
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto [c0, cb] = blocks[b];
        for (int c = 0; c < cb; ++c)
          std::memcpy(grad.data() + c * stage.line_len, d_out + (c0 + c) * plane + row_off,
                      sizeof(float) * n0);
        dispatch(cb, stride, [&](auto cbc, auto sc) {
          direct_weight_line<decltype(cbc)::value, decltype(sc)::value>(stage, 9 * Eigen::Index(cin), grad.data(),
                                                                         acc[b].data());
        });
      }
    }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto [c0, cb] = blocks[b];
    for (Eigen::Index r = 0; r < k; ++r)
      for (int c = 0; c < cb; ++c) d_weight(r, c0 + c) += hsum(acc[b][r * cb + c]);
  }
}

/// Weights of the adjoint convolution: [27*cout x cin] with the kernel flipped.
Matrix flipped_weight(const Matrix &weight, int cin) {
  const int cout = static_cast<int>(weight.cols());
  Matrix w(27 * Eigen::Index(cout), cin);
  for (int ci = 0; ci < cin; ++ci)
    for (int co = 0; co < cout; ++co)
      for (int t = 0; t < 27; ++t) w(co * 27 + (26 - t), ci) = weight(ci * 27 + t, co);
  return w;
}

/// Visits coarse voxels [v0, v0 + t) line by line; f(n, child_offset, count)
/// receives the tile position, the fine-grid index of the first child for
/// tap kk, and the run length along axis 0.
template <typename F>
void for_each_child_run(Eigen::Index v0, Eigen::Index t, const Index3 &in_shape, int kk, F &&f) {
  const Eigen::Index d0 = in_shape[0], d1 = in_shape[1];
  const Eigen::Index e0 = 2 * d0, e1 = 2 * d1;
  const int k0 = kk & 1, k1 = (kk >> 1) & 1, k2 = kk >> 2;
  Eigen::Index n = 0;
  while (n < t) {
    const Eigen::Index v = v0 + n;
    const Eigen::Index i0 = v % d0, i1 = (v / d0) % d1, i2 = v / (d0 * d1);
    const Eigen::Index run = std::min(d0 - i0, t - n);
    f(n, (2 * i0 + k0) + e0 * ((2 * i1 + k1) + e1 * (2 * i2 + k2)), run);
    n += run;
  }
}

void scatter_children(const float *src, Eigen::Index v0, Eigen::Index t, const Index3 &in_shape, int kk,
                      float bias, float *out) {
  for_each_child_run(v0, t, in_shape, kk, [&](Eigen::Index n, Eigen::Index o, Eigen::Index run) {
    for (Eigen::Index r = 0; r < run; ++r) out[o + 2 * r] = src[n + r] + bias;
  });
}

void gather_children(const float *grid, Eigen::Index v0, Eigen::Index t, const Index3 &in_shape, int kk,
                     float *dst) {
  for_each_child_run(v0, t, in_shape, kk, [&](Eigen::Index n, Eigen::Index o, Eigen::Index run) {
    for (Eigen::Index r = 0; r < run; ++r) dst[n + r] = grid[o + 2 * r];
  });
}

} // namespace

void conv3_forward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight, int stride,
                   float *out) {
  conv3_direct(in, in_shape, cin, weight, stride, out, false);
}

void conv3_backward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight, int stride,
                    const float *d_out, Matrix &d_weight, float *d_in) {
  conv3_direct_weight_grad(in, in_shape, cin, stride, d_out, d_weight);
  if (!d_in)
    return;
  if (stride == 1) {
    conv3_direct(d_out, in_shape, static_cast<int>(weight.cols()), flipped_weight(weight, cin), 1, d_in, true);
    return;
  }
  // strided adjoint: column gradient then scatter
  const Index3 out_shape = conv3_output_shape(in_shape, stride);
  const Eigen::Index k = 27 * Eigen::Index(cin);
  const Eigen::Index cout = weight.cols();
  const Eigen::Index row_len = out_shape[0];
  const Eigen::Index rows = Eigen::Index(out_shape[1]) * out_shape[2];
  const Eigen::Index n_out = row_len * rows;
  const Eigen::Index per_tile = rows_per_tile(row_len, k);
  std::vector<float> dcol(static_cast<std::size_t>(std::min(per_tile, rows) * row_len * k));

  for (Eigen::Index r0 = 0; r0 < rows; r0 += per_tile) {
    const Eigen::Index nr = std::min(per_tile, rows - r0);
    const Eigen::Index t = nr * row_len;
    ConstMatrixMap dout_m(d_out + r0 * row_len, t, cout, Eigen::OuterStride<>(n_out));
    Eigen::Map<Matrix> dcol_m(dcol.data(), t, k);
    dcol_m.noalias() = dout_m * weight.transpose();
    col2im_add(dcol.data(), in_shape, cin, out_shape, stride, r0, nr, d_in);
  }
}

void upconv2_forward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight,
                     const Vector &bias, float *out) {
  const Eigen::Index cout = bias.size();
  const Eigen::Index n_in = voxel_count(in_shape);
  const Eigen::Index n_out = 8 * n_in;
  const Eigen::Index per_tile = std::max<Eigen::Index>(1, kTileElements / (8 * cout));
  Matrix tmp;
  for (Eigen::Index v0 = 0; v0 < n_in; v0 += per_tile) {
    const Eigen::Index t = std::min(per_tile, n_in - v0);
    ConstMatrixMap in_m(in + v0, t, cin, Eigen::OuterStride<>(n_in));
    tmp.noalias() = in_m * weight.transpose();
    for (Eigen::Index co = 0; co < cout; ++co)
      for (int kk = 0; kk < 8; ++kk)
        scatter_children(tmp.data() + (co * 8 + kk) * t, v0, t, in_shape, kk, bias[co], out + co * n_out);
  }
}

void upconv2_backward(const float *in, const Index3 &in_shape, int cin, const Matrix &weight,
                      const float *d_out, Matrix &d_weight, Vector &d_bias, float *d_in) {
  const Eigen::Index cout = d_bias.size();
  const Eigen::Index n_in = voxel_count(in_shape);
  const Eigen::Index n_out = 8 * n_in;
  for (Eigen::Index co = 0; co < cout; ++co)
    d_bias[co] += Eigen::Map<const Vector>(d_out + co * n_out, n_out).sum();

  const Eigen::Index per_tile = std::max<Eigen::Index>(1, kTileElements / (8 * cout));
  Matrix dtmp;
  for (Eigen::Index v0 = 0; v0 < n_in; v0 += per_tile) {
    const Eigen::Index t = std::min(per_tile, n_in - v0);
    dtmp.resize(t, 8 * cout);
    for (Eigen::Index co = 0; co < cout; ++co)
      for (int kk = 0; kk < 8; ++kk)
        gather_children(d_out + co * n_out, v0, t, in_shape, kk, dtmp.data() + (co * 8 + kk) * t);
    ConstMatrixMap in_m(in + v0, t, cin, Eigen::OuterStride<>(n_in));
    d_weight.noalias() += dtmp.transpose() * in_m;
    if (d_in) {
      MatrixMap din_m(d_in + v0, t, cin, Eigen::OuterStride<>(n_in));
      din_m.noalias() += dtmp * weight;
    }
  }
}

void pointwise_forward(const float *in, Eigen::Index voxels, int cin, const Matrix &weight,
                       const Vector &bias, float *out) {
  Eigen::Map<const Matrix> in_m(in, voxels, cin);
  Eigen::Map<Matrix> out_m(out, voxels, weight.cols());
  out_m.noalias() = in_m * weight;
  out_m.rowwise() += bias.transpose();
}

void pointwise_backward(const float *in, Eigen::Index voxels, int cin, const Matrix &weight,
                        const float *d_out, Matrix &d_weight, Vector &d_bias, float *d_in) {
  Eigen::Map<const Matrix> in_m(in, voxels, cin);
  Eigen::Map<const Matrix> dout_m(d_out, voxels, weight.cols());
  d_weight.noalias() += in_m.transpose() * dout_m;
  d_bias += dout_m.colwise().sum().transpose();
  if (d_in) {
    Eigen::Map<Matrix> din_m(d_in, voxels, cin);
    din_m.noalias() += dout_m * weight.transpose();
  }
}

namespace {

/// Per-channel mean and population variance: Welford-style merge of
/// vectorized float partial sums over cache-sized chunks.
std::pair<double, double> mean_var(const float *x, Eigen::Index n) {
  constexpr Eigen::Index chunk = 4096;
  double mean = 0.0, m2 = 0.0;
  Eigen::Index seen = 0;
  for (Eigen::Index i = 0; i < n; i += chunk) {
    const Eigen::Index m = std::min(chunk, n - i);
    Eigen::Map<const Eigen::ArrayXf> c(x + i, m);
    const float cm = c.sum() / static_cast<float>(m);
    const double cm2 = (c - cm).square().sum();
    const double delta = cm - mean;
    const Eigen::Index total = seen + m;
    mean += delta * static_cast<double>(m) / static_cast<double>(total);
    m2 += cm2 + delta * delta * static_cast<double>(seen) * static_cast<double>(m) / static_cast<double>(total);
    seen = total;
  }
  return {mean, n > 0 ? m2 / static_cast<double>(n) : 0.0};
}

} // namespace

void norm_act_forward(const float *x, Eigen::Index voxels, int channels, const Vector &gamma,
                      const Vector &beta, float eps, float slope, float *xhat, Vector &inv_std,
                      float *out) {
  inv_std.resize(channels);
  for (int c = 0; c < channels; ++c) {
    const float *xc = x + c * voxels;
    const auto [mean, var] = mean_var(xc, voxels);
    const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv_std[c] = istd;
    const float m = static_cast<float>(mean), g = gamma[c], b = beta[c];
    float *oc = out + c * voxels;
    if (xhat) {
      float *hc = xhat + c * voxels;
      for (Eigen::Index i = 0; i < voxels; ++i) {
        const float h = (xc[i] - m) * istd;
        hc[i] = h;
        const float y = g * h + b;
        oc[i] = std::max(y, slope * y);
      }
    } else {
      for (Eigen::Index i = 0; i < voxels; ++i) {
        const float y = g * ((xc[i] - m) * istd) + b;
        oc[i] = std::max(y, slope * y);
      }
    }
  }
}

void norm_act_backward(const float *xhat, const float *out, const Vector &inv_std, Eigen::Index voxels,
                       int channels, const Vector &gamma, float slope, float *d_out, Vector &d_gamma,
                       Vector &d_beta, float *d_x) {
  constexpr Eigen::Index chunk = 4096;
  const double inv_n = 1.0 / static_cast<double>(voxels);
  for (int c = 0; c < channels; ++c) {
    const float *hc = xhat + c * voxels;
    const float *oc = out + c * voxels;
    float *dc = d_out + c * voxels;
    double sum_dy = 0.0, sum_dy_h = 0.0;
    for (Eigen::Index i = 0; i < voxels; i += chunk) {
      const Eigen::Index m = std::min(chunk, voxels - i);
      Eigen::Map<Eigen::ArrayXf> dy(dc + i, m);
      Eigen::Map<const Eigen::ArrayXf> h(hc + i, m), o(oc + i, m);
      dy = (o > 0.0f).select(dy, dy * slope);
      sum_dy += dy.sum();
      sum_dy_h += (dy * h).sum();
    }
    d_gamma[c] += static_cast<float>(sum_dy_h);
    d_beta[c] += static_cast<float>(sum_dy);
    const float g = gamma[c];
    const float mean_dh = static_cast<float>(g * sum_dy * inv_n);
    const float mean_dh_h = static_cast<float>(g * sum_dy_h * inv_n);
    const float istd = inv_std[c];
    float *xc = d_x + c * voxels;
    for (Eigen::Index i = 0; i < voxels; ++i) xc[i] = istd * (g * dc[i] - mean_dh - hc[i] * mean_dh_h);
  }
}

void upsample2_forward(const float *in, const Index3 &in_shape, int channels, float *out) {
  const Eigen::Index d0 = in_shape[0], d1 = in_shape[1], d2 = in_shape[2];
  const Eigen::Index e0 = 2 * d0, e1 = 2 * d1, e2 = 2 * d2;
  for (int c = 0; c < channels; ++c) {
    const float *ic = in + c * d0 * d1 * d2;
    float *oc = out + c * e0 * e1 * e2;
    for (Eigen::Index z = 0; z < e2; ++z)
      for (Eigen::Index y = 0; y < e1; ++y) {
        const float *src = ic + (y / 2) * d0 + (z / 2) * d0 * d1;
        float *dst = oc + y * e0 + z * e0 * e1;
        for (Eigen::Index x = 0; x < e0; ++x) dst[x] = src[x / 2];
      }
  }
}

void upsample2_backward(const float *d_out, const Index3 &in_shape, int channels, float *d_in) {
  const Eigen::Index d0 = in_shape[0], d1 = in_shape[1], d2 = in_shape[2];
  const Eigen::Index e0 = 2 * d0, e1 = 2 * d1, e2 = 2 * d2;
  for (int c = 0; c < channels; ++c) {
    const float *oc = d_out + c * e0 * e1 * e2;
    float *ic = d_in + c * d0 * d1 * d2;
    for (Eigen::Index z = 0; z < e2; ++z)
      for (Eigen::Index y = 0; y < e1; ++y) {
        float *dst = ic + (y / 2) * d0 + (z / 2) * d0 * d1;
        const float *src = oc + y * e0 + z * e0 * e1;
        for (Eigen::Index x = 0; x < e0; ++x) dst[x / 2] += src[x];
      }
  }
}

} // namespace cordseg::kernels
