#pragma once

// Brute-force references for the acceptance suite. Written against the
// definitions only; nothing here calls into the library's algorithms.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

namespace oracle {

struct Grid3 {
  int nx = 0, ny = 0, nz = 0;
  std::vector<std::uint8_t> v; // x fastest
  Grid3() = default;
  Grid3(int x, int y, int z) : nx(x), ny(y), nz(z), v(std::size_t(x) * y * z, 0) {}
  std::uint8_t &at(int x, int y, int z) { return v[(std::size_t(z) * ny + y) * nx + x]; }
  std::uint8_t at(int x, int y, int z) const { return v[(std::size_t(z) * ny + y) * nx + x]; }
  bool inside(int x, int y, int z) const { return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz; }
};

struct Counts {
  long p = 0, g = 0, pg = 0;
};

inline Counts count(const Grid3 &pred, const Grid3 &gt) {
  Counts c;
  for (int z = 0; z < pred.nz; ++z)
    for (int y = 0; y < pred.ny; ++y)
      for (int x = 0; x < pred.nx; ++x) {
        const bool p = pred.at(x, y, z) != 0, g = gt.at(x, y, z) != 0;
        c.p += p;
        c.g += g;
        c.pg += p && g;
      }
  return c;
}

inline double dice(const Counts &c) { return c.p + c.g == 0 ? 1.0 : 2.0 * double(c.pg) / double(c.p + c.g); }

struct Det {
  std::optional<bool> tp, fp;
};

inline Det detection(const Counts &c, double voxel_mm3, double min_mm3 = 6.0) {
  Det d;
  if (c.g > 0) d.tp = double(c.pg) * voxel_mm3 >= min_mm3;
  else d.fp = double(c.p) * voxel_mm3 >= min_mm3;
  return d;
}

inline std::optional<double> precision(const Counts &c) {
  return c.p ? std::optional<double>(double(c.pg) / double(c.p)) : std::nullopt;
}
inline std::optional<double> recall(const Counts &c) {
  return c.g ? std::optional<double>(double(c.pg) / double(c.g)) : std::nullopt;
}
inline std::optional<double> rel_vol_diff(const Counts &c, double voxel_mm3) {
  if (!c.g) return std::nullopt;
  const double vg = double(c.g) * voxel_mm3, vp = double(c.p) * voxel_mm3;
  return 100.0 * (vg - vp) / vg;
}

// Background voxels not 6-reachable from the border become foreground.
inline Grid3 fill_holes(const Grid3 &m) {
  Grid3 reach(m.nx, m.ny, m.nz);
  std::deque<std::array<int, 3>> q;
  for (int z = 0; z < m.nz; ++z)
    for (int y = 0; y < m.ny; ++y)
      for (int x = 0; x < m.nx; ++x) {
        const bool border = x == 0 || y == 0 || z == 0 || x == m.nx - 1 || y == m.ny - 1 || z == m.nz - 1;
        if (border && !m.at(x, y, z)) {
          reach.at(x, y, z) = 1;
          q.push_back({x, y, z});
        }
      }
  const int dirs[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  while (!q.empty()) {
    const auto [x, y, z] = q.front();
    q.pop_front();
    for (const auto &d : dirs) {
      const int a = x + d[0], b = y + d[1], c = z + d[2];
      if (m.inside(a, b, c) && !m.at(a, b, c) && !reach.at(a, b, c)) {
        reach.at(a, b, c) = 1;
        q.push_back({a, b, c});
      }
    }
  }
  Grid3 out = m;
  for (std::size_t i = 0; i < out.v.size(); ++i)
    if (!m.v[i] && !reach.v[i]) out.v[i] = 1;
  return out;
}

// 26-connected components with voxel_count * voxel_mm3 < min_mm3 removed.
inline Grid3 remove_small(const Grid3 &m, double min_mm3, double voxel_mm3) {
  Grid3 out = m;
  std::vector<int> label(m.v.size(), 0);
  int next = 0;
  for (int z = 0; z < m.nz; ++z)
    for (int y = 0; y < m.ny; ++y)
      for (int x = 0; x < m.nx; ++x) {
        const std::size_t i = (std::size_t(z) * m.ny + y) * m.nx + x;
        if (!m.v[i] || label[i]) continue;
        ++next;
        std::vector<std::array<int, 3>> members{{x, y, z}};
        label[i] = next;
        for (std::size_t k = 0; k < members.size(); ++k) {
          const auto [cx, cy, cz] = members[k];
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int a = cx + dx, b = cy + dy, c = cz + dz;
                if (!m.inside(a, b, c)) continue;
                const std::size_t j = (std::size_t(c) * m.ny + b) * m.nx + a;
                if (m.v[j] && !label[j]) {
                  label[j] = next;
                  members.push_back({a, b, c});
                }
              }
        }
        if (double(members.size()) * voxel_mm3 < min_mm3)
          for (const auto &[a, b, c] : members) out.at(a, b, c) = 0;
      }
  return out;
}

inline Grid3 binarize(const std::vector<float> &prob, int nx, int ny, int nz, double threshold) {
  Grid3 g(nx, ny, nz);
  for (std::size_t i = 0; i < prob.size(); ++i) g.v[i] = prob[i] >= threshold ? 1 : 0;
  return g;
}

inline Grid3 postprocess(const std::vector<float> &prob, int nx, int ny, int nz, double threshold, bool holes,
                         double min_mm3, double voxel_mm3) {
  Grid3 g = binarize(prob, nx, ny, nz, threshold);
  if (holes) g = fill_holes(g);
  return remove_small(g, min_mm3, voxel_mm3);
}

// 1 - (2 sum pg + s) / (sum p^2 + sum g^2 + s)
inline double dice_loss(const std::vector<float> &p, const std::vector<float> &g, double smooth) {
  long double pg = 0, pp = 0, gg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    pg += (long double)p[i] * g[i];
    pp += (long double)p[i] * p[i];
    gg += (long double)g[i] * g[i];
  }
  return double(1.0L - (2.0L * pg + smooth) / (pp + gg + smooth));
}

} // namespace oracle
