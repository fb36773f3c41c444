#pragma once

// Gaussian heatmap codec. Landmarks are encoded one channel each:
//   G_l(x,y,z) = exp(-((x-x_l)^2 + (y-y_l)^2 + (z-z_l)^2) / (2 sigma^2))
// evaluated at integer voxel coordinates; absent landmarks encode to a zero
// channel. Decoding is per-channel argmax with ties broken toward the
// lexicographically lowest (x, y, z); a peak below the presence threshold
// marks the landmark absent.

#include <array>
#include <string>
#include <vector>

#include "volmark/tensor.hpp"

namespace volmark {

struct Landmark {
  std::size_t id = 0;
  std::string name;
  double x = 0, y = 0, z = 0;  // voxel coordinates
  bool present = false;
};

struct LandmarkSet {
  std::vector<Landmark> landmarks;          // ids dense, 0..count-1
  std::array<double, 3> spacing{1, 1, 1};   // mm per voxel along x, y, z

  std::size_t count() const { return landmarks.size(); }

  void validate_ids() const {
    for (std::size_t i = 0; i < landmarks.size(); ++i)
      detail::require(landmarks[i].id == i,
                      "landmarks: ids must be dense and ascending (slot " +
                          std::to_string(i) + " holds id " +
                          std::to_string(landmarks[i].id) + ")");
    for (double s : spacing) detail::require(s > 0, "landmarks: spacing must be positive");
  }
};

inline void require_in_bounds(const Landmark& lm, const std::array<std::size_t, 3>& dims) {
  const double c[3] = {lm.x, lm.y, lm.z};
  for (int ax = 0; ax < 3; ++ax)
    detail::require(c[ax] >= 0 && c[ax] < static_cast<double>(dims[ax]),
                    "landmark " + std::to_string(lm.id) + ": coordinate " +
                        std::to_string(c[ax]) + " outside extent " +
                        std::to_string(dims[ax]));
}

// -> [H, W, D, L]
template <typename T>
Tensor<T> encode_heatmaps(const LandmarkSet& set, std::array<std::size_t, 3> dims,
                          double sigma) {
  detail::require(sigma > 0, "encode_heatmaps: sigma must be positive");
  set.validate_ids();
  const std::size_t L = set.count();
  detail::require(L >= 1, "encode_heatmaps: empty landmark set");
  Shape shape{dims[0], dims[1], dims[2], L};
  std::vector<T> data(numel(shape), T(0));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (const Landmark& lm : set.landmarks) {
    if (!lm.present) continue;
    require_in_bounds(lm, dims);
    std::size_t idx = lm.id;
    for (std::size_t h = 0; h < dims[0]; ++h)
      for (std::size_t w = 0; w < dims[1]; ++w)
        for (std::size_t d = 0; d < dims[2]; ++d) {
          const double dx = static_cast<double>(h) - lm.x;
          const double dy = static_cast<double>(w) - lm.y;
          const double dz = static_cast<double>(d) - lm.z;
          data[((h * dims[1] + w) * dims[2] + d) * L + idx] =
              static_cast<T>(std::exp(-(dx * dx + dy * dy + dz * dz) * inv));
        }
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

struct DecodeOptions {
  double presence_threshold = 0.25;
  bool centroid_refine = false;  // 3^3 local centroid around the peak
};

// [H, W, D, L] -> landmark set (coordinates in voxels).
template <typename T>
LandmarkSet decode_peaks(const Tensor<T>& heatmap, const DecodeOptions& opt = {},
                         std::array<double, 3> spacing = {1, 1, 1}) {
  const Shape& s = heatmap.shape();
  detail::require(s.size() == 4, "decode_peaks: expected [H,W,D,L], got " + shape_str(s));
  const std::size_t H = s[0], W = s[1], D = s[2], L = s[3];
  const auto& v = heatmap.values();
  LandmarkSet out;
  out.spacing = spacing;
  for (std::size_t l = 0; l < L; ++l) {
    T best = v[l];
    std::size_t bh = 0, bw = 0, bd = 0;
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t d = 0; d < D; ++d) {
          const T val = v[((h * W + w) * D + d) * L + l];
          if (val > best) {  // strict: first max in (x,y,z)-lexicographic scan wins
            best = val;
            bh = h;
            bw = w;
            bd = d;
          }
        }
    Landmark lm;
    lm.id = l;
    lm.name = "lm" + std::to_string(l);
    lm.present = static_cast<double>(best) >= opt.presence_threshold;
    double cx = static_cast<double>(bh), cy = static_cast<double>(bw),
           cz = static_cast<double>(bd);
    if (lm.present && opt.centroid_refine) {
      double mass = 0, mx = 0, my = 0, mz = 0;
      for (long dh = -1; dh <= 1; ++dh)
        for (long dw = -1; dw <= 1; ++dw)
          for (long dd = -1; dd <= 1; ++dd) {
            const long h = static_cast<long>(bh) + dh, w = static_cast<long>(bw) + dw,
                       d = static_cast<long>(bd) + dd;
            if (h < 0 || w < 0 || d < 0 || h >= static_cast<long>(H) ||
                w >= static_cast<long>(W) || d >= static_cast<long>(D))
              continue;
            const double val =
                static_cast<double>(v[((h * W + w) * D + d) * L + l]);
            mass += val;
            mx += val * static_cast<double>(h);
            my += val * static_cast<double>(w);
            mz += val * static_cast<double>(d);
          }
      if (mass > 0) {
        cx = mx / mass;
        cy = my / mass;
        cz = mz / mass;
      }
    }
    lm.x = cx;
    lm.y = cy;
    lm.z = cz;
    out.landmarks.push_back(lm);
  }
  return out;
}

// Channel sum, [H,W,D,L] -> [H,W,D]; export/visualization only.
template <typename T>
Tensor<T> sum_heatmap(const Tensor<T>& heatmap) {
  const Shape& s = heatmap.shape();
  detail::require(s.size() == 4, "sum_heatmap: expected [H,W,D,L]");
  Tensor<T> summed = reduce_sum(heatmap, 3);
  return summed;
}

}  // namespace volmark
