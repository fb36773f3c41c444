#pragma once

// Anchor lattice codec. Anchors sit on a uniform lattice matching the
// prediction feature map: the anchor at site (i,j,k) has center
// ((i+0.5)u, (j+0.5)u, (k+0.5)u) in input voxels, one anchor per radius.
// A landmark g encodes at an anchor (f, r) as t = (g - f) / r per axis; the
// anchor is positive when ||g - f||_inf <= r, and the globally nearest
// anchor is forced positive so every present landmark has at least one.
//
// Channel layout of the flattened last axis, for landmark l and radius
// slot a (n_a radii): labels at l*n_a + a, offsets at (l*n_a + a)*3 + axis.

#include <array>
#include <limits>
#include <vector>

#include "volmark/heatmap.hpp"
#include "volmark/tensor.hpp"

namespace volmark {

struct AnchorGrid {
  std::array<std::size_t, 3> lattice{};  // H', W', D'
  double unit = 1.0;                     // u: input voxels per lattice step
  std::vector<double> radii;             // strictly increasing, in input voxels

  std::size_t sites() const { return lattice[0] * lattice[1] * lattice[2]; }
  std::size_t anchors_per_site() const { return radii.size(); }

  double center(std::size_t site_index, int axis) const {
    const std::size_t j = lattice[1], k = lattice[2];
    std::size_t c[3];
    c[0] = site_index / (j * k);
    c[1] = (site_index / k) % j;
    c[2] = site_index % k;
    return (static_cast<double>(c[axis]) + 0.5) * unit;
  }

  std::array<std::size_t, 3> input_dims() const {
    return {static_cast<std::size_t>(lattice[0] * unit),
            static_cast<std::size_t>(lattice[1] * unit),
            static_cast<std::size_t>(lattice[2] * unit)};
  }
};

inline AnchorGrid build_grid(std::array<std::size_t, 3> feature_dims, double unit,
                             std::vector<double> radii) {
  detail::require(unit >= 1.0, "build_grid: unit spacing must be >= 1");
  detail::require(!radii.empty(), "build_grid: at least one radius required");
  for (std::size_t i = 0; i < radii.size(); ++i) {
    detail::require(radii[i] > 0, "build_grid: radii must be positive");
    if (i > 0)
      detail::require(radii[i] > radii[i - 1], "build_grid: radii must be strictly increasing");
  }
  for (int ax = 0; ax < 3; ++ax)
    detail::require(feature_dims[ax] >= 1, "build_grid: empty lattice axis");
  AnchorGrid g;
  g.lattice = feature_dims;
  g.unit = unit;
  g.radii = std::move(radii);
  return g;
}

template <typename T>
struct AnchorTargets {
  Tensor<T> offsets;  // [H',W',D', 3*L*n_a]
  Tensor<T> labels;   // [H',W',D', L*n_a], values in {0,1}; doubles as the positive mask
};

template <typename T>
AnchorTargets<T> encode_targets(const LandmarkSet& set, const AnchorGrid& grid) {
  set.validate_ids();
  const std::size_t L = set.count();
  const std::size_t na = grid.anchors_per_site();
  const std::size_t sites = grid.sites();
  const auto dims = grid.input_dims();
  Shape off_shape{grid.lattice[0], grid.lattice[1], grid.lattice[2], 3 * L * na};
  Shape lab_shape{grid.lattice[0], grid.lattice[1], grid.lattice[2], L * na};
  std::vector<T> offsets(numel(off_shape), T(0));
  std::vector<T> labels(numel(lab_shape), T(0));

  for (const Landmark& lm : set.landmarks) {
    if (!lm.present) continue;
    require_in_bounds(lm, dims);
    const double g[3] = {lm.x, lm.y, lm.z};

    double best_d2 = std::numeric_limits<double>::infinity();
    std::size_t best_site = 0;
    for (std::size_t s = 0; s < sites; ++s) {
      double d2 = 0;
      double dmax = 0;
      double delta[3];
      for (int ax = 0; ax < 3; ++ax) {
        delta[ax] = g[ax] - grid.center(s, ax);
        d2 += delta[ax] * delta[ax];
        dmax = std::max(dmax, std::abs(delta[ax]));
      }
      if (d2 < best_d2) {
        best_d2 = d2;
        best_site = s;
      }
      for (std::size_t a = 0; a < na; ++a) {
        if (dmax > grid.radii[a]) continue;
        const std::size_t lab_idx = s * L * na + lm.id * na + a;
        labels[lab_idx] = T(1);
        for (int ax = 0; ax < 3; ++ax)
          offsets[s * 3 * L * na + (lm.id * na + a) * 3 + ax] =
              static_cast<T>(delta[ax] / grid.radii[a]);
      }
    }
    // force the nearest anchor (smallest radius slot) positive
    const std::size_t lab_idx = best_site * L * na + lm.id * na + 0;
    if (labels[lab_idx] == T(0)) {
      labels[lab_idx] = T(1);
      for (int ax = 0; ax < 3; ++ax)
        offsets[best_site * 3 * L * na + lm.id * na * 3 + ax] =
            static_cast<T>((g[ax] - grid.center(best_site, ax)) / grid.radii[0]);
    }
  }
  return {Tensor<T>(std::move(off_shape), std::move(offsets)),
          Tensor<T>(std::move(lab_shape), std::move(labels))};
}

// Per landmark channel, picks the anchor with maximal predicted probability
// (ties toward the lowest site, then the lowest radius slot); below tau the
// landmark is absent, otherwise the coordinate decodes as f + r * t.
template <typename T>
LandmarkSet decode_predictions(const Tensor<T>& offsets, const Tensor<T>& probabilities,
                               const AnchorGrid& grid, double tau,
                               std::array<double, 3> spacing = {1, 1, 1}) {
  const std::size_t na = grid.anchors_per_site();
  const std::size_t sites = grid.sites();
  const Shape& ps = probabilities.shape();
  detail::require(ps.size() == 4 && ps[0] == grid.lattice[0] && ps[1] == grid.lattice[1] &&
                      ps[2] == grid.lattice[2],
                  "decode_predictions: probability lattice " + shape_str(ps) +
                      " does not match the grid");
  detail::require(ps[3] % na == 0, "decode_predictions: channel count not divisible by n_a");
  const std::size_t L = ps[3] / na;
  detail::require(offsets.shape() ==
                      Shape{grid.lattice[0], grid.lattice[1], grid.lattice[2], 3 * L * na},
                  "decode_predictions: offsets " + shape_str(offsets.shape()) +
                      " do not match probabilities " + shape_str(ps));
  const auto& pv = probabilities.values();
  const auto& ov = offsets.values();

  LandmarkSet out;
  out.spacing = spacing;
  for (std::size_t l = 0; l < L; ++l) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_site = 0, best_a = 0;
    for (std::size_t s = 0; s < sites; ++s)
      for (std::size_t a = 0; a < na; ++a) {
        const double p = static_cast<double>(pv[s * L * na + l * na + a]);
        if (p > best) {
          best = p;
          best_site = s;
          best_a = a;
        }
      }
    Landmark lm;
    lm.id = l;
    lm.name = "lm" + std::to_string(l);
    lm.present = best >= tau;
    if (lm.present) {
      const double r = grid.radii[best_a];
      const std::size_t base = best_site * 3 * L * na + (l * na + best_a) * 3;
      lm.x = grid.center(best_site, 0) + r * static_cast<double>(ov[base + 0]);
      lm.y = grid.center(best_site, 1) + r * static_cast<double>(ov[base + 1]);
      lm.z = grid.center(best_site, 2) + r * static_cast<double>(ov[base + 2]);
    }
    out.landmarks.push_back(lm);
  }
  return out;
}

}  // namespace volmark
