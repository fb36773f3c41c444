#pragma once

// Training losses with missing-landmark masking.
//
//   heatmap: sum over voxels of present channels of (pred - target)^2,
//            normalized by H*W*D*N_present; absent channels contribute
//            nothing, in value or gradient.
//   offsets: mean over positive anchors of the squared Euclidean offset error.
//   classification: mean binary cross-entropy over all anchors (positives
//            and negatives; absent landmarks are all-negative channels),
//            probabilities clamped to [1e-7, 1-1e-7] before the logs.

#include <vector>

#include "volmark/tensor.hpp"

namespace volmark {

enum class Variant { AnchorFree, AnchorBased };

inline const char* variant_name(Variant v) {
  return v == Variant::AnchorFree ? "anchor_free" : "anchor_based";
}

struct LossWeights {
  double reg = 1.0;
  double cls = 1.0;
  double heatmap = 1.0;

  void validate() const {
    detail::require(reg >= 0 && cls >= 0 && heatmap >= 0,
                    "loss weights: must be nonnegative");
    detail::require(reg + cls + heatmap > 0, "loss weights: at least one must be positive");
  }
};

// `present` has one flag per channel (landmark); `target` carries no tape.
template <typename T>
Tensor<T> heatmap_loss(const Tensor<T>& pred, const Tensor<T>& target,
                       const std::vector<bool>& present) {
  detail::require(pred.shape() == target.shape(),
                  "heatmap_loss: prediction " + shape_str(pred.shape()) +
                      " vs target " + shape_str(target.shape()));
  const Shape& s = pred.shape();
  detail::require(s.size() == 4, "heatmap_loss: expected [H,W,D,L]");
  const std::size_t L = s[3];
  detail::require(present.size() == L, "heatmap_loss: mask size mismatch");
  std::size_t n_present = 0;
  for (bool p : present) n_present += p ? 1 : 0;
  detail::require(n_present > 0, "heatmap_loss: no present landmarks to score");

  const std::size_t voxels = s[0] * s[1] * s[2];
  const T norm = T(1) / static_cast<T>(voxels * n_present);
  const auto& pv = pred.values();
  const auto& tv = target.values();
  T acc = T(0);
  for (std::size_t v = 0; v < voxels; ++v)
    for (std::size_t l = 0; l < L; ++l) {
      if (!present[l]) continue;
      const T d = pv[v * L + l] - tv[v * L + l];
      acc += d * d;
    }
  std::vector<T> out{acc * norm};

  auto backward = [pred, target, present, voxels, L, norm](Tape<T>& tape,
                                                           const std::vector<T>& g) {
    if (!pred.requires_grad()) return;
    auto& gp = tape.grad_at(pred.node(), pred.size());
    const T scale = T(2) * norm * g[0];
    for (std::size_t v = 0; v < voxels; ++v)
      for (std::size_t l = 0; l < L; ++l) {
        if (!present[l]) continue;
        gp[v * L + l] += scale * (pred.values()[v * L + l] - target.values()[v * L + l]);
      }
  };
  return detail::make_op<T>("heatmap_loss", Shape{}, std::move(out), {&pred, &target},
                            backward);
}

// `positive_mask` is the label tensor [H',W',D',L*n_a] in {0,1}; offsets are
// [H',W',D',3*L*n_a] with the 3 axis slots per anchor channel.
template <typename T>
Tensor<T> offset_loss(const Tensor<T>& pred, const Tensor<T>& target,
                      const Tensor<T>& positive_mask) {
  detail::require(pred.shape() == target.shape(),
                  "offset_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                      shape_str(target.shape()));
  detail::require(pred.size() == 3 * positive_mask.size(),
                  "offset_loss: offsets must hold 3 values per anchor channel");
  const auto& mv = positive_mask.values();
  std::size_t n_pos = 0;
  for (const T& m : mv) n_pos += m > T(0) ? 1 : 0;
  detail::require(n_pos > 0, "offset_loss: no positive anchors");

  const T norm = T(1) / static_cast<T>(n_pos);
  const auto& pv = pred.values();
  const auto& tv = target.values();
  T acc = T(0);
  for (std::size_t a = 0; a < mv.size(); ++a) {
    if (mv[a] <= T(0)) continue;
    for (int ax = 0; ax < 3; ++ax) {
      const T d = pv[a * 3 + ax] - tv[a * 3 + ax];
      acc += d * d;
    }
  }
  std::vector<T> out{acc * norm};
  auto backward = [pred, target, positive_mask, norm](Tape<T>& tape,
                                                      const std::vector<T>& g) {
    if (!pred.requires_grad()) return;
    auto& gp = tape.grad_at(pred.node(), pred.size());
    const T scale = T(2) * norm * g[0];
    const auto& mv2 = positive_mask.values();
    for (std::size_t a = 0; a < mv2.size(); ++a) {
      if (mv2[a] <= T(0)) continue;
      for (int ax = 0; ax < 3; ++ax)
        gp[a * 3 + ax] += scale * (pred.values()[a * 3 + ax] - target.values()[a * 3 + ax]);
    }
  };
  return detail::make_op<T>("offset_loss", Shape{}, std::move(out), {&pred, &target},
                            backward);
}

template <typename T>
Tensor<T> cls_loss(const Tensor<T>& p_hat, const Tensor<T>& p_true) {
  detail::require(p_hat.shape() == p_true.shape(),
                  "cls_loss: prediction " + shape_str(p_hat.shape()) + " vs target " +
                      shape_str(p_true.shape()));
  constexpr double kEps = 1e-7;
  const std::size_t n = p_hat.size();
  const T norm = T(1) / static_cast<T>(n);
  const auto& pv = p_hat.values();
  const auto& tv = p_true.values();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(pv[i]), kEps, 1.0 - kEps);
    const double t = static_cast<double>(tv[i]);
    acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  std::vector<T> out{static_cast<T>(acc / static_cast<double>(n))};
  auto backward = [p_hat, p_true, norm](Tape<T>& tape, const std::vector<T>& g) {
    if (!p_hat.requires_grad()) return;
    constexpr double kEps = 1e-7;
    auto& gp = tape.grad_at(p_hat.node(), p_hat.size());
    const auto& pv2 = p_hat.values();
    const auto& tv2 = p_true.values();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const double p = std::clamp(static_cast<double>(pv2[i]), kEps, 1.0 - kEps);
      const double t = static_cast<double>(tv2[i]);
      gp[i] += g[0] * norm * static_cast<T>((p - t) / (p * (1.0 - p)));
    }
  };
  return detail::make_op<T>("cls_loss", Shape{}, std::move(out), {&p_hat, &p_true},
                            backward);
}

// Anchor-free: the heatmap term alone. Anchor-based: the weighted sum of the
// regression, classification, and (optional auxiliary) heatmap terms; pass an
// undefined tensor for a term that does not apply and it contributes zero.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& heatmap_term, const Tensor<T>& reg_term,
                     const Tensor<T>& cls_term, const LossWeights& weights, Variant variant) {
  weights.validate();
  if (variant == Variant::AnchorFree) {
    detail::require(heatmap_term.defined(), "total_loss: anchor-free needs the heatmap term");
    return heatmap_term;
  }
  Tensor<T> total = Tensor<T>::scalar(T(0));
  if (reg_term.defined()) total = add(total, mul(reg_term, static_cast<T>(weights.reg)));
  if (cls_term.defined()) total = add(total, mul(cls_term, static_cast<T>(weights.cls)));
  if (heatmap_term.defined())
    total = add(total, mul(heatmap_term, static_cast<T>(weights.heatmap)));
  return total;
}

}  // namespace volmark
