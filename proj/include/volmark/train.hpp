#pragma once

// Full-batch gradient descent with global-norm clipping, plus the
// prediction pipeline shared by training, evaluation, and inference.
// The optimizer is deliberately plain: fixed step size, gradients clipped
// to unit global norm, bit-deterministic for a fixed seed and dataset.

#include <vector>

#include "volmark/model.hpp"

namespace volmark {

// normalize to [0,255], then scale into [0,1] for the network
template <typename T>
Tensor<T> network_input(const Volume<T>& vol) {
  Volume<T> norm = normalize_intensity(vol);
  return mul(norm.data, static_cast<T>(1.0 / 255.0));
}

template <typename T>
struct TrainingCase {
  std::string name;
  Tensor<T> input;  // [H,W,D] in [0,1]
  LandmarkSet landmarks;
  std::vector<bool> present;
  Tensor<T> heatmap_target;          // anchor-free (and aux head) target
  AnchorTargets<T> anchor_targets;   // anchor-based targets
  bool any_present = false;
  bool any_positive = false;
};

template <typename T>
TrainingCase<T> make_training_case(const ModelConfig& cfg, const Volume<T>& vol,
                                   const LandmarkSet& set, const std::string& name = "") {
  detail::require(set.count() == cfg.landmark_count,
                  "training case: annotation holds " + std::to_string(set.count()) +
                      " landmarks, model expects " + std::to_string(cfg.landmark_count));
  TrainingCase<T> tc;
  tc.name = name;
  tc.input = network_input(vol);
  tc.landmarks = set;
  tc.present.reserve(set.count());
  for (const auto& lm : set.landmarks) {
    tc.present.push_back(lm.present);
    tc.any_present |= lm.present;
  }
  const auto dims = vol.dims();
  if (cfg.variant == Variant::AnchorFree) {
    if (tc.any_present)
      tc.heatmap_target = encode_heatmaps<T>(set, dims, cfg.heatmap_sigma);
    else
      tc.heatmap_target = Tensor<T>::zeros({dims[0], dims[1], dims[2], set.count()});
  } else {
    tc.anchor_targets = encode_targets<T>(set, cfg.anchor_grid());
    for (const T& v : tc.anchor_targets.labels.values()) tc.any_positive |= v > T(0);
    if (cfg.aux_heatmap_head) {
      // quarter-resolution auxiliary target
      LandmarkSet scaled = set;
      for (auto& lm : scaled.landmarks) {
        lm.x /= 4;
        lm.y /= 4;
        lm.z /= 4;
      }
      const Dims3 lat = cfg.stage_dims(2);
      tc.heatmap_target = encode_heatmaps<T>(
          scaled, {lat[0], lat[1], lat[2]}, std::max(cfg.heatmap_sigma / 4.0, 1.0));
    }
  }
  return tc;
}

struct TrainOptions {
  std::size_t steps = 500;
  double learning_rate = 6.0;
  double clip_norm = 1.0;
  LossWeights weights{};
};

struct LossRecord {
  std::size_t step = 0;
  double total = 0, heatmap = 0, reg = 0, cls = 0;
};

namespace detail {

template <typename T>
struct StepLoss {
  Tensor<T> total;
  double heatmap = 0, reg = 0, cls = 0;
};

template <typename T>
StepLoss<T> batch_loss(const ModelState<T>& bound, const std::vector<TrainingCase<T>>& cases,
                       const LossWeights& weights) {
  const ModelConfig& cfg = bound.config;
  StepLoss<T> out;
  Tensor<T> hm_sum, reg_sum, cls_sum;
  std::size_t hm_n = 0, reg_n = 0, cls_n = 0;
  auto accumulate = [](Tensor<T>& acc, const Tensor<T>& term, std::size_t& n) {
    acc = acc.defined() ? add(acc, term) : term;
    ++n;
  };

  for (const TrainingCase<T>& tc : cases) {
    if (cfg.variant == Variant::AnchorFree) {
      if (!tc.any_present) continue;
      Tensor<T> pred = forward_anchor_free(bound, tc.input);
      accumulate(hm_sum, heatmap_loss(pred, tc.heatmap_target, tc.present), hm_n);
    } else {
      AnchorPrediction<T> pred = forward_anchor_based(bound, tc.input);
      if (tc.any_positive)
        accumulate(reg_sum,
                   offset_loss(pred.offsets, tc.anchor_targets.offsets,
                               tc.anchor_targets.labels),
                   reg_n);
      accumulate(cls_sum, cls_loss(pred.probabilities, tc.anchor_targets.labels), cls_n);
      if (cfg.aux_heatmap_head && tc.any_present)
        accumulate(hm_sum, heatmap_loss(pred.aux_heatmap, tc.heatmap_target, tc.present),
                   hm_n);
    }
  }

  auto mean_of = [](const Tensor<T>& sum, std::size_t n) {
    return sum.defined() ? mul(sum, static_cast<T>(1.0 / static_cast<double>(n)))
                         : Tensor<T>();
  };
  Tensor<T> hm = mean_of(hm_sum, hm_n);
  Tensor<T> reg = mean_of(reg_sum, reg_n);
  Tensor<T> cls = mean_of(cls_sum, cls_n);
  if (cfg.variant == Variant::AnchorFree)
    require(hm.defined(), "train: no case carries a present landmark");
  out.heatmap = hm.defined() ? static_cast<double>(hm.item()) : 0.0;
  out.reg = reg.defined() ? static_cast<double>(reg.item()) : 0.0;
  out.cls = cls.defined() ? static_cast<double>(cls.item()) : 0.0;
  out.total = total_loss(hm, reg, cls, weights, cfg.variant);
  return out;
}

}  // namespace detail

// Full-batch loss for reporting (no update).
template <typename T>
LossRecord evaluate_loss(const ModelState<T>& state, const std::vector<TrainingCase<T>>& cases,
                         const LossWeights& weights) {
  Tape<T> tape;
  ModelState<T> bound = state.bound_to(tape);
  auto step = detail::batch_loss(bound, cases, weights);
  return {0, static_cast<double>(step.total.item()), step.heatmap, step.reg, step.cls};
}

template <typename T>
std::vector<LossRecord> train_model(ModelState<T>& state,
                                    const std::vector<TrainingCase<T>>& cases,
                                    const TrainOptions& opt) {
  detail::require(!cases.empty(), "train: empty dataset");
  opt.weights.validate();
  std::vector<LossRecord> curve;
  curve.reserve(opt.steps);

  for (std::size_t step = 0; step < opt.steps; ++step) {
    Tape<T> tape;
    ModelState<T> bound = state.bound_to(tape);
    auto loss = detail::batch_loss(bound, cases, opt.weights);
    tape.backward(loss.total);

    double norm_sq = 0;
    std::vector<std::vector<T>> grads;
    grads.reserve(bound.params.size());
    for (auto& [name, p] : bound.params) {
      grads.push_back(tape.grad(p));
      for (const T& g : grads.back())
        norm_sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(norm_sq);
    const double scale =
        norm > opt.clip_norm ? opt.learning_rate * opt.clip_norm / norm : opt.learning_rate;

    for (std::size_t i = 0; i < state.params.size(); ++i) {
      const auto& old = state.params[i].second;
      std::vector<T> next(old.values());
      const auto& g = grads[i];
      for (std::size_t e = 0; e < next.size(); ++e)
        next[e] -= static_cast<T>(scale * static_cast<double>(g[e]));
      state.params[i].second = Tensor<T>(old.shape(), std::move(next));
    }
    curve.push_back(
        {step, static_cast<double>(loss.total.item()), loss.heatmap, loss.reg, loss.cls});
  }
  return curve;
}

struct PredictOptions {
  double presence_threshold = 0.25;  // heatmap decoding
  double tau = 0.5;                  // anchor probability threshold
  bool centroid_refine = false;
};

template <typename T>
LandmarkSet predict_landmarks(const ModelState<T>& state, const Volume<T>& vol,
                              const PredictOptions& opt = {}) {
  Tensor<T> input = network_input(vol);
  if (state.config.variant == Variant::AnchorFree) {
    Tensor<T> heatmap = forward_anchor_free(state, input);
    DecodeOptions d;
    d.presence_threshold = opt.presence_threshold;
    d.centroid_refine = opt.centroid_refine;
    return decode_peaks(heatmap, d, vol.spacing);
  }
  AnchorPrediction<T> pred = forward_anchor_based(state, input);
  return decode_predictions(pred.offsets, pred.probabilities, state.config.anchor_grid(),
                            opt.tau, vol.spacing);
}

}  // namespace volmark
