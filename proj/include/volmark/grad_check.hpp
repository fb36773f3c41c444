#pragma once

// Central finite-difference verification of tape gradients. The checker is
// the independent oracle for every differentiable op: it re-evaluates the
// function under elementwise +/- eps perturbations and compares against the
// gradients the tape produced.

#include <functional>
#include <vector>

#include "volmark/rng.hpp"
#include "volmark/tensor.hpp"

namespace volmark {

template <typename T>
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// `fn` maps the (tape-bound) inputs to a scalar loss. Relative error is
// |analytic - numeric| / max(1, |analytic|, |numeric|), so near-zero
// gradients are compared absolutely.
template <typename T>
GradCheckResult<T> grad_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& fn,
    const std::vector<Tensor<T>>& inputs, double eps) {
  GradCheckResult<T> result;

  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Tensor<T>> bound;
    bound.reserve(inputs.size());
    for (const auto& in : inputs) bound.push_back(tape.watch(in));
    Tensor<T> loss = fn(bound);
    tape.backward(loss);
    for (const auto& b : bound) analytic.push_back(tape.grad(b));
  }

  auto eval_at = [&](std::size_t which, std::size_t elem, double delta) {
    std::vector<Tensor<T>> probe = inputs;
    std::vector<T> data = inputs[which].values();
    data[elem] = static_cast<T>(static_cast<double>(data[elem]) + delta);
    probe[which] = Tensor<T>(inputs[which].shape(), std::move(data));
    return static_cast<double>(fn(probe).item());
  };

  for (std::size_t which = 0; which < inputs.size(); ++which) {
    for (std::size_t elem = 0; elem < inputs[which].size(); ++elem) {
      const double plus = eval_at(which, elem, eps);
      const double minus = eval_at(which, elem, -eps);
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = static_cast<double>(analytic[which][elem]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

// Same comparison over a random sample of elements; for large functions
// (whole models) where the full sweep is too slow.
template <typename T>
GradCheckResult<T> grad_check_sampled(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& fn,
    const std::vector<Tensor<T>>& inputs, double eps, std::size_t samples_per_input,
    SplitMix64& rng) {
  GradCheckResult<T> result;

  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Tensor<T>> bound;
    bound.reserve(inputs.size());
    for (const auto& in : inputs) bound.push_back(tape.watch(in));
    Tensor<T> loss = fn(bound);
    tape.backward(loss);
    for (const auto& b : bound) analytic.push_back(tape.grad(b));
  }

  auto eval_at = [&](std::size_t which, std::size_t elem, double delta) {
    std::vector<Tensor<T>> probe = inputs;
    std::vector<T> data = inputs[which].values();
    data[elem] = static_cast<T>(static_cast<double>(data[elem]) + delta);
    probe[which] = Tensor<T>(inputs[which].shape(), std::move(data));
    return static_cast<double>(fn(probe).item());
  };

  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const std::size_t n = inputs[which].size();
    for (std::size_t s = 0; s < std::min(samples_per_input, n); ++s) {
      const std::size_t elem = rng.next_below(n);
      const double numeric =
          (eval_at(which, elem, eps) - eval_at(which, elem, -eps)) / (2.0 * eps);
      const double a = static_cast<double>(analytic[which][elem]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace volmark
