#pragma once

// Finite-difference verification suites behind the gradcheck command. All
// suites run at 64-bit. The `corrupt` hook routes one check through an op
// whose backward is deliberately scaled wrong, to prove the harness fails
// loudly when a gradient is broken.

#include <string>
#include <vector>

#include "volmark/grad_check.hpp"
#include "volmark/losses.hpp"
#include "volmark/model.hpp"
#include "volmark/routing_attention.hpp"

namespace volmark {

struct CheckResult {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

namespace detail {

using Td = Tensor<double>;

inline Td rand_t(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  return Td(shape, uniform_vector<double>(rng, numel(shape), lo, hi));
}

// identity forward whose backward is off by two percent
inline Td corrupted_identity(const Td& x) {
  std::vector<double> data = x.values();
  auto backward = [x](Tape<double>& tape, const std::vector<double>& g) {
    if (!x.requires_grad()) return;
    auto& gx = tape.grad_at(x.node(), x.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 1.02 * g[i];
  };
  return make_op<double>("corrupted_identity", x.shape(), std::move(data), {&x}, backward);
}

}  // namespace detail

inline std::vector<CheckResult> gradcheck_ops(std::uint64_t seed, bool corrupt = false) {
  using detail::Td;
  SplitMix64 rng(seed);
  std::vector<CheckResult> results;
  const double tol = 1e-5;
  Td w = detail::rand_t({4, 5}, rng);

  auto run1 = [&](const std::string& name,
                  std::function<Td(const std::vector<Td>&)> fn, std::vector<Td> inputs,
                  double tolerance = 1e-5) {
    auto res = grad_check<double>(fn, inputs, 1e-6);
    results.push_back({name, res.max_rel_error, tolerance});
  };

  run1("add", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(add(in[0], in[1]), w));
  }, {detail::rand_t({4, 5}, rng), detail::rand_t({4, 5}, rng)});
  run1("sub", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(sub(in[0], in[1]), w));
  }, {detail::rand_t({4, 5}, rng), detail::rand_t({4, 5}, rng)});
  run1("mul", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(mul(in[0], in[1]), w));
  }, {detail::rand_t({4, 5}, rng), detail::rand_t({4, 5}, rng)});
  run1("mul_scalar", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(mul(in[0], in[1]), w));
  }, {detail::rand_t({4, 5}, rng), detail::rand_t({}, rng)});
  run1("matmul", [](const std::vector<Td>& in) {
    Td y = matmul(in[0], in[1]);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({3, 4}, rng), detail::rand_t({4, 2}, rng)});
  run1("matmul_batched", [](const std::vector<Td>& in) {
    Td y = matmul(in[0], in[1]);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({2, 3, 4}, rng), detail::rand_t({2, 4, 2}, rng)});
  run1("transpose", [](const std::vector<Td>& in) {
    Td y = transpose(in[0]);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({3, 4}, rng)});
  run1("permute", [](const std::vector<Td>& in) {
    Td y = permute(in[0], {2, 0, 1});
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({2, 3, 4}, rng)});
  run1("reshape", [](const std::vector<Td>& in) {
    Td y = reshape(in[0], {12});
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({3, 4}, rng)});
  run1("concat", [](const std::vector<Td>& in) {
    Td y = concat(std::vector<Td>{in[0], in[1]}, 1);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({2, 3}, rng), detail::rand_t({2, 2}, rng)});
  run1("slice", [](const std::vector<Td>& in) {
    Td y = slice(in[0], 1, 1, 2);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({3, 4}, rng)});
  run1("gather", [](const std::vector<Td>& in) {
    Td y = gather_rows(in[0], {1, 1, 0, -1, 2});
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({3, 4}, rng)});
  run1("reduce_sum", [](const std::vector<Td>& in) {
    return reduce_sum(mul(in[0], in[0]));
  }, {detail::rand_t({3, 4}, rng)});
  run1("reduce_mean_axis", [](const std::vector<Td>& in) {
    Td m = reduce_mean(in[0], 1);
    return reduce_sum(mul(m, m));
  }, {detail::rand_t({3, 4}, rng)});
  run1("reduce_max_axis", [](const std::vector<Td>& in) {
    Td m = reduce_max(in[0], 0);
    return reduce_sum(mul(m, m));
  }, {detail::rand_t({3, 4}, rng)});
  run1("exp", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(volmark::exp(in[0]), w));
  }, {detail::rand_t({4, 5}, rng)});
  run1("log", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(volmark::log(in[0]), w));
  }, {detail::rand_t({4, 5}, rng, 0.5, 2.0)});
  run1("relu", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(relu(in[0]), w));
  }, {detail::rand_t({4, 5}, rng, 0.1, 1.0)});
  run1("gelu", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(gelu(in[0]), w));
  }, {detail::rand_t({4, 5}, rng)});
  run1("sigmoid", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(sigmoid(in[0]), w));
  }, {detail::rand_t({4, 5}, rng)});
  run1("softmax", [&](const std::vector<Td>& in) {
    return reduce_sum(mul(softmax(in[0], 1), w));
  }, {detail::rand_t({4, 5}, rng)});
  run1("conv3d", [](const std::vector<Td>& in) {
    Td y = conv3d(in[0], in[1], in[2], {2, 2, 2}, {1, 1, 1});
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({4, 4, 4, 2}, rng), detail::rand_t({3, 3, 3, 2, 3}, rng),
      detail::rand_t({3}, rng)});
  run1("dwconv3d", [](const std::vector<Td>& in) {
    Td y = dwconv3d(in[0], in[1], in[2]);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({3, 3, 3, 2}, rng), detail::rand_t({3, 3, 3, 2}, rng),
      detail::rand_t({2}, rng)});
  run1("layer_norm", [](const std::vector<Td>& in) {
    Td y = layer_norm(in[0], in[1], in[2]);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({2, 2, 2, 4}, rng), detail::rand_t({4}, rng, 0.5, 1.5),
      detail::rand_t({4}, rng)});
  run1("mlp_block", [](const std::vector<Td>& in) {
    MlpParams<double> p{in[1], in[2], in[3], in[4]};
    Td y = mlp_block(in[0], p);
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({2, 2, 1, 3}, rng), detail::rand_t({3, 6}, rng),
      detail::rand_t({6}, rng), detail::rand_t({6, 3}, rng), detail::rand_t({3}, rng)});
  run1("trilinear_upsample", [](const std::vector<Td>& in) {
    Td y = trilinear_upsample(in[0], {2, 2, 2});
    return reduce_sum(mul(y, y));
  }, {detail::rand_t({2, 2, 2, 2}, rng)});
  if (corrupt)
    run1("corrupted_identity", [](const std::vector<Td>& in) {
      Td y = detail::corrupted_identity(in[0]);
      return reduce_sum(mul(y, y));
    }, {detail::rand_t({3, 3}, rng)});
  (void)tol;
  return results;
}

inline std::vector<CheckResult> gradcheck_vbra(std::uint64_t seed) {
  using detail::Td;
  SplitMix64 rng(seed);
  std::vector<CheckResult> results;
  const std::size_t C = 4;

  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = C;
  cfg.heads = 2;
  cfg.top_k = 4;

  auto attn_fn = [&](const std::vector<Td>& in) {
    AttentionParams<double> p{in[1], in[2], in[3], in[4]};
    Td y = bi_level_attention(in[0], p, cfg);
    return reduce_sum(mul(y, y));
  };
  const double s = 0.5;
  std::vector<Td> attn_inputs{detail::rand_t({4, 4, 4, C}, rng),
                              detail::rand_t({C, C}, rng, -s, s),
                              detail::rand_t({C, C}, rng, -s, s),
                              detail::rand_t({C, C}, rng, -s, s),
                              detail::rand_t({C, C}, rng, -s, s)};
  auto res = grad_check<double>(attn_fn, attn_inputs, 1e-6);
  results.push_back({"bi_level_attention", res.max_rel_error, 1e-4});

  auto block_fn = [&](const std::vector<Td>& in) {
    BlockParams<double> p;
    p.dw_weight = in[1];
    p.dw_bias = in[2];
    p.ln1_gamma = in[3];
    p.ln1_beta = in[4];
    p.attn = {in[5], in[6], in[7], in[8]};
    p.ln2_gamma = in[9];
    p.ln2_beta = in[10];
    p.mlp = {in[11], in[12], in[13], in[14]};
    Td y = routing_block(in[0], p, cfg);
    return reduce_sum(mul(y, y));
  };
  std::vector<Td> block_inputs{detail::rand_t({4, 4, 4, C}, rng),
                               detail::rand_t({3, 3, 3, C}, rng, -s, s),
                               detail::rand_t({C}, rng, -s, s),
                               Td::full({C}, 1.0),
                               detail::rand_t({C}, rng, 0.1, 0.4),
                               detail::rand_t({C, C}, rng, -s, s),
                               detail::rand_t({C, C}, rng, -s, s),
                               detail::rand_t({C, C}, rng, -s, s),
                               detail::rand_t({C, C}, rng, -s, s),
                               Td::full({C}, 1.0),
                               detail::rand_t({C}, rng, 0.1, 0.4),
                               detail::rand_t({C, 2 * C}, rng, -s, s),
                               detail::rand_t({2 * C}, rng, -s, s),
                               detail::rand_t({2 * C, C}, rng, -s, s),
                               detail::rand_t({C}, rng, -s, s)};
  auto res2 = grad_check<double>(block_fn, block_inputs, 1e-6);
  results.push_back({"routing_block", res2.max_rel_error, 1e-4});
  return results;
}

inline std::vector<CheckResult> gradcheck_losses(std::uint64_t seed) {
  using detail::Td;
  SplitMix64 rng(seed);
  std::vector<CheckResult> results;

  Td hm_target = detail::rand_t({3, 3, 3, 2}, rng, 0, 1);
  auto r1 = grad_check<double>(
      [&](const std::vector<Td>& in) { return heatmap_loss(in[0], hm_target, {true, false}); },
      {detail::rand_t({3, 3, 3, 2}, rng, 0, 1)}, 1e-6);
  results.push_back({"heatmap_loss", r1.max_rel_error, 1e-6});

  Td mask(Shape{1, 1, 2, 2}, {1.0, 0.0, 1.0, 1.0});
  Td off_target = detail::rand_t({1, 1, 2, 6}, rng);
  auto r2 = grad_check<double>(
      [&](const std::vector<Td>& in) { return offset_loss(in[0], off_target, mask); },
      {detail::rand_t({1, 1, 2, 6}, rng)}, 1e-6);
  results.push_back({"offset_loss", r2.max_rel_error, 1e-6});

  Td p_true(Shape{6}, {1.0, 0.0, 0.0, 1.0, 0.0, 1.0});
  auto r3 = grad_check<double>(
      [&](const std::vector<Td>& in) { return cls_loss(in[0], p_true); },
      {detail::rand_t({6}, rng, 0.1, 0.9)}, 1e-7);
  results.push_back({"cls_loss", r3.max_rel_error, 1e-6});

  auto r4 = grad_check<double>(
      [&](const std::vector<Td>& in) {
        LossWeights w{0.7, 1.3, 0.4};
        return total_loss(heatmap_loss(in[0], hm_target, {true, true}),
                          offset_loss(in[1], off_target, mask), cls_loss(in[2], p_true), w,
                          Variant::AnchorBased);
      },
      {detail::rand_t({3, 3, 3, 2}, rng, 0, 1), detail::rand_t({1, 1, 2, 6}, rng),
       detail::rand_t({6}, rng, 0.1, 0.9)},
      1e-6);
  results.push_back({"total_loss", r4.max_rel_error, 1e-6});
  return results;
}

// End-to-end check of the 8x8x8 anchor-free model: the input volume plus a
// random sample of elements from every parameter tensor.
inline std::vector<CheckResult> gradcheck_end2end(std::uint64_t seed) {
  using detail::Td;
  SplitMix64 rng(seed);
  ModelConfig cfg;
  cfg.stages = 2;
  cfg.channels = {4, 8};
  cfg.heads = 2;
  cfg.region_size = {2, 2, 2};
  cfg.top_k = 2;
  cfg.landmark_count = 1;
  cfg.input_dims = {8, 8, 8};
  auto model = build_model<double>(cfg, seed);

  Td input = detail::rand_t({8, 8, 8}, rng, 0, 1);
  Td probe = detail::rand_t({8, 8, 8, 1}, rng);

  std::vector<Td> inputs{input};
  std::vector<std::string> names{"input"};
  for (const auto& [name, p] : model.params) {
    inputs.push_back(p);
    names.push_back(name);
  }
  auto fn = [&](const std::vector<Td>& in) {
    ModelState<double> probe_state = model;
    for (std::size_t i = 1; i < in.size(); ++i) probe_state.at(names[i]) = in[i];
    Td out = forward_anchor_free(probe_state, in[0]);
    return reduce_sum(mul(out, probe));
  };
  auto res = grad_check_sampled<double>(fn, inputs, 1e-5, 3, rng);
  return {{"end2end_anchor_free_8x8x8", res.max_rel_error, 1e-3}};
}

}  // namespace volmark
