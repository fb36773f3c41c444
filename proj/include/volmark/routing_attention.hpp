#pragma once

// Volumetric bi-level routing attention.
//
// The feature volume is partitioned into regions of region_size tokens.
// Coarse stage: per-region mean descriptors of the projected Q/K score every
// region pair; each query region keeps its top_k key regions (hard,
// non-differentiable selection on the raw scores; softmax is monotone so the
// selection matches the normalized affinity). Fine stage: multi-head
// attention from each region's tokens to the k*S tokens gathered from its
// selected regions, followed by the output projection. Gradients flow
// through the gathered values but never through the routing itself.

#include <array>
#include <cstdint>
#include <vector>

#include "volmark/nn.hpp"
#include "volmark/tensor.hpp"

namespace volmark {

enum class PaddingPolicy { Reject, ZeroPadMask };

struct RoutingConfig {
  Dims3 region_size{4, 4, 4};
  std::size_t top_k = 4;
  std::size_t heads = 2;
  std::size_t channels = 8;
  PaddingPolicy padding_policy = PaddingPolicy::Reject;
  bool force_self_region = false;

  std::size_t head_dim() const { return channels / heads; }

  void validate() const {
    detail::require(heads >= 1 && channels >= 1, "routing config: empty heads/channels");
    detail::require(channels % heads == 0,
                    "routing config: heads (" + std::to_string(heads) +
                        ") must divide channels (" + std::to_string(channels) + ")");
    detail::require(top_k >= 1, "routing config: top_k must be >= 1");
    for (int ax = 0; ax < 3; ++ax)
      detail::require(region_size[ax] >= 1, "routing config: zero region extent");
  }
};

// Region partition geometry plus the flat index maps between the volume
// layout [H,W,D,C] and the region-major layout [R,S,C]. Padding entries in
// partition_index are -1 (they gather as zero rows).
struct RegionGeometry {
  Dims3 dims{};    // original spatial extents
  Dims3 padded{};  // extents rounded up to region multiples
  Dims3 region{};
  Dims3 grid{};
  std::size_t region_count = 0;   // R
  std::size_t region_tokens = 0;  // S
  std::vector<std::int64_t> partition_index;    // [R*S] -> token in volume or -1
  std::vector<std::int64_t> unpartition_index;  // [H*W*D] -> slot in region order
  std::vector<std::size_t> valid_count;         // per region

  bool has_padding() const { return padded != dims; }
};

struct RoutingIndex {
  RegionGeometry geom;
  std::size_t top_k = 0;
  // Per query region, exactly top_k selected key-region ids, ascending.
  std::vector<std::size_t> selected;

  const std::size_t* row(std::size_t region) const { return selected.data() + region * top_k; }
};

inline RegionGeometry make_region_geometry(Dims3 dims, Dims3 region, PaddingPolicy policy) {
  static const char* axis_names[3] = {"H", "W", "D"};
  RegionGeometry g;
  g.dims = dims;
  g.region = region;
  for (int ax = 0; ax < 3; ++ax) {
    detail::require(region[ax] >= 1, "partition: zero region extent");
    if (policy == PaddingPolicy::Reject)
      detail::require(dims[ax] % region[ax] == 0,
                      std::string("partition: axis ") + axis_names[ax] + " extent " +
                          std::to_string(dims[ax]) + " not divisible by region extent " +
                          std::to_string(region[ax]));
    g.grid[ax] = (dims[ax] + region[ax] - 1) / region[ax];
    g.padded[ax] = g.grid[ax] * region[ax];
  }
  g.region_count = g.grid[0] * g.grid[1] * g.grid[2];
  g.region_tokens = region[0] * region[1] * region[2];
  g.partition_index.assign(g.region_count * g.region_tokens, -1);
  g.unpartition_index.assign(dims[0] * dims[1] * dims[2], -1);
  g.valid_count.assign(g.region_count, 0);

  std::size_t r = 0;
  for (std::size_t gh = 0; gh < g.grid[0]; ++gh)
    for (std::size_t gw = 0; gw < g.grid[1]; ++gw)
      for (std::size_t gd = 0; gd < g.grid[2]; ++gd, ++r) {
        std::size_t s = 0;
        for (std::size_t lh = 0; lh < region[0]; ++lh)
          for (std::size_t lw = 0; lw < region[1]; ++lw)
            for (std::size_t ld = 0; ld < region[2]; ++ld, ++s) {
              const std::size_t h = gh * region[0] + lh;
              const std::size_t w = gw * region[1] + lw;
              const std::size_t d = gd * region[2] + ld;
              if (h >= dims[0] || w >= dims[1] || d >= dims[2]) continue;
              const std::size_t tok = (h * dims[1] + w) * dims[2] + d;
              g.partition_index[r * g.region_tokens + s] = static_cast<std::int64_t>(tok);
              g.unpartition_index[tok] = static_cast<std::int64_t>(r * g.region_tokens + s);
              ++g.valid_count[r];
            }
      }
  return g;
}

// [H,W,D,C] -> ([R,S,C], geometry). The inverse mapping restores the input
// exactly; padded slots are zero rows.
template <typename T>
std::pair<Tensor<T>, RegionGeometry> partition_regions(const Tensor<T>& f, Dims3 region,
                                                       PaddingPolicy policy) {
  const Shape& s = f.shape();
  detail::require(s.size() == 4, "partition: expected [H,W,D,C], got " + shape_str(s));
  RegionGeometry geom = make_region_geometry({s[0], s[1], s[2]}, region, policy);
  const std::size_t C = s[3];
  Tensor<T> flat = reshape(f, {s[0] * s[1] * s[2], C});
  Tensor<T> gathered = gather_rows(flat, geom.partition_index);
  Tensor<T> out = reshape(gathered, {geom.region_count, geom.region_tokens, C});
  return {out, geom};
}

// [R,S,C] -> [H,W,D,C]
template <typename T>
Tensor<T> unpartition_regions(const Tensor<T>& x, const RegionGeometry& geom) {
  const Shape& s = x.shape();
  detail::require(s.size() == 3 && s[0] == geom.region_count && s[1] == geom.region_tokens,
                  "unpartition: tensor " + shape_str(s) + " does not match geometry");
  const std::size_t C = s[2];
  Tensor<T> flat = reshape(x, {s[0] * s[1], C});
  Tensor<T> scattered = gather_rows(flat, geom.unpartition_index);
  return reshape(scattered, {geom.dims[0], geom.dims[1], geom.dims[2], C});
}

// Mean over each region's valid tokens: [R,S,C] -> [R,C].
template <typename T>
Tensor<T> region_descriptors(const Tensor<T>& x, const RegionGeometry& geom) {
  const Shape& s = x.shape();
  detail::require(s.size() == 3, "region_descriptors: expected [R,S,C]");
  const std::size_t C = s[2];
  for (std::size_t r = 0; r < geom.region_count; ++r)
    detail::require(geom.valid_count[r] > 0,
                    "region_descriptors: region " + std::to_string(r) + " has no valid tokens");
  Tensor<T> sums = reduce_sum(x, 1);  // [R,C]; padded tokens are zero rows
  std::vector<T> recip(geom.region_count * C);
  for (std::size_t r = 0; r < geom.region_count; ++r)
    for (std::size_t c = 0; c < C; ++c)
      recip[r * C + c] = T(1) / static_cast<T>(geom.valid_count[r]);
  return mul(sums, Tensor<T>({geom.region_count, C}, std::move(recip)));
}

// Normalized region-to-region affinity softmax(Qp Kp^T / sqrt(d_k)); used by
// tests and diagnostics. Selection itself runs on the raw scores.
template <typename T>
Tensor<T> coarse_affinity(const Tensor<T>& qp, const Tensor<T>& kp, std::size_t head_dim) {
  Tensor<T> scores = matmul(qp.detached(), transpose(kp.detached()));
  scores = mul(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim))));
  return softmax(scores, 1);
}

// Hard top-k routing. Ties break toward the lowest region id; selected ids
// are stored ascending. Never recorded on any tape.
template <typename T>
RoutingIndex coarse_route(const Tensor<T>& qp, const Tensor<T>& kp,
                          const RegionGeometry& geom, const RoutingConfig& cfg) {
  const std::size_t R = geom.region_count;
  detail::require(qp.rank() == 2 && kp.rank() == 2 && qp.shape()[0] == R &&
                      kp.shape()[0] == R,
                  "coarse_route: descriptors must be [R,C]");
  detail::require(cfg.top_k <= R, "coarse_route: top_k=" + std::to_string(cfg.top_k) +
                                      " exceeds region count " + std::to_string(R));
  Tensor<T> scores = matmul(qp.detached(), transpose(kp.detached()));
  scores = mul(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.head_dim()))));

  RoutingIndex routing;
  routing.geom = geom;
  routing.top_k = cfg.top_k;
  routing.selected.reserve(R * cfg.top_k);
  const auto& sv = scores.values();
  std::vector<std::size_t> order(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = sv.data() + r * R;
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (cfg.force_self_region) {
      // own region first, then best of the rest
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.top_k),
                        order.end(), [&](std::size_t a, std::size_t b) {
                          const bool sa = a == r, sb = b == r;
                          if (sa != sb) return sa;
                          if (row[a] != row[b]) return row[a] > row[b];
                          return a < b;
                        });
    } else {
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.top_k),
                        order.end(), [&](std::size_t a, std::size_t b) {
                          if (row[a] != row[b]) return row[a] > row[b];
                          return a < b;
                        });
    }
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.top_k));
    routing.selected.insert(routing.selected.end(), order.begin(),
                            order.begin() + static_cast<std::ptrdiff_t>(cfg.top_k));
  }
  return routing;
}

// Concatenates the selected regions' tokens per query region:
// [R,S,C] -> [R, k*S, C], selected-region id ascending, token order preserved.
template <typename T>
Tensor<T> gather_tokens(const Tensor<T>& x, const RoutingIndex& routing) {
  const Shape& s = x.shape();
  const std::size_t R = routing.geom.region_count;
  detail::require(s.size() == 3 && s[0] == R, "gather_tokens: expected [R,S,C]");
  const std::size_t S = s[1], C = s[2], k = routing.top_k;
  detail::require(routing.selected.size() == R * k, "gather_tokens: malformed routing table");
  std::vector<std::int64_t> region_ids(R * k);
  for (std::size_t i = 0; i < R * k; ++i) {
    detail::require(routing.selected[i] < R,
                    "gather_tokens: region id " + std::to_string(routing.selected[i]) +
                        " out of range");
    region_ids[i] = static_cast<std::int64_t>(routing.selected[i]);
  }
  Tensor<T> rows = reshape(x, {R, S * C});
  Tensor<T> picked = gather_rows(rows, region_ids);  // [R*k, S*C]
  return reshape(picked, {R, k * S, C});
}

namespace detail {

// [R,S,C] -> [R*heads, S, head_dim]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const Shape& s = x.shape();
  const std::size_t R = s[0], S = s[1], C = s[2];
  const std::size_t dk = C / heads;
  Tensor<T> y = reshape(x, {R, S, heads, dk});
  y = permute(y, {0, 2, 1, 3});  // [R,heads,S,dk]
  return reshape(y, {R * heads, S, dk});
}

// inverse of split_heads
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t R, std::size_t heads) {
  const Shape& s = x.shape();
  const std::size_t S = s[1], dk = s[2];
  Tensor<T> y = reshape(x, {R, heads, S, dk});
  y = permute(y, {0, 2, 1, 3});  // [R,S,heads,dk]
  return reshape(y, {R, S, heads * dk});
}

}  // namespace detail

// Multi-head token-to-token attention from each region's queries to its
// gathered keys/values, concatenated heads projected by w_out, result
// restored to the volume layout. Padded key tokens receive -1e30 logits.
template <typename T>
Tensor<T> fine_attention(const Tensor<T>& q, const Tensor<T>& k_gathered,
                         const Tensor<T>& v_gathered, const Tensor<T>& w_out,
                         const RoutingIndex& routing, const RoutingConfig& cfg) {
  cfg.validate();
  const std::size_t R = routing.geom.region_count;
  const std::size_t S = routing.geom.region_tokens;
  const std::size_t C = cfg.channels;
  const std::size_t kS = routing.top_k * S;
  detail::require(q.shape() == Shape{R, S, C},
                  "fine_attention: queries " + shape_str(q.shape()) + " do not match [R,S,C]");
  detail::require(k_gathered.shape() == Shape{R, kS, C} &&
                      v_gathered.shape() == Shape{R, kS, C},
                  "fine_attention: gathered tokens must be [R,k*S,C]");
  detail::require(w_out.shape() == Shape{C, C}, "fine_attention: w_out must be CxC");

  const std::size_t heads = cfg.heads, dk = cfg.head_dim();
  Tensor<T> qh = detail::split_heads(q, heads);          // [R*h, S, dk]
  Tensor<T> kh = detail::split_heads(k_gathered, heads); // [R*h, kS, dk]
  Tensor<T> vh = detail::split_heads(v_gathered, heads);
  qh = mul(qh, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
  Tensor<T> logits = matmul(qh, permute(kh, {0, 2, 1}));  // [R*h, S, kS]

  if (routing.geom.has_padding()) {
    // additive key mask shared across heads and query tokens
    constexpr T kNegInf = T(-1e30);
    std::vector<T> mask(R * heads * S * kS, T(0));
    for (std::size_t r = 0; r < R; ++r) {
      bool any_valid = false;
      std::vector<T> key_row(kS, T(0));
      for (std::size_t sel = 0; sel < routing.top_k; ++sel) {
        const std::size_t src = routing.row(r)[sel];
        for (std::size_t s = 0; s < S; ++s) {
          const bool valid = routing.geom.partition_index[src * S + s] >= 0;
          key_row[sel * S + s] = valid ? T(0) : kNegInf;
          any_valid |= valid;
        }
      }
      detail::require(any_valid,
                      "fine_attention: all keys masked for query region " + std::to_string(r));
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t s = 0; s < S; ++s)
          std::copy(key_row.begin(), key_row.end(),
                    mask.begin() + (((r * heads + h) * S) + s) * kS);
    }
    logits = add(logits, Tensor<T>({R * heads, S, kS}, std::move(mask)));
  }

  Tensor<T> attn = softmax(logits, 2);
  Tensor<T> ctx = matmul(attn, vh);                      // [R*h, S, dk]
  Tensor<T> merged = detail::merge_heads(ctx, R, heads); // [R, S, C]
  Tensor<T> projected = matmul(reshape(merged, {R * S, C}), w_out);
  return unpartition_regions(reshape(projected, {R, S, C}), routing.geom);
}

// Full quadratic multi-head attention over a flat token list [T,C]; the
// routing-free oracle for the equivalence tests and the dense benchmark arm.
template <typename T>
Tensor<T> dense_attention_reference(const Tensor<T>& q, const Tensor<T>& k,
                                    const Tensor<T>& v, const Tensor<T>& w_out,
                                    std::size_t heads) {
  const Shape& s = q.shape();
  detail::require(s.size() == 2 && k.shape() == s && v.shape() == s,
                  "dense_attention: q/k/v must share [T,C]");
  const std::size_t Tn = s[0], C = s[1];
  detail::require(C % heads == 0, "dense_attention: heads must divide channels");
  const std::size_t dk = C / heads;
  auto split = [&](const Tensor<T>& x) {
    return permute(reshape(x, {Tn, heads, dk}), {1, 0, 2});  // [h,T,dk]
  };
  Tensor<T> qh = mul(split(q), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
  Tensor<T> logits = matmul(qh, permute(split(k), {0, 2, 1}));  // [h,T,T]
  Tensor<T> attn = softmax(logits, 2);
  Tensor<T> ctx = matmul(attn, split(v));  // [h,T,dk]
  Tensor<T> merged = reshape(permute(ctx, {1, 0, 2}), {Tn, C});
  return matmul(merged, w_out);
}

template <typename T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v, w_out;  // all CxC
};

// The complete bi-level attention: project Q/K/V, partition, route on mean
// descriptors of the detached projections, gather, and attend.
template <typename T>
Tensor<T> bi_level_attention(const Tensor<T>& x, const AttentionParams<T>& p,
                             const RoutingConfig& cfg) {
  cfg.validate();
  const Shape& s = x.shape();
  detail::require(s.size() == 4 && s[3] == cfg.channels,
                  "bi_level_attention: input " + shape_str(s) + " does not carry " +
                      std::to_string(cfg.channels) + " channels");
  const std::size_t TN = s[0] * s[1] * s[2], C = cfg.channels;
  Tensor<T> flat = reshape(x, {TN, C});
  Tensor<T> q = matmul(flat, p.w_q);
  Tensor<T> k = matmul(flat, p.w_k);
  Tensor<T> v = matmul(flat, p.w_v);
  auto shape_back = [&](const Tensor<T>& t) { return reshape(t, {s[0], s[1], s[2], C}); };

  auto [q_part, geom] = partition_regions(shape_back(q), cfg.region_size, cfg.padding_policy);
  auto [k_part, geom_k] = partition_regions(shape_back(k), cfg.region_size, cfg.padding_policy);
  auto [v_part, geom_v] = partition_regions(shape_back(v), cfg.region_size, cfg.padding_policy);
  (void)geom_k;
  (void)geom_v;

  Tensor<T> qp = region_descriptors(q_part.detached(), geom);
  Tensor<T> kp = region_descriptors(k_part.detached(), geom);
  RoutingIndex routing = coarse_route(qp, kp, geom, cfg);

  Tensor<T> k_star = gather_tokens(k_part, routing);
  Tensor<T> v_star = gather_tokens(v_part, routing);
  return fine_attention(q_part, k_star, v_star, p.w_out, routing, cfg);
}

template <typename T>
struct BlockParams {
  Tensor<T> dw_weight, dw_bias;   // depthwise local-context conv
  Tensor<T> ln1_gamma, ln1_beta;  // pre-attention norm
  AttentionParams<T> attn;
  Tensor<T> ln2_gamma, ln2_beta;  // pre-MLP norm
  MlpParams<T> mlp;
};

// BiFormer-style block:
//   y1 = x + DWConv(x)
//   y2 = y1 + Attention(LN(y1))
//   y  = y2 + MLP(LN(y2))
template <typename T>
Tensor<T> routing_block(const Tensor<T>& x, const BlockParams<T>& p, const RoutingConfig& cfg) {
  Tensor<T> y1 = add(x, dwconv3d(x, p.dw_weight, p.dw_bias));
  Tensor<T> y2 = add(y1, bi_level_attention(layer_norm(y1, p.ln1_gamma, p.ln1_beta), p.attn, cfg));
  return add(y2, mlp_block(layer_norm(y2, p.ln2_gamma, p.ln2_beta), p.mlp));
}

}  // namespace volmark
