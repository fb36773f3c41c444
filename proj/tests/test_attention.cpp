#include <catch2/catch_amalgamated.hpp>

#include "volmark/grad_check.hpp"
#include "volmark/rng.hpp"
#include "volmark/routing_attention.hpp"

using namespace volmark;

using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<T>(shape, uniform_vector<T>(rng, numel(shape), lo, hi));
}

template <typename T>
AttentionParams<T> random_attention_params(std::size_t C, SplitMix64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  return {random_tensor<T>({C, C}, rng, -s, s), random_tensor<T>({C, C}, rng, -s, s),
          random_tensor<T>({C, C}, rng, -s, s), random_tensor<T>({C, C}, rng, -s, s)};
}

template <typename T>
BlockParams<T> random_block_params(std::size_t C, SplitMix64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  BlockParams<T> p;
  p.dw_weight = random_tensor<T>({3, 3, 3, C}, rng, -s, s);
  p.dw_bias = random_tensor<T>({C}, rng, -s, s);
  p.ln1_gamma = Tensor<T>::full({C}, T(1));
  p.ln1_beta = Tensor<T>::zeros({C});
  p.attn = random_attention_params<T>(C, rng);
  p.ln2_gamma = Tensor<T>::full({C}, T(1));
  p.ln2_beta = Tensor<T>::zeros({C});
  p.mlp = {random_tensor<T>({C, 2 * C}, rng, -s, s), Tensor<T>::zeros({2 * C}),
           random_tensor<T>({2 * C, C}, rng, -s, s), Tensor<T>::zeros({C})};
  return p;
}

// max |a - b|
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.values()[i]) -
                             static_cast<double>(b.values()[i])));
  return m;
}

// Routed attention on externally projected q/k/v, so it can be compared
// against the dense reference on identical inputs.
template <typename T>
Tensor<T> routed_from_projected(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                const Tensor<T>& w_out, const RoutingConfig& cfg) {
  auto [qr, geom] = partition_regions(q, cfg.region_size, cfg.padding_policy);
  auto [kr, g2] = partition_regions(k, cfg.region_size, cfg.padding_policy);
  auto [vr, g3] = partition_regions(v, cfg.region_size, cfg.padding_policy);
  (void)g2;
  (void)g3;
  Tensor<T> qp = region_descriptors(qr.detached(), geom);
  Tensor<T> kp = region_descriptors(kr.detached(), geom);
  RoutingIndex routing = coarse_route(qp, kp, geom, cfg);
  return fine_attention(qr, gather_tokens(kr, routing), gather_tokens(vr, routing), w_out,
                        routing, cfg);
}

}  // namespace

TEST_CASE("partition: 8x8x8 volume with 4x4x4 regions gives R=8, S=64") {
  SplitMix64 rng(60);
  Td f = random_tensor<double>({8, 8, 8, 2}, rng);
  auto [part, geom] = partition_regions(f, {4, 4, 4}, PaddingPolicy::Reject);
  REQUIRE(geom.region_count == 8);
  REQUIRE(geom.region_tokens == 64);
  REQUIRE(part.shape() == Shape{8, 64, 2});
}

TEST_CASE("partition: whole-volume region degenerates to R=1") {
  SplitMix64 rng(61);
  Td f = random_tensor<double>({4, 3, 2, 2}, rng);
  auto [part, geom] = partition_regions(f, {4, 3, 2}, PaddingPolicy::Reject);
  REQUIRE(geom.region_count == 1);
  REQUIRE(geom.region_tokens == 24);
  REQUIRE(part.shape() == Shape{1, 24, 2});
}

TEST_CASE("partition then unpartition restores the volume bit-for-bit") {
  SplitMix64 rng(62);
  for (Dims3 dims : {Dims3{4, 4, 4}, Dims3{5, 4, 3}}) {
    Td f = random_tensor<double>({dims[0], dims[1], dims[2], 3}, rng);
    auto [part, geom] = partition_regions(f, {2, 2, 2}, PaddingPolicy::ZeroPadMask);
    Td back = unpartition_regions(part, geom);
    REQUIRE(back.values() == f.values());
  }
}

TEST_CASE("partition rejects non-divisible extents and names the axis") {
  Td f = Td::zeros({6, 4, 4, 1});
  REQUIRE_THROWS_WITH((partition_regions(f, {4, 4, 4}, PaddingPolicy::Reject)),
                      Catch::Matchers::ContainsSubstring("axis H") &&
                          Catch::Matchers::ContainsSubstring("6"));
}

TEST_CASE("region descriptors are token means") {
  // region of identical tokens -> the token itself
  Td f(Shape{1, 2, 1, 2}, {3.0, -1.0, 3.0, -1.0});
  auto [part, geom] = partition_regions(f, {1, 2, 1}, PaddingPolicy::Reject);
  Td desc = region_descriptors(part, geom);
  REQUIRE(desc.values() == std::vector<double>{3.0, -1.0});

  // mean of [0,...] and [2,...] is [1,...]
  Td g(Shape{1, 2, 1, 1}, {0.0, 2.0});
  auto [part2, geom2] = partition_regions(g, {1, 2, 1}, PaddingPolicy::Reject);
  REQUIRE(region_descriptors(part2, geom2).values() == std::vector<double>{1.0});
}

TEST_CASE("region descriptors ignore token order") {
  SplitMix64 rng(63);
  std::vector<double> tokens = uniform_vector<double>(rng, 8, -1, 1);
  std::vector<double> reversed(tokens.rbegin(), tokens.rend());
  auto desc_of = [](std::vector<double> data) {
    Td f(Shape{1, 4, 1, 2}, std::move(data));
    auto [p, g] = partition_regions(f, {1, 4, 1}, PaddingPolicy::Reject);
    return region_descriptors(p, g).values();
  };
  auto a = desc_of(tokens);
  // reversing whole token vectors reverses channel pairs too; rebuild properly
  std::vector<double> perm;
  for (int t = 3; t >= 0; --t) {
    perm.push_back(tokens[2 * t]);
    perm.push_back(tokens[2 * t + 1]);
  }
  auto b = desc_of(perm);
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == Catch::Approx(b[i]));
  (void)reversed;
}

TEST_CASE("coarse_route with k = R selects every region") {
  SplitMix64 rng(64);
  Td f = random_tensor<double>({4, 2, 2, 4}, rng);
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.top_k = 2;  // R = 2
  auto [part, geom] = partition_regions(f, cfg.region_size, cfg.padding_policy);
  Td desc = region_descriptors(part, geom);
  RoutingIndex routing = coarse_route(desc, desc, geom, cfg);
  for (std::size_t r = 0; r < geom.region_count; ++r) {
    REQUIRE(routing.row(r)[0] == 0);
    REQUIRE(routing.row(r)[1] == 1);
  }
}

TEST_CASE("coarse_route reproduces hand-set affinities") {
  // logits ln(p) give softmax exactly p when p sums to 1
  RegionGeometry geom = make_region_geometry({3, 1, 1}, {1, 1, 1}, PaddingPolicy::Reject);
  Td qp(Shape{3, 1}, {1.0, 0.0, 0.0});
  Td kp(Shape{3, 1}, {std::log(0.5), std::log(0.3), std::log(0.2)});

  Td aff = coarse_affinity(qp, kp, 1);
  REQUIRE(aff.values()[0] == Catch::Approx(0.5));
  REQUIRE(aff.values()[1] == Catch::Approx(0.3));
  REQUIRE(aff.values()[2] == Catch::Approx(0.2));

  RoutingConfig cfg;
  cfg.region_size = {1, 1, 1};
  cfg.channels = 1;
  cfg.heads = 1;
  cfg.top_k = 2;
  RoutingIndex routing = coarse_route(qp, kp, geom, cfg);
  REQUIRE(routing.row(0)[0] == 0);
  REQUIRE(routing.row(0)[1] == 1);
}

TEST_CASE("orthogonal descriptors give a uniform row and the tie rule picks region 0") {
  RegionGeometry geom = make_region_geometry({3, 1, 1}, {1, 1, 1}, PaddingPolicy::Reject);
  Td qp(Shape{3, 2}, {1.0, 0.0, 2.0, 0.0, 3.0, 0.0});
  Td kp(Shape{3, 2}, {0.0, 1.0, 0.0, 2.0, 0.0, 3.0});
  Td aff = coarse_affinity(qp, kp, 2);
  for (double v : aff.values()) REQUIRE(v == Catch::Approx(1.0 / 3.0));
  RoutingConfig cfg;
  cfg.region_size = {1, 1, 1};
  cfg.channels = 2;
  cfg.heads = 1;
  cfg.top_k = 1;
  RoutingIndex routing = coarse_route(qp, kp, geom, cfg);
  for (std::size_t r = 0; r < 3; ++r) REQUIRE(routing.row(r)[0] == 0);
}

TEST_CASE("routing is deterministic") {
  SplitMix64 rng(65);
  Td f = random_tensor<double>({4, 4, 4, 4}, rng);
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.top_k = 3;
  auto route_once = [&] {
    auto [p, g] = partition_regions(f, cfg.region_size, cfg.padding_policy);
    Td d = region_descriptors(p, g);
    return coarse_route(d, d, g, cfg).selected;
  };
  REQUIRE(route_once() == route_once());
}

TEST_CASE("gather_tokens with k = R is a permutation of all tokens") {
  SplitMix64 rng(66);
  Td f = random_tensor<double>({2, 2, 2, 2}, rng);
  RoutingConfig cfg;
  cfg.region_size = {1, 2, 2};
  cfg.channels = 2;
  cfg.heads = 1;
  cfg.top_k = 2;
  auto [part, geom] = partition_regions(f, cfg.region_size, cfg.padding_policy);
  Td desc = region_descriptors(part, geom);
  RoutingIndex routing = coarse_route(desc, desc, geom, cfg);
  Td gathered = gather_tokens(part, routing);
  REQUIRE(gathered.shape() == Shape{2, 8, 2});
  // each query region sees every token exactly once
  std::vector<double> sorted_all(f.values());
  std::sort(sorted_all.begin(), sorted_all.end());
  for (std::size_t r = 0; r < 2; ++r) {
    std::vector<double> got(gathered.values().begin() + r * 16,
                            gathered.values().begin() + (r + 1) * 16);
    std::sort(got.begin(), got.end());
    REQUIRE(got == sorted_all);
  }
}

TEST_CASE("gather_tokens with k = 1 to the own region is local attention input") {
  SplitMix64 rng(67);
  Td f = random_tensor<double>({2, 2, 1, 2}, rng);
  auto [part, geom] = partition_regions(f, {1, 2, 1}, PaddingPolicy::Reject);
  RoutingIndex routing;
  routing.geom = geom;
  routing.top_k = 1;
  routing.selected = {0, 1};  // each region routes to itself
  Td gathered = gather_tokens(part, routing);
  REQUIRE(gathered.values() == part.values());
}

TEST_CASE("gather_tokens rejects out-of-range region ids") {
  Td part(Shape{2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  RoutingIndex routing;
  routing.geom = make_region_geometry({2, 2, 1}, {1, 2, 1}, PaddingPolicy::Reject);
  routing.top_k = 1;
  routing.selected = {0, 5};
  REQUIRE_THROWS_AS(gather_tokens(part, routing), ShapeError);
}

TEST_CASE("gradient of sum(gathered) hits gathered positions once") {
  SplitMix64 rng(68);
  Tape<double> tape;
  Td f = tape.watch(random_tensor<double>({2, 2, 1, 1}, rng));
  auto [part, geom] = partition_regions(f, {1, 2, 1}, PaddingPolicy::Reject);
  RoutingIndex routing;
  routing.geom = geom;
  routing.top_k = 1;
  routing.selected = {0, 1};
  Td gathered = gather_tokens(part, routing);
  tape.backward(reduce_sum(gathered));
  auto g = tape.grad(f);
  REQUIRE(g == std::vector<double>(4, 1.0));
}

TEST_CASE("fine_attention on a single token is the projected value") {
  Td q(Shape{1, 1, 1, 2}, {0.7, -0.4});
  Td k = q, v(Shape{1, 1, 1, 2}, {2.0, 3.0});
  SplitMix64 rng(69);
  Td w_out = random_tensor<double>({2, 2}, rng);
  RoutingConfig cfg;
  cfg.region_size = {1, 1, 1};
  cfg.channels = 2;
  cfg.heads = 1;
  cfg.top_k = 1;
  Td out = routed_from_projected(q, k, v, w_out, cfg);
  // softmax over a single key is 1, so out = v * w_out
  Td want = matmul(reshape(v, {1, 2}), w_out);
  REQUIRE(max_abs_diff(reshape(out, {1, 2}), want) < 1e-12);
}

TEST_CASE("identical value tokens make the output independent of the logits") {
  SplitMix64 rng(70);
  Td q = random_tensor<double>({2, 1, 1, 2}, rng);
  Td k = random_tensor<double>({2, 1, 1, 2}, rng);
  std::vector<double> vv{1.5, -2.5, 1.5, -2.5};  // same value vector at both tokens
  Td v(Shape{2, 1, 1, 2}, vv);
  Td w_out(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  RoutingConfig cfg;
  cfg.region_size = {2, 1, 1};
  cfg.channels = 2;
  cfg.heads = 1;
  cfg.top_k = 1;
  Td out = routed_from_projected(q, k, v, w_out, cfg);
  for (std::size_t t = 0; t < 2; ++t) {
    REQUIRE(out.values()[t * 2 + 0] == Catch::Approx(1.5));
    REQUIRE(out.values()[t * 2 + 1] == Catch::Approx(-2.5));
  }
}

TEST_CASE("oracle equivalence A: whole-volume region, k = 1") {
  SplitMix64 rng(71);
  RoutingConfig cfg;
  cfg.region_size = {4, 4, 4};
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.top_k = 1;

  Td q = random_tensor<double>({4, 4, 4, 8}, rng);
  Td k = random_tensor<double>({4, 4, 4, 8}, rng);
  Td v = random_tensor<double>({4, 4, 4, 8}, rng);
  Td w_out = random_tensor<double>({8, 8}, rng);
  Td routed = routed_from_projected(q, k, v, w_out, cfg);
  Td dense = dense_attention_reference(reshape(q, {64, 8}), reshape(k, {64, 8}),
                                       reshape(v, {64, 8}), w_out, cfg.heads);
  REQUIRE(max_abs_diff(reshape(routed, {64, 8}), dense) < 1e-10);

  SplitMix64 rngf(71);
  Tf qf = random_tensor<float>({4, 4, 4, 8}, rngf);
  Tf kf = random_tensor<float>({4, 4, 4, 8}, rngf);
  Tf vf = random_tensor<float>({4, 4, 4, 8}, rngf);
  Tf wf = random_tensor<float>({8, 8}, rngf);
  Tf routedf = routed_from_projected(qf, kf, vf, wf, cfg);
  Tf densef = dense_attention_reference(reshape(qf, {64, 8}), reshape(kf, {64, 8}),
                                        reshape(vf, {64, 8}), wf, cfg.heads);
  REQUIRE(max_abs_diff(reshape(routedf, {64, 8}), densef) < 1e-5);
}

TEST_CASE("oracle equivalence B: unit regions, k = R") {
  SplitMix64 rng(72);
  RoutingConfig cfg;
  cfg.region_size = {1, 1, 1};
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.top_k = 64;

  Td q = random_tensor<double>({4, 4, 4, 8}, rng);
  Td k = random_tensor<double>({4, 4, 4, 8}, rng);
  Td v = random_tensor<double>({4, 4, 4, 8}, rng);
  Td w_out = random_tensor<double>({8, 8}, rng);
  Td routed = routed_from_projected(q, k, v, w_out, cfg);
  Td dense = dense_attention_reference(reshape(q, {64, 8}), reshape(k, {64, 8}),
                                       reshape(v, {64, 8}), w_out, cfg.heads);
  REQUIRE(max_abs_diff(reshape(routed, {64, 8}), dense) < 1e-10);
}

TEST_CASE("zero-pad masking with k = R matches dense attention on the valid tokens") {
  SplitMix64 rng(73);
  RoutingConfig cfg;
  cfg.region_size = {4, 4, 4};
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.top_k = 2;  // padded 8x4x4 -> R = 2
  cfg.padding_policy = PaddingPolicy::ZeroPadMask;

  Td q = random_tensor<double>({5, 4, 4, 4}, rng);
  Td k = random_tensor<double>({5, 4, 4, 4}, rng);
  Td v = random_tensor<double>({5, 4, 4, 4}, rng);
  Td w_out = random_tensor<double>({4, 4}, rng);
  Td routed = routed_from_projected(q, k, v, w_out, cfg);
  Td dense = dense_attention_reference(reshape(q, {80, 4}), reshape(k, {80, 4}),
                                       reshape(v, {80, 4}), w_out, cfg.heads);
  REQUIRE(max_abs_diff(reshape(routed, {80, 4}), dense) < 1e-10);
}

TEST_CASE("row-stochastic attention weights in the dense reference") {
  SplitMix64 rng(74);
  Td q = random_tensor<double>({6, 4}, rng);
  Td logits = matmul(mul(q, 0.5), transpose(random_tensor<double>({6, 4}, rng)));
  Td attn = softmax(logits, 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += attn.values()[r * 6 + c];
    REQUIRE(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("key-token accesses per query are exactly k*S") {
  SplitMix64 rng(75);
  Td f = random_tensor<double>({4, 4, 4, 4}, rng);
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.top_k = 3;
  auto [part, geom] = partition_regions(f, cfg.region_size, cfg.padding_policy);
  Td desc = region_descriptors(part, geom);
  RoutingIndex routing = coarse_route(desc, desc, geom, cfg);
  Td gathered = gather_tokens(part, routing);
  const std::size_t accesses_per_query = gathered.shape()[1];
  REQUIRE(accesses_per_query == cfg.top_k * geom.region_tokens);
  REQUIRE(accesses_per_query < 64);  // strictly sparser than dense T = 64
}

TEST_CASE("routing_block with zero weights is the identity") {
  SplitMix64 rng(76);
  const std::size_t C = 4;
  Td x = random_tensor<double>({4, 4, 2, C}, rng);
  BlockParams<double> p;
  p.dw_weight = Td::zeros({3, 3, 3, C});
  p.dw_bias = Td::zeros({C});
  p.ln1_gamma = Td::full({C}, 1.0);
  p.ln1_beta = Td::zeros({C});
  p.attn = {Td::zeros({C, C}), Td::zeros({C, C}), Td::zeros({C, C}), Td::zeros({C, C})};
  p.ln2_gamma = Td::full({C}, 1.0);
  p.ln2_beta = Td::zeros({C});
  p.mlp = {Td::zeros({C, 2 * C}), Td::zeros({2 * C}), Td::zeros({2 * C, C}), Td::zeros({C})};
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = C;
  cfg.heads = 2;
  cfg.top_k = 2;
  Td y = routing_block(x, p, cfg);
  REQUIRE(max_abs_diff(y, x) < 1e-12);
}

TEST_CASE("routing_block preserves the input shape") {
  SplitMix64 rng(77);
  Td x = random_tensor<double>({4, 2, 2, 4}, rng);
  BlockParams<double> p = random_block_params<double>(4, rng);
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.top_k = 2;
  REQUIRE(routing_block(x, p, cfg).shape() == x.shape());
}

TEST_CASE("routing_block end-to-end gradient matches finite differences") {
  SplitMix64 rng(78);
  const std::size_t C = 4;
  Td x = random_tensor<double>({4, 4, 4, C}, rng);
  BlockParams<double> p = random_block_params<double>(C, rng);
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = C;
  cfg.heads = 2;
  cfg.top_k = 4;

  auto fn = [&](const std::vector<Td>& in) {
    BlockParams<double> q;
    q.dw_weight = in[1];
    q.dw_bias = in[2];
    q.ln1_gamma = in[3];
    q.ln1_beta = in[4];
    q.attn = {in[5], in[6], in[7], in[8]};
    q.ln2_gamma = in[9];
    q.ln2_beta = in[10];
    q.mlp = {in[11], in[12], in[13], in[14]};
    Td y = routing_block(in[0], q, cfg);
    return reduce_sum(mul(y, y));
  };
  std::vector<Td> inputs{x,
                         p.dw_weight,
                         p.dw_bias,
                         p.ln1_gamma,
                         p.ln1_beta,
                         p.attn.w_q,
                         p.attn.w_k,
                         p.attn.w_v,
                         p.attn.w_out,
                         p.ln2_gamma,
                         p.ln2_beta,
                         p.mlp.w1,
                         p.mlp.b1,
                         p.mlp.w2,
                         p.mlp.b2};
  auto res = grad_check<double>(fn, inputs, 1e-6);
  REQUIRE(res.max_rel_error < 1e-4);
}

TEST_CASE("every block parameter receives gradient on random input") {
  SplitMix64 rng(79);
  const std::size_t C = 4;
  Tape<double> tape;
  Td x = random_tensor<double>({4, 4, 2, C}, rng);
  BlockParams<double> raw = random_block_params<double>(C, rng);
  // shift LN affine away from the fixed point so both get signal
  raw.ln1_beta = random_tensor<double>({C}, rng, 0.1, 0.5);
  raw.ln2_beta = random_tensor<double>({C}, rng, 0.1, 0.5);
  BlockParams<double> p;
  p.dw_weight = tape.watch(raw.dw_weight);
  p.dw_bias = tape.watch(raw.dw_bias);
  p.ln1_gamma = tape.watch(raw.ln1_gamma);
  p.ln1_beta = tape.watch(raw.ln1_beta);
  p.attn = {tape.watch(raw.attn.w_q), tape.watch(raw.attn.w_k), tape.watch(raw.attn.w_v),
            tape.watch(raw.attn.w_out)};
  p.ln2_gamma = tape.watch(raw.ln2_gamma);
  p.ln2_beta = tape.watch(raw.ln2_beta);
  p.mlp = {tape.watch(raw.mlp.w1), tape.watch(raw.mlp.b1), tape.watch(raw.mlp.w2),
           tape.watch(raw.mlp.b2)};
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = C;
  cfg.heads = 2;
  cfg.top_k = 2;
  Td y = routing_block(x, p, cfg);
  tape.backward(reduce_sum(mul(y, y)));
  auto norm = [&](const Td& t) {
    double s = 0;
    for (double g : tape.grad(t)) s += g * g;
    return std::sqrt(s);
  };
  for (const Td* t : {&p.dw_weight, &p.dw_bias, &p.ln1_gamma, &p.ln1_beta, &p.attn.w_q,
                      &p.attn.w_k, &p.attn.w_v, &p.attn.w_out, &p.ln2_gamma, &p.ln2_beta,
                      &p.mlp.w1, &p.mlp.b1, &p.mlp.w2, &p.mlp.b2})
    REQUIRE(norm(*t) > 0.0);
}

TEST_CASE("force_self_region keeps the own region in the selection") {
  SplitMix64 rng(80);
  Td f = random_tensor<double>({4, 4, 4, 4}, rng);
  RoutingConfig cfg;
  cfg.region_size = {2, 2, 2};
  cfg.channels = 4;
  cfg.heads = 2;
  cfg.top_k = 1;
  cfg.force_self_region = true;
  auto [part, geom] = partition_regions(f, cfg.region_size, cfg.padding_policy);
  Td desc = region_descriptors(part, geom);
  RoutingIndex routing = coarse_route(desc, desc, geom, cfg);
  for (std::size_t r = 0; r < geom.region_count; ++r) REQUIRE(routing.row(r)[0] == r);
}
