#pragma once

// Sparse-vs-dense attention accounting.
//
// Analytic multiply-accumulate counts (T = H*W*D tokens, R regions of S
// tokens, k selected regions, d_k = C/heads):
//   dense  = heads * 2*T^2*d_k  (scores + weighted values) + T^2*C aggregate
//   routed = R^2*C (coarse affinity) + heads * 2*T*(k*S)*d_k (fine stage)
//            + R*k*S*C (token gather traffic)
// The score-term ratio routed/dense is exactly k*S/T.
//
// Wall times run the same projected q/k/v through the dense reference and
// the routed pipeline (no tape), median over repeats.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "volmark/rng.hpp"
#include "volmark/routing_attention.hpp"

namespace volmark {

struct BenchPoint {
  Dims3 dims{};
  Dims3 region{};
  std::size_t top_k = 0;
  std::size_t heads = 0;
  std::size_t channels = 0;
};

struct BenchRecord {
  BenchPoint point;
  std::size_t tokens = 0;        // T
  std::size_t regions = 0;       // R
  std::size_t region_tokens = 0; // S
  // analytic multiply-accumulate counts
  double dense_mac = 0;
  double routed_mac = 0;
  double dense_score_mac = 0;
  double routed_score_mac = 0;
  // measured medians (seconds); negative when timing was skipped
  double dense_seconds = -1;
  double routed_seconds = -1;

  double score_ratio() const { return routed_score_mac / dense_score_mac; }
  double mac_ratio() const { return routed_mac / dense_mac; }
};

inline BenchRecord analytic_counts(const BenchPoint& p) {
  BenchRecord r;
  r.point = p;
  const double T = static_cast<double>(p.dims[0] * p.dims[1] * p.dims[2]);
  const double S = static_cast<double>(p.region[0] * p.region[1] * p.region[2]);
  const double R = T / S;
  const double C = static_cast<double>(p.channels);
  const double dk = C / static_cast<double>(p.heads);
  const double h = static_cast<double>(p.heads);
  const double kS = static_cast<double>(p.top_k) * S;

  r.tokens = static_cast<std::size_t>(T);
  r.regions = static_cast<std::size_t>(R);
  r.region_tokens = static_cast<std::size_t>(S);
  r.dense_score_mac = h * T * T * dk;
  r.routed_score_mac = h * T * kS * dk;
  r.dense_mac = h * 2.0 * T * T * dk + T * T * C;
  r.routed_mac = R * R * C + h * 2.0 * T * kS * dk + R * kS * C;
  return r;
}

template <typename T>
struct BenchTimings {
  double dense_median = 0;
  double routed_median = 0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace detail

// Times the two attention paths on identical random projected tensors.
template <typename T>
BenchTimings<T> measure_point(const BenchPoint& p, std::size_t repeats, std::uint64_t seed) {
  detail::require(repeats >= 1, "bench: repeats must be >= 1");
  RoutingConfig cfg;
  cfg.region_size = p.region;
  cfg.top_k = p.top_k;
  cfg.heads = p.heads;
  cfg.channels = p.channels;

  SplitMix64 rng(seed);
  const Shape vol_shape{p.dims[0], p.dims[1], p.dims[2], p.channels};
  const std::size_t tokens = p.dims[0] * p.dims[1] * p.dims[2];
  Tensor<T> q(vol_shape, uniform_vector<T>(rng, numel(vol_shape), -1, 1));
  Tensor<T> k(vol_shape, uniform_vector<T>(rng, numel(vol_shape), -1, 1));
  Tensor<T> v(vol_shape, uniform_vector<T>(rng, numel(vol_shape), -1, 1));
  Tensor<T> w_out(Shape{p.channels, p.channels},
                  uniform_vector<T>(rng, p.channels * p.channels, -0.5, 0.5));

  std::vector<double> dense_times, routed_times;
  volatile T sink = T(0);
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    Tensor<T> dense =
        dense_attention_reference(reshape(q, {tokens, p.channels}),
                                  reshape(k, {tokens, p.channels}),
                                  reshape(v, {tokens, p.channels}), w_out, p.heads);
    auto t1 = std::chrono::steady_clock::now();
    sink = sink + dense.values()[0];
    dense_times.push_back(std::chrono::duration<double>(t1 - t0).count());

    auto t2 = std::chrono::steady_clock::now();
    auto [qr, geom] = partition_regions(q, cfg.region_size, cfg.padding_policy);
    auto [kr, g2] = partition_regions(k, cfg.region_size, cfg.padding_policy);
    auto [vr, g3] = partition_regions(v, cfg.region_size, cfg.padding_policy);
    (void)g2;
    (void)g3;
    Tensor<T> qp = region_descriptors(qr, geom);
    Tensor<T> kp = region_descriptors(kr, geom);
    RoutingIndex routing = coarse_route(qp, kp, geom, cfg);
    Tensor<T> out = fine_attention(qr, gather_tokens(kr, routing), gather_tokens(vr, routing),
                                   w_out, routing, cfg);
    auto t3 = std::chrono::steady_clock::now();
    sink = sink + out.values()[0];
    routed_times.push_back(std::chrono::duration<double>(t3 - t2).count());
  }
  (void)sink;
  return {detail::median_of(dense_times), detail::median_of(routed_times)};
}

template <typename T = float>
std::vector<BenchRecord> run_benchmark(const std::vector<BenchPoint>& points,
                                       std::size_t repeats, std::uint64_t seed,
                                       bool measure = true) {
  std::vector<BenchRecord> out;
  for (const BenchPoint& p : points) {
    BenchRecord r = analytic_counts(p);
    if (measure) {
      auto t = measure_point<T>(p, repeats, seed);
      r.dense_seconds = t.dense_median;
      r.routed_seconds = t.routed_median;
    }
    out.push_back(r);
  }
  return out;
}

inline std::string bench_table(const std::vector<BenchRecord>& records) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %-9s %3s %2s %12s %12s %8s %8s %10s %10s\n", "dims",
                "region", "k", "h", "dense_mac", "routed_mac", "mac_rat", "scor_rat",
                "dense_ms", "routed_ms");
  os << buf;
  for (const auto& r : records) {
    char dims[32], region[32];
    std::snprintf(dims, sizeof dims, "%zux%zux%zu", r.point.dims[0], r.point.dims[1],
                  r.point.dims[2]);
    std::snprintf(region, sizeof region, "%zux%zux%zu", r.point.region[0], r.point.region[1],
                  r.point.region[2]);
    std::snprintf(buf, sizeof buf, "%-12s %-9s %3zu %2zu %12.4g %12.4g %8.4f %8.4f %10.3f %10.3f\n",
                  dims, region, r.point.top_k, r.point.heads, r.dense_mac, r.routed_mac,
                  r.mac_ratio(), r.score_ratio(), r.dense_seconds * 1e3,
                  r.routed_seconds * 1e3);
    os << buf;
  }
  return os.str();
}

// Machine-readable record file, one point per line.
inline std::string bench_records(const std::vector<BenchRecord>& records,
                                 bool include_timings = true) {
  std::ostringstream os;
  os << "bench v1\n";
  for (const auto& r : records) {
    os << "point dims " << r.point.dims[0] << " " << r.point.dims[1] << " " << r.point.dims[2]
       << " region " << r.point.region[0] << " " << r.point.region[1] << " "
       << r.point.region[2] << " k " << r.point.top_k << " heads " << r.point.heads
       << " channels " << r.point.channels;
    char buf[160];
    std::snprintf(buf, sizeof buf, " dense_mac %.17g routed_mac %.17g score_ratio %.17g",
                  r.dense_mac, r.routed_mac, r.score_ratio());
    os << buf;
    if (include_timings && r.dense_seconds >= 0) {
      std::snprintf(buf, sizeof buf, " dense_s %.6f routed_s %.6f", r.dense_seconds,
                    r.routed_seconds);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace volmark
