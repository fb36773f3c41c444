#pragma once

// Encoder-decoder assembly for the two detector variants.
//
// Encoder: a 3x3x3 stem convolution at full resolution, then per stage a
// stride-2 convolution (halving every spatial extent) followed by a routing
// attention block. Decoder: repeated fusion steps, each upsampling the
// coarse feature x2, concatenating the matching encoder skip, and applying
// a 3x3x3 convolution + relu.
//
//   anchor-free:  decode all the way back to full resolution (one extra
//                 fusion against the stem feature), 1x1x1 head + sigmoid
//                 -> [H,W,D,L] heatmaps.
//   anchor-based: decode to 1/4 resolution, two 1x1x1 heads: linear offsets
//                 [H/4,W/4,D/4,3*L*n_a] and sigmoid probabilities
//                 [H/4,W/4,D/4,L*n_a].
//
// Parameters initialize from a single seeded generator in a fixed layout
// order (uniform +/- 1/sqrt(fan_in) for weights, zero biases, gamma 1,
// beta 0), so identical seeds give bit-identical models.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "volmark/anchors.hpp"
#include "volmark/dataio.hpp"
#include "volmark/losses.hpp"
#include "volmark/nn.hpp"
#include "volmark/routing_attention.hpp"

namespace volmark {

struct ModelConfig {
  std::size_t stages = 4;
  std::vector<std::size_t> channels{8, 16, 32, 64};  // width of stage i (1-based)
  std::size_t heads = 2;
  Dims3 region_size{4, 4, 4};
  std::size_t top_k = 4;
  Variant variant = Variant::AnchorFree;
  std::size_t landmark_count = 2;
  Dims3 input_dims{32, 32, 16};
  double heatmap_sigma = 2.0;
  double mlp_ratio = 2.0;
  std::vector<double> anchor_radii{2.0, 4.0, 6.0};
  bool aux_heatmap_head = false;
  bool force_self_region = false;

  static constexpr std::size_t anchor_unit = 4;  // heads live at 1/4 resolution

  void validate() const {
    detail::require(stages >= 1, "model config: at least one stage required");
    detail::require(channels.size() == stages,
                    "model config: need one channel width per stage (" +
                        std::to_string(stages) + " stages, " +
                        std::to_string(channels.size()) + " widths)");
    for (std::size_t i = 1; i < channels.size(); ++i)
      detail::require(channels[i] >= channels[i - 1],
                      "model config: channel widths must be nondecreasing");
    for (std::size_t c : channels)
      detail::require(c >= 1 && c % heads == 0,
                      "model config: heads (" + std::to_string(heads) +
                          ") must divide every stage width");
    const std::size_t div = std::size_t{1} << stages;
    for (int ax = 0; ax < 3; ++ax)
      detail::require(input_dims[ax] % div == 0,
                      "model config: input extent " + std::to_string(input_dims[ax]) +
                          " not divisible by 2^stages = " + std::to_string(div));
    detail::require(landmark_count >= 1, "model config: landmark_count must be >= 1");
    detail::require(heatmap_sigma > 0 && mlp_ratio > 0, "model config: bad sigma/ratio");
    if (variant == Variant::AnchorBased) {
      detail::require(stages >= 2, "model config: anchor-based needs >= 2 stages");
      detail::require(!anchor_radii.empty(), "model config: anchor radii required");
    }
  }

  std::size_t stage_width(std::size_t i) const {  // i = 0 (stem) .. stages
    return i == 0 ? channels[0] : channels[i - 1];
  }

  Dims3 stage_dims(std::size_t i) const {
    return {input_dims[0] >> i, input_dims[1] >> i, input_dims[2] >> i};
  }

  // Region extents clamp to the stage extent (whole axis when it no longer
  // divides); top_k clamps to the region count.
  RoutingConfig stage_routing(std::size_t i) const {
    RoutingConfig rc;
    const Dims3 dims = stage_dims(i);
    std::size_t regions = 1;
    for (int ax = 0; ax < 3; ++ax) {
      std::size_t r = std::min(region_size[ax], dims[ax]);
      if (dims[ax] % r != 0) r = dims[ax];
      rc.region_size[ax] = r;
      regions *= dims[ax] / r;
    }
    rc.top_k = std::min(top_k, regions);
    rc.heads = heads;
    rc.channels = stage_width(i);
    rc.padding_policy = PaddingPolicy::Reject;
    rc.force_self_region = force_self_region;
    return rc;
  }

  std::size_t anchors_per_site() const { return anchor_radii.size(); }

  AnchorGrid anchor_grid() const {
    const Dims3 lat = stage_dims(2);
    return build_grid({lat[0], lat[1], lat[2]}, static_cast<double>(anchor_unit),
                      anchor_radii);
  }

  // fusion steps walked by the decoder
  std::size_t fusion_count() const {
    return variant == Variant::AnchorFree ? stages : stages - 2;
  }
};

struct ParamInfo {
  std::string name;
  Shape shape;
  enum class Init { FanInUniform, Zero, One, NegativePrior } init;
  std::size_t fan_in = 0;
};

// Sigmoid heads over sparse targets start with a negative bias so the
// initial output sits near the (mostly zero) target instead of at 0.5,
// which would slam the first clipped steps deep into saturation.
inline constexpr double kHeadBiasPrior = -1.5;

// The canonical parameter layout; initialization, checkpoints, and the
// update loop all follow this order.
inline std::vector<ParamInfo> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamInfo> out;
  auto conv = [&](const std::string& name, std::size_t k, std::size_t cin, std::size_t cout,
                  ParamInfo::Init bias_init = ParamInfo::Init::Zero) {
    out.push_back({name + ".w", Shape{k, k, k, cin, cout}, ParamInfo::Init::FanInUniform,
                   k * k * k * cin});
    out.push_back({name + ".b", Shape{cout}, bias_init, 0});
  };
  auto dense = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    out.push_back({name + ".w", Shape{cin, cout}, ParamInfo::Init::FanInUniform, cin});
    out.push_back({name + ".b", Shape{cout}, ParamInfo::Init::Zero, 0});
  };
  auto norm = [&](const std::string& name, std::size_t c) {
    out.push_back({name + ".g", Shape{c}, ParamInfo::Init::One, 0});
    out.push_back({name + ".b", Shape{c}, ParamInfo::Init::Zero, 0});
  };
  auto block = [&](const std::string& name, std::size_t c, double ratio) {
    const auto hidden = static_cast<std::size_t>(ratio * static_cast<double>(c));
    out.push_back({name + ".dw.w", Shape{3, 3, 3, c}, ParamInfo::Init::FanInUniform, 27});
    out.push_back({name + ".dw.b", Shape{c}, ParamInfo::Init::Zero, 0});
    norm(name + ".ln1", c);
    out.push_back({name + ".wq", Shape{c, c}, ParamInfo::Init::FanInUniform, c});
    out.push_back({name + ".wk", Shape{c, c}, ParamInfo::Init::FanInUniform, c});
    out.push_back({name + ".wv", Shape{c, c}, ParamInfo::Init::FanInUniform, c});
    out.push_back({name + ".wo", Shape{c, c}, ParamInfo::Init::FanInUniform, c});
    norm(name + ".ln2", c);
    dense(name + ".mlp1", c, hidden);
    dense(name + ".mlp2", hidden, c);
  };

  conv("stem", 3, 1, cfg.stage_width(0));
  for (std::size_t i = 1; i <= cfg.stages; ++i) {
    const std::string enc = "enc" + std::to_string(i);
    conv(enc + ".down", 3, cfg.stage_width(i - 1), cfg.stage_width(i));
    block(enc + ".block", cfg.stage_width(i), cfg.mlp_ratio);
  }
  for (std::size_t j = 1; j <= cfg.fusion_count(); ++j) {
    const std::size_t skip_stage = cfg.stages - j;
    const std::size_t cin = cfg.stage_width(skip_stage + 1) + cfg.stage_width(skip_stage);
    conv("dec" + std::to_string(j) + ".fuse", 3, cin, cfg.stage_width(skip_stage));
  }
  const std::size_t head_in = cfg.stage_width(cfg.stages - cfg.fusion_count());
  const std::size_t L = cfg.landmark_count;
  if (cfg.variant == Variant::AnchorFree) {
    conv("head.hm", 1, head_in, L, ParamInfo::Init::NegativePrior);
  } else {
    conv("head.off", 1, head_in, 3 * L * cfg.anchors_per_site());
    conv("head.prob", 1, head_in, L * cfg.anchors_per_site(), ParamInfo::Init::NegativePrior);
    if (cfg.aux_heatmap_head) conv("head.auxhm", 1, head_in, L, ParamInfo::Init::NegativePrior);
  }
  return out;
}

template <typename T>
struct ModelState {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::unordered_map<std::string, std::size_t> index;

  const Tensor<T>& at(const std::string& name) const {
    auto it = index.find(name);
    detail::require(it != index.end(), "model: unknown parameter '" + name + "'");
    return params[it->second].second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = index.find(name);
    detail::require(it != index.end(), "model: unknown parameter '" + name + "'");
    return params[it->second].second;
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }

  // Same parameters bound to a tape as differentiable leaves.
  ModelState bound_to(Tape<T>& tape) const {
    ModelState out = *this;
    for (auto& [name, t] : out.params) t = tape.watch(t);
    return out;
  }
};

template <typename T>
ModelState<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState<T> state;
  state.config = cfg;
  state.seed = seed;
  SplitMix64 rng(derive_seed(seed, 0x6d6f64656cull));
  for (const ParamInfo& info : parameter_layout(cfg)) {
    std::vector<T> data(numel(info.shape));
    switch (info.init) {
      case ParamInfo::Init::FanInUniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(info.fan_in));
        for (auto& v : data) v = static_cast<T>(rng.next_range(-bound, bound));
        break;
      }
      case ParamInfo::Init::Zero:
        break;
      case ParamInfo::Init::One:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case ParamInfo::Init::NegativePrior:
        std::fill(data.begin(), data.end(), static_cast<T>(kHeadBiasPrior));
        break;
    }
    state.index[info.name] = state.params.size();
    state.params.emplace_back(info.name, Tensor<T>(info.shape, std::move(data)));
  }
  return state;
}

namespace detail {

template <typename T>
BlockParams<T> block_params(const ModelState<T>& m, const std::string& name) {
  BlockParams<T> p;
  p.dw_weight = m.at(name + ".dw.w");
  p.dw_bias = m.at(name + ".dw.b");
  p.ln1_gamma = m.at(name + ".ln1.g");
  p.ln1_beta = m.at(name + ".ln1.b");
  p.attn = {m.at(name + ".wq"), m.at(name + ".wk"), m.at(name + ".wv"), m.at(name + ".wo")};
  p.ln2_gamma = m.at(name + ".ln2.g");
  p.ln2_beta = m.at(name + ".ln2.b");
  p.mlp = {m.at(name + ".mlp1.w"), m.at(name + ".mlp1.b"), m.at(name + ".mlp2.w"),
           m.at(name + ".mlp2.b")};
  return p;
}

}  // namespace detail

// Upsample x2, concatenate the encoder skip, 3x3x3 conv + relu.
template <typename T>
Tensor<T> fuse(const Tensor<T>& u_prev, const Tensor<T>& e_skip, const Tensor<T>& conv_w,
               const Tensor<T>& conv_b, const std::string& stage = "") {
  Tensor<T> up = trilinear_upsample(u_prev, {2, 2, 2});
  const Shape& us = up.shape();
  const Shape& es = e_skip.shape();
  detail::require(us[0] == es[0] && us[1] == es[1] && us[2] == es[2],
                  "fuse" + (stage.empty() ? "" : " (" + stage + ")") +
                      ": upsampled feature " + shape_str(us) + " does not match skip " +
                      shape_str(es));
  Tensor<T> cat = concat(std::vector<Tensor<T>>{up, e_skip}, 3);
  return relu(conv3d(cat, conv_w, conv_b, {1, 1, 1}, {1, 1, 1}));
}

namespace detail {

// Shared trunk: stem + encoder stages, then `fusions` decoder steps.
template <typename T>
Tensor<T> run_trunk(const ModelState<T>& m, const Tensor<T>& input, std::size_t fusions) {
  const ModelConfig& cfg = m.config;
  const Shape& s = input.shape();
  detail::require(s.size() == 3, "forward: input must be a [H,W,D] volume, got " +
                                     shape_str(s));
  detail::require(s[0] == cfg.input_dims[0] && s[1] == cfg.input_dims[1] &&
                      s[2] == cfg.input_dims[2],
                  "forward: input " + shape_str(s) + " does not match the configured dims");

  std::vector<Tensor<T>> enc;  // enc[i] = E_i
  Tensor<T> x = conv3d(reshape(input, {s[0], s[1], s[2], 1}), m.at("stem.w"), m.at("stem.b"),
                       {1, 1, 1}, {1, 1, 1});
  enc.push_back(x);
  for (std::size_t i = 1; i <= cfg.stages; ++i) {
    const std::string name = "enc" + std::to_string(i);
    x = conv3d(x, m.at(name + ".down.w"), m.at(name + ".down.b"), {2, 2, 2}, {1, 1, 1});
    x = routing_block(x, block_params(m, name + ".block"), cfg.stage_routing(i));
    enc.push_back(x);
  }
  Tensor<T> u = enc[cfg.stages];
  for (std::size_t j = 1; j <= fusions; ++j) {
    const std::string name = "dec" + std::to_string(j) + ".fuse";
    u = fuse(u, enc[cfg.stages - j], m.at(name + ".w"), m.at(name + ".b"),
             "decoder stage " + std::to_string(j));
  }
  return u;
}

}  // namespace detail

// [H,W,D] -> sigmoid heatmaps [H,W,D,L]
template <typename T>
Tensor<T> forward_anchor_free(const ModelState<T>& m, const Tensor<T>& input) {
  detail::require(m.config.variant == Variant::AnchorFree,
                  "forward_anchor_free: model was built as " +
                      std::string(variant_name(m.config.variant)));
  Tensor<T> u = detail::run_trunk(m, input, m.config.fusion_count());
  return sigmoid(conv3d(u, m.at("head.hm.w"), m.at("head.hm.b")));
}

template <typename T>
struct AnchorPrediction {
  Tensor<T> offsets;        // [H/4,W/4,D/4, 3*L*n_a]
  Tensor<T> probabilities;  // [H/4,W/4,D/4, L*n_a], sigmoid
  Tensor<T> aux_heatmap;    // undefined unless the auxiliary head is enabled
};

template <typename T>
AnchorPrediction<T> forward_anchor_based(const ModelState<T>& m, const Tensor<T>& input) {
  detail::require(m.config.variant == Variant::AnchorBased,
                  "forward_anchor_based: model was built as " +
                      std::string(variant_name(m.config.variant)));
  Tensor<T> u = detail::run_trunk(m, input, m.config.fusion_count());
  AnchorPrediction<T> out;
  out.offsets = conv3d(u, m.at("head.off.w"), m.at("head.off.b"));
  out.probabilities = sigmoid(conv3d(u, m.at("head.prob.w"), m.at("head.prob.b")));
  if (m.config.aux_heatmap_head)
    out.aux_heatmap = sigmoid(conv3d(u, m.at("head.auxhm.w"), m.at("head.auxhm.b")));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: text header + manifest, then the raw little-endian payload.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string config_header(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "config.variant " << variant_name(cfg.variant) << "\n";
  os << "config.stages " << cfg.stages << "\n";
  os << "config.channels";
  for (auto c : cfg.channels) os << " " << c;
  os << "\n";
  os << "config.heads " << cfg.heads << "\n";
  os << "config.region " << cfg.region_size[0] << " " << cfg.region_size[1] << " "
     << cfg.region_size[2] << "\n";
  os << "config.top_k " << cfg.top_k << "\n";
  os << "config.landmarks " << cfg.landmark_count << "\n";
  os << "config.input_dims " << cfg.input_dims[0] << " " << cfg.input_dims[1] << " "
     << cfg.input_dims[2] << "\n";
  os << "config.sigma " << fmt_double(cfg.heatmap_sigma) << "\n";
  os << "config.mlp_ratio " << fmt_double(cfg.mlp_ratio) << "\n";
  os << "config.anchor_radii";
  for (double r : cfg.anchor_radii) os << " " << fmt_double(r);
  os << "\n";
  os << "config.aux_heatmap_head " << (cfg.aux_heatmap_head ? 1 : 0) << "\n";
  os << "config.force_self_region " << (cfg.force_self_region ? 1 : 0) << "\n";
  return os.str();
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelState<T>& m) {
  std::ostringstream os;
  os << "checkpoint v1\n";
  os << "dtype " << detail::dtype_tag<T>() << "\n";
  os << "seed " << m.seed << "\n";
  os << detail::config_header(m.config);
  os << "params " << m.params.size() << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : m.params) {
    os << "param " << name << " " << offset << " " << t.size() << "\n";
    offset += t.size();
  }
  os << "payload_bytes " << offset * sizeof(T) << "\n";
  std::string blob = os.str();
  const std::size_t header_len = blob.size();
  blob.resize(header_len + offset * sizeof(T));
  std::size_t cursor = header_len;
  for (const auto& [name, t] : m.params) {
    std::memcpy(blob.data() + cursor, t.values().data(), t.size() * sizeof(T));
    cursor += t.size() * sizeof(T);
  }
  detail::atomic_write(path, blob);
}

template <typename T>
ModelState<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string blob = detail::read_file(path);
  std::size_t payload_start = 0;
  std::size_t payload_bytes = 0;

  ModelConfig cfg;
  cfg.anchor_radii.clear();
  cfg.channels.clear();
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> manifest;

  std::istringstream in(blob);
  std::string line;
  if (!std::getline(in, line) || line != "checkpoint v1")
    throw IoError(path.string() + ": not a v1 checkpoint");
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "dtype") {
      std::string tag;
      ls >> tag;
      if (tag != detail::dtype_tag<T>())
        throw IoError(path.string() + ": dtype '" + tag + "', expected '" +
                      detail::dtype_tag<T>() + "'");
    } else if (key == "seed") {
      ls >> seed;
    } else if (key == "config.variant") {
      std::string v;
      ls >> v;
      cfg.variant = v == "anchor_based" ? Variant::AnchorBased : Variant::AnchorFree;
    } else if (key == "config.stages") {
      ls >> cfg.stages;
    } else if (key == "config.channels") {
      std::size_t c;
      while (ls >> c) cfg.channels.push_back(c);
    } else if (key == "config.heads") {
      ls >> cfg.heads;
    } else if (key == "config.region") {
      ls >> cfg.region_size[0] >> cfg.region_size[1] >> cfg.region_size[2];
    } else if (key == "config.top_k") {
      ls >> cfg.top_k;
    } else if (key == "config.landmarks") {
      ls >> cfg.landmark_count;
    } else if (key == "config.input_dims") {
      ls >> cfg.input_dims[0] >> cfg.input_dims[1] >> cfg.input_dims[2];
    } else if (key == "config.sigma") {
      ls >> cfg.heatmap_sigma;
    } else if (key == "config.mlp_ratio") {
      ls >> cfg.mlp_ratio;
    } else if (key == "config.anchor_radii") {
      double r;
      while (ls >> r) cfg.anchor_radii.push_back(r);
    } else if (key == "config.aux_heatmap_head") {
      int v;
      ls >> v;
      cfg.aux_heatmap_head = v != 0;
    } else if (key == "config.force_self_region") {
      int v;
      ls >> v;
      cfg.force_self_region = v != 0;
    } else if (key == "params") {
      // manifest lines follow
    } else if (key == "param") {
      std::string name;
      std::size_t off, count;
      ls >> name >> off >> count;
      manifest.emplace_back(name, std::make_pair(off, count));
    } else if (key == "payload_bytes") {
      ls >> payload_bytes;
      payload_start = static_cast<std::size_t>(in.tellg());
      break;
    } else {
      throw IoError(path.string() + ": unexpected checkpoint field '" + key + "'");
    }
  }
  if (payload_start == 0 || blob.size() - payload_start != payload_bytes)
    throw IoError(path.string() + ": payload holds " +
                  std::to_string(blob.size() - payload_start) + " bytes, header declares " +
                  std::to_string(payload_bytes));

  ModelState<T> state;
  state.config = cfg;
  state.seed = seed;
  const auto layout = parameter_layout(cfg);
  if (layout.size() != manifest.size())
    throw IoError(path.string() + ": manifest size does not match the config layout");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, range] = manifest[i];
    if (name != layout[i].name)
      throw IoError(path.string() + ": manifest entry '" + name + "' does not match layout '" +
                    layout[i].name + "'");
    const std::size_t count = range.second;
    if (count != numel(layout[i].shape))
      throw IoError(path.string() + ": parameter '" + name + "' has wrong element count");
    std::vector<T> data(count);
    std::memcpy(data.data(), blob.data() + payload_start + range.first * sizeof(T),
                count * sizeof(T));
    state.index[name] = state.params.size();
    state.params.emplace_back(name, Tensor<T>(layout[i].shape, std::move(data)));
  }
  return state;
}

}  // namespace volmark
