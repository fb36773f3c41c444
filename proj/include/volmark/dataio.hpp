#pragma once

// On-disk formats and the synthetic dataset generator.
//
// Volume: <name>.volhdr is a small text header (version, dims, spacing,
// dtype) and <name>.vol is the raw little-endian scalar grid, x-fastest
// (file offset = x + H*y + H*W*z). In memory volumes are [H,W,D] row-major,
// so save/load transpose; roundtrips are bit-exact.
//
// Annotations: <name>.landmarks, line-oriented text with a spacing echo and
// one record per landmark. Writes are atomic (temp file + rename).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "volmark/heatmap.hpp"
#include "volmark/rng.hpp"
#include "volmark/tensor.hpp"

namespace volmark {

static_assert(std::endian::native == std::endian::little,
              "volume payloads are little-endian; big-endian hosts are unsupported");

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Volume {
  Tensor<T> data;  // [H, W, D]
  std::array<double, 3> spacing{1, 1, 1};

  std::array<std::size_t, 3> dims() const {
    const Shape& s = data.shape();
    detail::require(s.size() == 3, "volume: expected rank-3 grid");
    return {s[0], s[1], s[2]};
  }
};

namespace detail {

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
constexpr const char* dtype_tag() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// `stem` is the path without extension; writes <stem>.volhdr and <stem>.vol.
template <typename T>
void save_volume(const std::filesystem::path& stem, const Volume<T>& vol) {
  const auto d = vol.dims();
  std::ostringstream hdr;
  hdr << "volhdr v1\n";
  hdr << "dims " << d[0] << " " << d[1] << " " << d[2] << "\n";
  hdr << "spacing " << detail::fmt_double(vol.spacing[0]) << " "
      << detail::fmt_double(vol.spacing[1]) << " " << detail::fmt_double(vol.spacing[2])
      << "\n";
  hdr << "dtype " << detail::dtype_tag<T>() << "\n";

  // x-fastest payload
  std::string payload(d[0] * d[1] * d[2] * sizeof(T), '\0');
  const auto& mem = vol.data.values();
  std::size_t off = 0;
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x) {
        const T v = mem[(x * d[1] + y) * d[2] + z];
        std::memcpy(payload.data() + off, &v, sizeof(T));
        off += sizeof(T);
      }
  detail::atomic_write(stem.string() + ".volhdr", hdr.str());
  detail::atomic_write(stem.string() + ".vol", payload);
}

template <typename T>
Volume<T> load_volume(const std::filesystem::path& stem) {
  std::istringstream hdr(detail::read_file(stem.string() + ".volhdr"));
  std::string magic, version;
  hdr >> magic >> version;
  if (magic != "volhdr" || version != "v1")
    throw IoError(stem.string() + ".volhdr: unknown format/version '" + magic + " " +
                  version + "'");
  std::array<std::size_t, 3> d{};
  std::array<double, 3> spacing{};
  std::string dtype;
  std::string key;
  while (hdr >> key) {
    if (key == "dims")
      hdr >> d[0] >> d[1] >> d[2];
    else if (key == "spacing")
      hdr >> spacing[0] >> spacing[1] >> spacing[2];
    else if (key == "dtype")
      hdr >> dtype;
    else
      throw IoError(stem.string() + ".volhdr: unexpected field '" + key + "'");
  }
  if (d[0] == 0 || d[1] == 0 || d[2] == 0)
    throw IoError(stem.string() + ".volhdr: missing or zero dims");
  if (dtype != detail::dtype_tag<T>())
    throw IoError(stem.string() + ": dtype is '" + dtype + "', expected '" +
                  detail::dtype_tag<T>() + "'");

  const std::string payload = detail::read_file(stem.string() + ".vol");
  const std::size_t expect = d[0] * d[1] * d[2] * sizeof(T);
  if (payload.size() != expect)
    throw IoError(stem.string() + ".vol: payload holds " + std::to_string(payload.size()) +
                  " bytes, expected " + std::to_string(expect));

  std::vector<T> mem(d[0] * d[1] * d[2]);
  std::size_t off = 0;
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x) {
        T v;
        std::memcpy(&v, payload.data() + off, sizeof(T));
        off += sizeof(T);
        mem[(x * d[1] + y) * d[2] + z] = v;
      }
  Volume<T> vol;
  vol.data = Tensor<T>(Shape{d[0], d[1], d[2]}, std::move(mem));
  vol.spacing = spacing;
  return vol;
}

inline void save_landmarks(const std::filesystem::path& path, const LandmarkSet& set) {
  set.validate_ids();
  std::ostringstream os;
  os << "landmarks v1\n";
  os << "spacing " << detail::fmt_double(set.spacing[0]) << " "
     << detail::fmt_double(set.spacing[1]) << " " << detail::fmt_double(set.spacing[2])
     << "\n";
  os << "count " << set.count() << "\n";
  for (const Landmark& lm : set.landmarks) {
    os << "lm " << lm.id << " " << lm.name << " " << (lm.present ? "present" : "absent");
    os << " " << detail::fmt_double(lm.present ? lm.x : 0.0) << " "
       << detail::fmt_double(lm.present ? lm.y : 0.0) << " "
       << detail::fmt_double(lm.present ? lm.z : 0.0) << "\n";
  }
  detail::atomic_write(path, os.str());
}

inline LandmarkSet load_landmarks(const std::filesystem::path& path) {
  std::istringstream in(detail::read_file(path));
  std::string magic, version;
  in >> magic >> version;
  if (magic != "landmarks" || version != "v1")
    throw IoError(path.string() + ": unknown format/version");
  LandmarkSet set;
  std::size_t count = 0;
  std::string key;
  while (in >> key) {
    if (key == "spacing") {
      in >> set.spacing[0] >> set.spacing[1] >> set.spacing[2];
    } else if (key == "count") {
      in >> count;
    } else if (key == "lm") {
      Landmark lm;
      std::string presence;
      if (!(in >> lm.id >> lm.name >> presence >> lm.x >> lm.y >> lm.z))
        throw IoError(path.string() + ": truncated landmark record");
      if (presence != "present" && presence != "absent")
        throw IoError(path.string() + ": bad presence flag '" + presence + "'");
      lm.present = presence == "present";
      set.landmarks.push_back(lm);
    } else {
      throw IoError(path.string() + ": unexpected field '" + key + "'");
    }
  }
  if (set.count() != count)
    throw IoError(path.string() + ": header declares " + std::to_string(count) +
                  " landmarks, found " + std::to_string(set.count()));
  for (std::size_t i = 0; i < set.landmarks.size(); ++i)
    if (set.landmarks[i].id != i)
      throw IoError(path.string() + ": landmark ids must be dense and ascending");
  return set;
}

// Min-max scaling to [0, 255]; a constant volume maps to all zeros. Network
// ingestion divides by 255 afterwards.
template <typename T>
Volume<T> normalize_intensity(const Volume<T>& vol) {
  const auto& v = vol.data.values();
  T lo = v[0], hi = v[0];
  for (const T& x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::vector<T> out(v.size());
  if (hi > lo) {
    const T scale = T(255) / (hi - lo);
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) * scale;
  }
  Volume<T> res;
  res.data = Tensor<T>(vol.data.shape(), std::move(out));
  res.spacing = vol.spacing;
  return res;
}

// Uniformly random corner from the seed; landmark coordinates shift by the
// corner and landmarks falling outside become absent.
template <typename T>
std::pair<Volume<T>, LandmarkSet> random_crop(const Volume<T>& vol, const LandmarkSet& set,
                                              std::array<std::size_t, 3> crop_dims,
                                              std::uint64_t seed) {
  const auto d = vol.dims();
  for (int ax = 0; ax < 3; ++ax)
    detail::require(crop_dims[ax] >= 1 && crop_dims[ax] <= d[ax],
                    "random_crop: crop extent " + std::to_string(crop_dims[ax]) +
                        " exceeds volume extent " + std::to_string(d[ax]));
  SplitMix64 rng(seed);
  std::array<std::size_t, 3> corner{};
  for (int ax = 0; ax < 3; ++ax) corner[ax] = rng.next_below(d[ax] - crop_dims[ax] + 1);

  std::vector<T> out(crop_dims[0] * crop_dims[1] * crop_dims[2]);
  const auto& v = vol.data.values();
  for (std::size_t x = 0; x < crop_dims[0]; ++x)
    for (std::size_t y = 0; y < crop_dims[1]; ++y)
      for (std::size_t z = 0; z < crop_dims[2]; ++z)
        out[(x * crop_dims[1] + y) * crop_dims[2] + z] =
            v[((x + corner[0]) * d[1] + (y + corner[1])) * d[2] + (z + corner[2])];

  LandmarkSet shifted = set;
  for (Landmark& lm : shifted.landmarks) {
    if (!lm.present) continue;
    lm.x -= static_cast<double>(corner[0]);
    lm.y -= static_cast<double>(corner[1]);
    lm.z -= static_cast<double>(corner[2]);
    const double c[3] = {lm.x, lm.y, lm.z};
    for (int ax = 0; ax < 3; ++ax)
      if (c[ax] < 0 || c[ax] >= static_cast<double>(crop_dims[ax])) lm.present = false;
    if (!lm.present) lm.x = lm.y = lm.z = 0;
  }
  Volume<T> cropped;
  cropped.data = Tensor<T>(Shape{crop_dims[0], crop_dims[1], crop_dims[2]}, std::move(out));
  cropped.spacing = vol.spacing;
  return {cropped, shifted};
}

struct SynthSpec {
  std::size_t count = 5;
  std::array<std::size_t, 3> dims{32, 32, 16};
  std::size_t landmarks = 2;
  double sigma_blob = 2.0;
  double noise_level = 0.05;
  double missing_prob = 0.0;
  std::uint64_t seed = 0;
  std::array<double, 3> spacing{1, 1, 1};

  // Each landmark gets a distinct blob amplitude in [0.75, 1.0] so landmark
  // identity is recoverable from intensity, not just position.
  double amplitude(std::size_t l) const {
    if (landmarks <= 1) return 1.0;
    return 1.0 - 0.25 * static_cast<double>(l) / static_cast<double>(landmarks - 1);
  }

  void validate() const {
    for (std::size_t e : dims)
      volmark::detail::require(e >= 8, "synth: dims must be at least 8 per axis");
    volmark::detail::require(count >= 1 && landmarks >= 1, "synth: empty dataset spec");
    volmark::detail::require(sigma_blob > 0, "synth: sigma must be positive");
    volmark::detail::require(missing_prob >= 0 && missing_prob <= 1,
                             "synth: missing_prob must lie in [0,1]");
    // the noise must not be able to move a blob's peak off its center voxel
    const double margin = amplitude(landmarks - 1) *
                          (1.0 - std::exp(-1.0 / (2.0 * sigma_blob * sigma_blob)));
    volmark::detail::require(noise_level <= 0.9 * margin,
                             "synth: noise_level " + std::to_string(noise_level) +
                                 " can displace blob peaks at sigma " +
                                 std::to_string(sigma_blob) + "; keep it below " +
                                 std::to_string(0.9 * margin));
  }
};

template <typename T = float>
std::pair<Volume<T>, LandmarkSet> synth_case(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  SplitMix64 rng(derive_seed(spec.seed, index));
  const auto& d = spec.dims;
  const std::size_t margin =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(spec.sigma_blob)));
  const double min_sep = 2.0 * spec.sigma_blob;

  // integer blob centers, separated and off the border
  std::vector<std::array<double, 3>> centers;
  std::size_t attempts = 0;
  while (centers.size() < spec.landmarks) {
    if (++attempts > 1000 * spec.landmarks)
      throw IoError("synth: cannot place " + std::to_string(spec.landmarks) +
                    " landmarks separated by " + std::to_string(min_sep) + " in " +
                    std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" +
                    std::to_string(d[2]));
    std::array<double, 3> c;
    for (int ax = 0; ax < 3; ++ax) {
      volmark::detail::require(d[ax] > 2 * margin, "synth: dims too small for blob margin");
      c[ax] = static_cast<double>(margin + rng.next_below(d[ax] - 2 * margin));
    }
    bool ok = true;
    for (const auto& o : centers) {
      const double dist = std::sqrt((c[0] - o[0]) * (c[0] - o[0]) +
                                    (c[1] - o[1]) * (c[1] - o[1]) +
                                    (c[2] - o[2]) * (c[2] - o[2]));
      ok &= dist > min_sep;
    }
    if (ok) centers.push_back(c);
  }

  LandmarkSet set;
  set.spacing = spec.spacing;
  for (std::size_t l = 0; l < spec.landmarks; ++l) {
    Landmark lm;
    lm.id = l;
    lm.name = "lm" + std::to_string(l);
    lm.present = rng.next_unit() >= spec.missing_prob;
    lm.x = lm.present ? centers[l][0] : 0;
    lm.y = lm.present ? centers[l][1] : 0;
    lm.z = lm.present ? centers[l][2] : 0;
    set.landmarks.push_back(lm);
  }

  std::vector<T> grid(d[0] * d[1] * d[2]);
  for (auto& v : grid) v = static_cast<T>(spec.noise_level * rng.next_unit());
  const double inv = 1.0 / (2.0 * spec.sigma_blob * spec.sigma_blob);
  for (std::size_t l = 0; l < spec.landmarks; ++l) {
    if (!set.landmarks[l].present) continue;
    const auto& c = centers[l];
    const double amp = spec.amplitude(l);
    for (std::size_t x = 0; x < d[0]; ++x)
      for (std::size_t y = 0; y < d[1]; ++y)
        for (std::size_t z = 0; z < d[2]; ++z) {
          const double dx = static_cast<double>(x) - c[0];
          const double dy = static_cast<double>(y) - c[1];
          const double dz = static_cast<double>(z) - c[2];
          grid[(x * d[1] + y) * d[2] + z] +=
              static_cast<T>(amp * std::exp(-(dx * dx + dy * dy + dz * dz) * inv));
        }
  }
  Volume<T> vol;
  vol.data = Tensor<T>(Shape{d[0], d[1], d[2]}, std::move(grid));
  vol.spacing = spec.spacing;
  return {vol, set};
}

inline std::string case_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", index);
  return buf;
}

// Writes count volumes + annotations + a manifest into out_dir.
template <typename T = float>
std::vector<std::string> synth_generate(const SynthSpec& spec,
                                        const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < spec.count; ++i) {
    auto [vol, set] = synth_case<T>(spec, i);
    const std::string name = case_name(i);
    save_volume(out_dir / name, vol);
    save_landmarks(out_dir / (name + ".landmarks"), set);
    names.push_back(name);
  }
  std::ostringstream manifest;
  manifest << "dataset v1\n";
  manifest << "count " << spec.count << "\n";
  for (const auto& n : names) manifest << "case " << n << "\n";
  detail::atomic_write(out_dir / "dataset.txt", manifest.str());
  return names;
}

inline std::vector<std::string> load_manifest(const std::filesystem::path& dir) {
  std::istringstream in(detail::read_file(dir / "dataset.txt"));
  std::string magic, version;
  in >> magic >> version;
  if (magic != "dataset" || version != "v1")
    throw IoError((dir / "dataset.txt").string() + ": unknown format/version");
  std::vector<std::string> names;
  std::string key;
  while (in >> key) {
    if (key == "count") {
      std::size_t n;
      in >> n;
    } else if (key == "case") {
      std::string name;
      in >> name;
      names.push_back(name);
    } else {
      throw IoError((dir / "dataset.txt").string() + ": unexpected field '" + key + "'");
    }
  }
  if (names.empty()) throw IoError((dir / "dataset.txt").string() + ": empty dataset");
  return names;
}

}  // namespace volmark
