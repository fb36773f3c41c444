#pragma once

// Evaluation metrics: mean radial error (mm) and successful detection rate.
// Radial error is the Euclidean distance between predicted and ground-truth
// landmarks after scaling voxel deltas by the per-axis spacing; only
// landmarks present in both sets are scored, and presence agreement is
// tracked separately. SDR counts an error exactly on the threshold as a hit.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "volmark/heatmap.hpp"

namespace volmark {

struct LandmarkError {
  std::string volume;
  std::size_t id = 0;
  double error_mm = 0;
};

struct MreResult {
  double mean_mm = 0;
  double std_mm = 0;  // population std
  std::vector<LandmarkError> errors;
};

inline double radial_error_mm(const Landmark& a, const Landmark& b,
                              const std::array<double, 3>& spacing) {
  const double dx = (a.x - b.x) * spacing[0];
  const double dy = (a.y - b.y) * spacing[1];
  const double dz = (a.z - b.z) * spacing[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline MreResult mre(const LandmarkSet& pred, const LandmarkSet& gt,
                     const std::string& volume_name = "") {
  detail::require(pred.count() == gt.count(),
                  "mre: landmark counts differ (" + std::to_string(pred.count()) + " vs " +
                      std::to_string(gt.count()) + ")");
  detail::require(pred.spacing == gt.spacing, "mre: spacing mismatch between sets");
  MreResult r;
  for (std::size_t i = 0; i < gt.count(); ++i) {
    const Landmark& p = pred.landmarks[i];
    const Landmark& g = gt.landmarks[i];
    detail::require(p.id == g.id, "mre: landmark ids do not line up");
    if (!p.present || !g.present) continue;
    r.errors.push_back({volume_name, g.id, radial_error_mm(p, g, gt.spacing)});
  }
  detail::require(!r.errors.empty(), "mre: no landmark present in both sets");
  double sum = 0;
  for (const auto& e : r.errors) sum += e.error_mm;
  r.mean_mm = sum / static_cast<double>(r.errors.size());
  double var = 0;
  for (const auto& e : r.errors) {
    const double d = e.error_mm - r.mean_mm;
    var += d * d;
  }
  r.std_mm = std::sqrt(var / static_cast<double>(r.errors.size()));
  return r;
}

// Percent of errors <= threshold, one value per threshold.
inline std::vector<double> sdr(const std::vector<double>& errors_mm,
                               const std::vector<double>& thresholds_mm) {
  detail::require(std::is_sorted(thresholds_mm.begin(), thresholds_mm.end()),
                  "sdr: thresholds must be sorted ascending");
  std::vector<double> out;
  out.reserve(thresholds_mm.size());
  for (double t : thresholds_mm) {
    std::size_t hits = 0;
    for (double e : errors_mm) hits += e <= t ? 1 : 0;
    out.push_back(errors_mm.empty()
                      ? 0.0
                      : 100.0 * static_cast<double>(hits) / static_cast<double>(errors_mm.size()));
  }
  return out;
}

struct EvalReport {
  std::vector<LandmarkError> errors;
  std::vector<double> thresholds_mm{2.0, 2.5, 3.0, 4.0};
  double mre_mm = 0;
  double std_mm = 0;
  std::vector<double> sdr_pct;
  // presence agreement
  std::size_t both_present = 0;
  std::size_t both_absent = 0;
  std::size_t presence_mismatch = 0;

  void finalize() {
    std::vector<double> plain;
    plain.reserve(errors.size());
    for (const auto& e : errors) plain.push_back(e.error_mm);
    sdr_pct = sdr(plain, thresholds_mm);
    if (!plain.empty()) {
      double sum = 0;
      for (double v : plain) sum += v;
      mre_mm = sum / static_cast<double>(plain.size());
      double var = 0;
      for (double v : plain) var += (v - mre_mm) * (v - mre_mm);
      std_mm = std::sqrt(var / static_cast<double>(plain.size()));
    }
  }

  void add_case(const LandmarkSet& pred, const LandmarkSet& gt, const std::string& name) {
    for (std::size_t i = 0; i < gt.count(); ++i) {
      const Landmark& p = pred.landmarks[i];
      const Landmark& g = gt.landmarks[i];
      if (p.present && g.present) {
        ++both_present;
        errors.push_back({name, g.id, radial_error_mm(p, g, gt.spacing)});
      } else if (!p.present && !g.present) {
        ++both_absent;
      } else {
        ++presence_mismatch;
      }
    }
  }

  double presence_agreement_pct() const {
    const std::size_t total = both_present + both_absent + presence_mismatch;
    if (total == 0) return 100.0;
    return 100.0 * static_cast<double>(both_present + both_absent) /
           static_cast<double>(total);
  }

  std::string to_table() const {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "MRE: %.4f +/- %.4f mm over %zu landmarks\n", mre_mm,
                  std_mm, errors.size());
    os << buf;
    os << "SDR:";
    for (std::size_t i = 0; i < thresholds_mm.size(); ++i) {
      std::snprintf(buf, sizeof buf, "  %.1fmm %.2f%%", thresholds_mm[i], sdr_pct[i]);
      os << buf;
    }
    os << "\n";
    std::snprintf(buf, sizeof buf,
                  "presence agreement: %.2f%% (both present %zu, both absent %zu, mismatch %zu)\n",
                  presence_agreement_pct(), both_present, both_absent, presence_mismatch);
    os << buf;
    return os.str();
  }

  // One landmark per row: volume, id, error in mm, hit flag per threshold.
  std::string to_records() const {
    std::ostringstream os;
    os << "volume,landmark,error_mm";
    for (double t : thresholds_mm) {
      char buf[32];
      std::snprintf(buf, sizeof buf, ",hit_%g mm", t);
      std::string col(buf);
      std::replace(col.begin(), col.end(), ' ', '_');
      os << col;
    }
    os << "\n";
    for (const auto& e : errors) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6f", e.error_mm);
      os << e.volume << "," << e.id << "," << buf;
      for (double t : thresholds_mm) os << "," << (e.error_mm <= t ? 1 : 0);
      os << "\n";
    }
    return os.str();
  }
};

}  // namespace volmark
