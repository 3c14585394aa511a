#include "aranet/dosimetry.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace aranet {

namespace {

std::string structure_name(const MaskVolume& mask) {
  return mask.label.empty() ? std::string("mask") : "structure '" + mask.label + "'";
}

// rank statistic on an already descending-sorted list, m in (0,100]
double percentile_from_sorted(const std::vector<double>& sorted_desc, double m) {
  if (!(m > 0.0) || m > 100.0) {
    throw std::invalid_argument("d_percentile: m must lie in (0,100], got " + std::to_string(m));
  }
  const auto k = static_cast<std::int64_t>(sorted_desc.size());
  auto rank = static_cast<std::int64_t>(std::ceil(m * static_cast<double>(k) / 100.0));
  rank = std::max<std::int64_t>(1, std::min(rank, k));
  return sorted_desc[static_cast<std::size_t>(rank - 1)];
}

std::vector<double> sorted_masked_doses(const Volume& dose, const MaskVolume& mask) {
  std::vector<double> values = masked_doses(dose, mask);
  std::sort(values.begin(), values.end(), std::greater<double>());
  return values;
}

}  // namespace

std::vector<double> masked_doses(const Volume& dose, const MaskVolume& mask) {
  validate_volume(dose, true, "dose volume");
  validate_mask(mask);
  require_same_grid(dose, mask);
  std::vector<double> out;
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    if (mask.values[i]) out.push_back(static_cast<double>(dose.values[i]));
  }
  if (out.empty()) throw std::invalid_argument(structure_name(mask) + " has an empty mask");
  return out;
}

double mean_dose(const Volume& dose, const MaskVolume& mask) {
  const std::vector<double> values = masked_doses(dose, mask);
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

double d_percentile(const Volume& dose, const MaskVolume& mask, double m) {
  return percentile_from_sorted(sorted_masked_doses(dose, mask), m);
}

double v_at(const Volume& dose, const MaskVolume& mask, double x) {
  const std::vector<double> values = masked_doses(dose, mask);
  std::int64_t n = 0;
  for (double v : values) n += v >= x ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(values.size());
}

double conformity_index(const Volume& dose, const MaskVolume& ptv, double prescription_gy) {
  if (!(prescription_gy > 0.0)) {
    throw std::invalid_argument("conformity_index: prescription must be positive");
  }
  validate_volume(dose, true, "dose volume");
  validate_mask(ptv);
  require_same_grid(dose, ptv);
  std::int64_t tv = 0, piv = 0, overlap = 0;
  for (std::size_t i = 0; i < ptv.values.size(); ++i) {
    const bool in_tv = ptv.values[i] != 0;
    const bool in_piv = static_cast<double>(dose.values[i]) >= prescription_gy;
    tv += in_tv ? 1 : 0;
    piv += in_piv ? 1 : 0;
    overlap += (in_tv && in_piv) ? 1 : 0;
  }
  if (tv == 0) throw std::invalid_argument(structure_name(ptv) + " has an empty mask");
  if (piv == 0) return 0.0;
  return (static_cast<double>(overlap) * static_cast<double>(overlap)) /
         (static_cast<double>(tv) * static_cast<double>(piv));
}

double heterogeneity_index(const Volume& dose, const MaskVolume& ptv) {
  const std::vector<double> sorted = sorted_masked_doses(dose, ptv);
  const double d50 = percentile_from_sorted(sorted, 50.0);
  if (!(d50 > 0.0)) {
    throw std::invalid_argument("heterogeneity_index: D50 of " + structure_name(ptv) +
                                " is zero, ratio undefined");
  }
  return (percentile_from_sorted(sorted, 2.0) - percentile_from_sorted(sorted, 98.0)) / d50;
}

double ape(const std::vector<double>& truth, const std::vector<double>& prediction) {
  if (truth.empty() || truth.size() != prediction.size()) {
    throw std::invalid_argument("ape: needs equal non-zero lengths, got " + std::to_string(truth.size()) +
                                " and " + std::to_string(prediction.size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!(prediction[i] != 0.0) || !std::isfinite(prediction[i])) {
      throw std::invalid_argument("ape: zero prediction at index " + std::to_string(i) +
                                  ", ratio undefined");
    }
    sum += std::abs(truth[i] - prediction[i]) / prediction[i];
  }
  return sum / static_cast<double>(truth.size()) * 100.0;
}

double abs_error_gy(double truth, double prediction) { return std::abs(truth - prediction); }

DvhCurve dvh(const Volume& dose, const MaskVolume& mask, std::int64_t n_bins) {
  if (n_bins < 2) throw std::invalid_argument("dvh: n_bins must be at least 2");
  const std::vector<double> values = masked_doses(dose, mask);
  double dmax = 0.0;
  for (double v : values) dmax = std::max(dmax, v);

  DvhCurve curve;
  curve.structure = mask.label;
  curve.dose_axis.resize(static_cast<std::size_t>(n_bins));
  curve.cum_fraction.resize(static_cast<std::size_t>(n_bins));
  for (std::int64_t j = 0; j < n_bins; ++j) {
    const double level = dmax * static_cast<double>(j) / static_cast<double>(n_bins - 1);
    std::int64_t n = 0;
    for (double v : values) n += v >= level ? 1 : 0;
    curve.dose_axis[static_cast<std::size_t>(j)] = level;
    curve.cum_fraction[static_cast<std::size_t>(j)] =
        static_cast<double>(n) / static_cast<double>(values.size());
  }
  return curve;
}

StructureMetrics compute_structure_metrics(const Volume& dose, const MaskVolume& mask, bool is_target,
                                           double prescription_gy, double vx_threshold_gy) {
  const std::vector<double> values = masked_doses(dose, mask);
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());

  StructureMetrics out;
  out.structure = mask.label;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.d_mean = sum / static_cast<double>(values.size());
  out.d2 = percentile_from_sorted(sorted, 2.0);
  out.d50 = percentile_from_sorted(sorted, 50.0);
  out.d95 = percentile_from_sorted(sorted, 95.0);
  out.d98 = percentile_from_sorted(sorted, 98.0);
  std::int64_t n = 0;
  for (double v : values) n += v >= vx_threshold_gy ? 1 : 0;
  out.v50 = static_cast<double>(n) / static_cast<double>(values.size());
  if (is_target) {
    out.ci = conformity_index(dose, mask, prescription_gy);
    out.has_ci = true;
    if (out.d50 > 0.0) {
      out.hi = (out.d2 - out.d98) / out.d50;
      out.has_hi = true;
    }
  }
  return out;
}

}  // namespace aranet
