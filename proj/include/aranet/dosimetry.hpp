#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aranet/volume.hpp"

// Clinical evaluation metrics over dose volumes: dose percentiles, volume
// fractions, conformity and heterogeneity indices, percent prediction error,
// and cumulative dose-volume histograms. All arithmetic runs in double;
// voxel counting ignores spacing since the reported ratios cancel the voxel
// volume on a uniform grid.

namespace aranet {

struct DvhCurve {
  std::string structure;
  std::vector<double> dose_axis;     // ascending, 0 .. max masked dose
  std::vector<double> cum_fraction;  // fraction of voxels with dose >= axis value
};

struct StructureMetrics {
  std::string structure;
  double d_mean = 0.0;
  double d2 = 0.0;
  double d50 = 0.0;
  double d95 = 0.0;
  double d98 = 0.0;
  double v50 = 0.0;
  double ci = 0.0;
  double hi = 0.0;
  bool has_ci = false;  // conformity/heterogeneity are target-only metrics
  bool has_hi = false;
};

// Dose values of the masked voxels in scan order. Throws when the mask is
// empty or the grids disagree.
std::vector<double> masked_doses(const Volume& dose, const MaskVolume& mask);

double mean_dose(const Volume& dose, const MaskVolume& mask);

// Minimal dose covering m% of the structure: the ceil(m/100 * K)-th value of
// the descending-sorted masked doses.
double d_percentile(const Volume& dose, const MaskVolume& mask, double m);

// Fraction of masked voxels receiving at least x Gy.
double v_at(const Volume& dose, const MaskVolume& mask, double x);

// |TV n PIV|^2 / (|TV| * |PIV|) with PIV the set of voxels at or above the
// prescription dose; 0 when no voxel reaches it.
double conformity_index(const Volume& dose, const MaskVolume& ptv, double prescription_gy);

// (D2 - D98) / D50 over the target; requires D50 > 0.
double heterogeneity_index(const Volume& dose, const MaskVolume& ptv);

// Cohort percent prediction error: mean of |truth - prediction| / prediction,
// times 100, with the prediction in the denominator.
double ape(const std::vector<double>& truth, const std::vector<double>& prediction);

double abs_error_gy(double truth, double prediction);

DvhCurve dvh(const Volume& dose, const MaskVolume& mask, std::int64_t n_bins);

// One-stop summary used by reports; v50 is evaluated at vx_threshold_gy.
StructureMetrics compute_structure_metrics(const Volume& dose, const MaskVolume& mask, bool is_target,
                                           double prescription_gy, double vx_threshold_gy = 50.0);

}  // namespace aranet
