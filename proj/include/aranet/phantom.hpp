#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "aranet/volume.hpp"

// Deterministic synthetic pelvis phantoms: a planning target volume plus five
// organs at risk, a smooth CT-like field, and an analytic ground-truth dose
// with exponential falloff and a radial beam pattern. Fixed seeds reproduce
// every byte, which the training and evaluation tests rely on.

namespace aranet {

struct Ellipsoid {
  std::array<double, 3> center{};  // voxel coordinates, [d,h,w] order
  std::array<double, 3> radii{};   // voxel units, all positive
};

struct LabeledEllipsoid {
  std::string label;
  Ellipsoid shape;
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  Shape grid{8, 64, 64};  // [D,H,W]
  std::array<double, 3> spacing_mm{3.0, 3.0, 3.0};
  double prescription_gy = 45.0;
  Ellipsoid ptv;
  std::vector<LabeledEllipsoid> oars;
  double falloff_sigma_mm = 12.0;
  int n_beams = 7;

  // Rejects empty grids, non-positive radii or dose parameters, and any
  // ellipsoid whose extent leaves the grid. Overlap with the target is only
  // detectable after rasterization, so generate() checks it.
  void validate() const;
};

struct PhantomSample {
  Volume ct;
  std::vector<MaskVolume> masks;  // ptv first, then the organs at risk
  Volume dose;
};

// Default pelvis-like geometry with seeded jitter on the target radii and on
// every structure center. Offsets and radii scale with the grid so that the
// same layout fits smaller volumes.
PhantomSpec default_phantom_spec(std::uint64_t seed, const Shape& grid = {8, 64, 64});

PhantomSample generate(const PhantomSpec& spec);

// Exact Euclidean distance in mm from every voxel to the nearest mask voxel
// center, 0 inside the mask. Separable lower-envelope passes, one per axis,
// each weighted by that axis' spacing.
Volume distance_transform(const MaskVolume& mask, const std::array<double, 3>& spacing_mm);

// Writes n samples under out_dir (s0000/, s0001/, ...) plus manifest.txt and
// returns the {train, val, test} counts. Sample i is generated from seed
// base_seed + i, so datasets are reproducible and order-independent under
// parallel generation.
std::array<int, 3> make_dataset(int n, std::uint64_t base_seed, const std::string& out_dir,
                                const Shape& grid = {8, 64, 64},
                                const std::array<int, 3>& split = {40, 6, 8});

}  // namespace aranet
