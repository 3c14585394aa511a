#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "aranet/tensor.hpp"

// 3D scalar fields on a regular anisotropic grid. Volumes carry dose in Gy
// or CT intensity in [0,1]; masks are strictly binary structure labels on
// the same grid.

namespace aranet {

struct Volume {
  Shape shape;  // [D,H,W]
  std::array<double, 3> spacing_mm{3.0, 3.0, 3.0};
  std::vector<float> values;
};

struct MaskVolume {
  Shape shape;  // [D,H,W]
  std::array<double, 3> spacing_mm{3.0, 3.0, 3.0};
  std::vector<std::uint8_t> values;
  std::string label;
};

namespace detail {

inline void check_grid(const Shape& shape, const std::array<double, 3>& spacing, std::size_t count,
                       const std::string& what) {
  if (shape.size() != 3) {
    throw std::invalid_argument(what + ": shape must be [D,H,W], got " + shape_str(shape));
  }
  if (static_cast<std::int64_t>(count) != shape_numel(shape)) {
    throw std::invalid_argument(what + ": " + std::to_string(count) + " values for shape " +
                                shape_str(shape));
  }
  for (double s : spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument(what + ": spacing must be positive and finite");
    }
  }
}

}  // namespace detail

inline void validate_volume(const Volume& v, bool require_non_negative, const std::string& what) {
  detail::check_grid(v.shape, v.spacing_mm, v.values.size(), what);
  for (float x : v.values) {
    if (!std::isfinite(x)) throw std::invalid_argument(what + ": non-finite value");
    if (require_non_negative && x < 0.0f) throw std::invalid_argument(what + ": negative value");
  }
}

inline void validate_mask(const MaskVolume& m) {
  const std::string what = m.label.empty() ? std::string("mask") : "mask '" + m.label + "'";
  detail::check_grid(m.shape, m.spacing_mm, m.values.size(), what);
  for (std::uint8_t x : m.values) {
    if (x > 1) throw std::invalid_argument(what + ": values must be 0 or 1");
  }
}

inline void require_same_grid(const Volume& v, const MaskVolume& m) {
  if (v.shape != m.shape) {
    const std::string what = m.label.empty() ? std::string("mask") : "mask '" + m.label + "'";
    throw std::invalid_argument(what + ": shape " + shape_str(m.shape) + " does not match volume shape " +
                                shape_str(v.shape));
  }
}

inline std::int64_t mask_voxel_count(const MaskVolume& m) {
  std::int64_t n = 0;
  for (std::uint8_t x : m.values) n += x;
  return n;
}

}  // namespace aranet
