#include "aranet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>

#include "aranet/persist.hpp"
#include "aranet/util.hpp"

namespace aranet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kFalloffWeight = 0.7;  // falloff dominates the beam term

bool inside(const Ellipsoid& e, double d, double h, double w) {
  const double a = (d - e.center[0]) / e.radii[0];
  const double b = (h - e.center[1]) / e.radii[1];
  const double c = (w - e.center[2]) / e.radii[2];
  return a * a + b * b + c * c <= 1.0;
}

MaskVolume rasterize(const Ellipsoid& e, const std::string& label, const Shape& grid,
                     const std::array<double, 3>& spacing) {
  MaskVolume m;
  m.shape = grid;
  m.spacing_mm = spacing;
  m.label = label;
  m.values.resize(static_cast<std::size_t>(shape_numel(grid)));
  std::size_t i = 0;
  for (std::int64_t d = 0; d < grid[0]; ++d) {
    for (std::int64_t h = 0; h < grid[1]; ++h) {
      for (std::int64_t w = 0; w < grid[2]; ++w, ++i) {
        m.values[i] = inside(e, static_cast<double>(d), static_cast<double>(h),
                             static_cast<double>(w))
                          ? 1
                          : 0;
      }
    }
  }
  return m;
}

// 1D squared distance transform: d[q] = min_p ( w*(q-p)^2 + f[p] ). Standard
// lower envelope of parabolas; entries with f = +inf contribute no parabola.
void dt1d(const double* f, double* d, int* v, double* z, int n, double w) {
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s = 0.0;
    for (;;) {
      const int p = v[k];
      s = ((f[q] + w * q * q) - (f[p] + w * p * p)) / (2.0 * w * (q - p));
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d, d + n, kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const int p = v[j];
    d[q] = w * (q - p) * (q - p) + f[p];
  }
}

void ellipsoid_in_grid(const Ellipsoid& e, const std::string& label, const Shape& grid) {
  for (int i = 0; i < 3; ++i) {
    if (!(e.radii[i] > 0.0) || !std::isfinite(e.radii[i])) {
      throw std::invalid_argument("phantom: structure '" + label + "' needs positive radii");
    }
    if (!std::isfinite(e.center[i]) || e.center[i] - e.radii[i] < 0.0 ||
        e.center[i] + e.radii[i] > static_cast<double>(grid[i] - 1)) {
      throw std::invalid_argument("phantom: structure '" + label +
                                  "' does not fit inside the grid");
    }
  }
}

// Smooth field in [0.2, 0.8]: coarse lattice of uniform noise, trilinearly
// interpolated to the full grid. Node steps of 4 (depth) and 8 (in plane)
// give features a few voxels wide.
std::vector<float> smooth_noise(Prng& rng, const Shape& grid) {
  const std::array<std::int64_t, 3> step{4, 8, 8};
  std::array<std::int64_t, 3> nodes{};
  for (int i = 0; i < 3; ++i) nodes[i] = (grid[i] - 1) / step[i] + 2;
  std::vector<double> lattice(static_cast<std::size_t>(nodes[0] * nodes[1] * nodes[2]));
  for (auto& x : lattice) x = rng.uniform(0.2, 0.8);

  auto node = [&](std::int64_t a, std::int64_t b, std::int64_t c) {
    return lattice[static_cast<std::size_t>((a * nodes[1] + b) * nodes[2] + c)];
  };

  std::vector<float> out(static_cast<std::size_t>(shape_numel(grid)));
  std::size_t i = 0;
  for (std::int64_t d = 0; d < grid[0]; ++d) {
    const std::int64_t d0 = d / step[0];
    const double fd = static_cast<double>(d % step[0]) / static_cast<double>(step[0]);
    for (std::int64_t h = 0; h < grid[1]; ++h) {
      const std::int64_t h0 = h / step[1];
      const double fh = static_cast<double>(h % step[1]) / static_cast<double>(step[1]);
      for (std::int64_t w = 0; w < grid[2]; ++w, ++i) {
        const std::int64_t w0 = w / step[2];
        const double fw = static_cast<double>(w % step[2]) / static_cast<double>(step[2]);
        double acc = 0.0;
        for (int cd = 0; cd < 2; ++cd) {
          for (int ch = 0; ch < 2; ++ch) {
            for (int cw = 0; cw < 2; ++cw) {
              const double weight = (cd ? fd : 1.0 - fd) * (ch ? fh : 1.0 - fh) *
                                    (cw ? fw : 1.0 - fw);
              acc += weight * node(d0 + cd, h0 + ch, w0 + cw);
            }
          }
        }
        out[i] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

// Radial pattern: n equspaced ridge kernels through the target centroid in
// the (y,x) plane, constant along depth, normalized to peak at 1.
std::vector<double> beam_field(const Shape& grid, const std::array<double, 3>& spacing,
                               double cy_mm, double cx_mm, int n_beams) {
  const std::size_t plane = static_cast<std::size_t>(grid[1] * grid[2]);
  std::vector<double> field(plane, 0.0);
  if (n_beams == 0) return field;
  const double sigma_b = 6.0;  // ridge width in mm
  double peak = 0.0;
  std::size_t i = 0;
  for (std::int64_t h = 0; h < grid[1]; ++h) {
    for (std::int64_t w = 0; w < grid[2]; ++w, ++i) {
      const double y = static_cast<double>(h) * spacing[1] - cy_mm;
      const double x = static_cast<double>(w) * spacing[2] - cx_mm;
      double acc = 0.0;
      for (int j = 0; j < n_beams; ++j) {
        const double theta = static_cast<double>(j) * std::acos(-1.0) / n_beams;
        const double rho = -std::sin(theta) * y + std::cos(theta) * x;
        acc += std::exp(-rho * rho / (2.0 * sigma_b * sigma_b));
      }
      field[i] = acc;
      peak = std::max(peak, acc);
    }
  }
  for (auto& x : field) x /= peak;
  return field;
}

}  // namespace

void PhantomSpec::validate() const {
  if (grid.size() != 3 || grid[0] < 2 || grid[1] < 2 || grid[2] < 2) {
    throw std::invalid_argument("phantom: grid must be [D,H,W] with extents of at least 2, got " +
                                shape_str(grid));
  }
  for (double s : spacing_mm) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument("phantom: spacing must be positive and finite");
    }
  }
  if (!(prescription_gy > 0.0) || !std::isfinite(prescription_gy)) {
    throw std::invalid_argument("phantom: prescription must be positive");
  }
  if (!(falloff_sigma_mm > 0.0) || !std::isfinite(falloff_sigma_mm)) {
    throw std::invalid_argument("phantom: falloff sigma must be positive");
  }
  if (n_beams < 0) throw std::invalid_argument("phantom: beam count must be non-negative");
  ellipsoid_in_grid(ptv, "ptv", grid);
  for (const auto& oar : oars) {
    if (oar.label.empty()) throw std::invalid_argument("phantom: structures need labels");
    ellipsoid_in_grid(oar.shape, oar.label, grid);
  }
}

PhantomSpec default_phantom_spec(std::uint64_t seed, const Shape& grid) {
  if (grid.size() != 3) {
    throw std::invalid_argument("phantom: grid must be [D,H,W], got " + shape_str(grid));
  }
  const double zu = static_cast<double>(grid[0]) / 8.0;
  const double yu = static_cast<double>(grid[1]) / 64.0;
  const double xu = static_cast<double>(grid[2]) / 64.0;
  const double cz = static_cast<double>(grid[0] - 1) / 2.0;
  const double cy = static_cast<double>(grid[1] - 1) / 2.0;
  const double cx = static_cast<double>(grid[2] - 1) / 2.0;

  PhantomSpec spec;
  spec.seed = seed;
  spec.grid = grid;

  Prng rng(mix_seed(seed, 0));
  spec.ptv.radii = {0.35 * static_cast<double>(grid[0] - 1) * rng.uniform(0.9, 1.1),
                    9.0 * yu * rng.uniform(0.9, 1.1), 9.0 * xu * rng.uniform(0.9, 1.1)};
  spec.ptv.center = {cz + rng.uniform(-0.5, 0.5) * zu, cy + rng.uniform(-2.0, 2.0) * yu,
                     cx + rng.uniform(-2.0, 2.0) * xu};

  struct OarLayout {
    const char* label;
    double off_y, off_x;
    double rz, ry, rx;
  };
  const OarLayout layout[] = {
      {"bladder", -22.0, 0.0, 2.2, 7.0, 8.0},
      {"femur_l", 2.0, -22.0, 2.2, 6.0, 6.0},
      {"femur_r", 2.0, 22.0, 2.2, 6.0, 6.0},
      {"small_intestine", 22.0, -6.0, 2.2, 7.0, 9.0},
      {"rectum", 19.0, 10.0, 2.0, 4.0, 4.0},
  };
  for (const OarLayout& o : layout) {
    LabeledEllipsoid e;
    e.label = o.label;
    e.shape.center = {cz + rng.uniform(-0.5, 0.5) * zu,
                      cy + (o.off_y + rng.uniform(-2.0, 2.0)) * yu,
                      cx + (o.off_x + rng.uniform(-2.0, 2.0)) * xu};
    e.shape.radii = {o.rz * zu, o.ry * yu, o.rx * xu};
    spec.oars.push_back(std::move(e));
  }
  return spec;
}

Volume distance_transform(const MaskVolume& mask, const std::array<double, 3>& spacing_mm) {
  validate_mask(mask);
  for (double s : spacing_mm) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw std::invalid_argument("distance_transform: spacing must be positive and finite");
    }
  }
  if (mask_voxel_count(mask) == 0) {
    throw std::invalid_argument("distance_transform: empty mask");
  }

  const std::int64_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
  const std::size_t numel = static_cast<std::size_t>(D * H * W);
  std::vector<double> sq(numel);
  for (std::size_t i = 0; i < numel; ++i) sq[i] = mask.values[i] ? 0.0 : kInf;

  const int max_n = static_cast<int>(std::max({D, H, W}));
  std::vector<double> f(static_cast<std::size_t>(max_n)), d(static_cast<std::size_t>(max_n));
  std::vector<int> v(static_cast<std::size_t>(max_n));
  std::vector<double> z(static_cast<std::size_t>(max_n) + 1);

  // pass along W: lines indexed by (d,h)
  for (std::int64_t dh = 0; dh < D * H; ++dh) {
    double* row = sq.data() + dh * W;
    dt1d(row, d.data(), v.data(), z.data(), static_cast<int>(W), spacing_mm[2] * spacing_mm[2]);
    std::copy(d.data(), d.data() + W, row);
  }
  // pass along H: lines indexed by (d,w)
  for (std::int64_t dd = 0; dd < D; ++dd) {
    for (std::int64_t w = 0; w < W; ++w) {
      double* col = sq.data() + dd * H * W + w;
      for (std::int64_t h = 0; h < H; ++h) f[static_cast<std::size_t>(h)] = col[h * W];
      dt1d(f.data(), d.data(), v.data(), z.data(), static_cast<int>(H),
           spacing_mm[1] * spacing_mm[1]);
      for (std::int64_t h = 0; h < H; ++h) col[h * W] = d[static_cast<std::size_t>(h)];
    }
  }
  // pass along D: lines indexed by (h,w)
  for (std::int64_t hw = 0; hw < H * W; ++hw) {
    double* col = sq.data() + hw;
    for (std::int64_t dd = 0; dd < D; ++dd) f[static_cast<std::size_t>(dd)] = col[dd * H * W];
    dt1d(f.data(), d.data(), v.data(), z.data(), static_cast<int>(D),
         spacing_mm[0] * spacing_mm[0]);
    for (std::int64_t dd = 0; dd < D; ++dd) col[dd * H * W] = d[static_cast<std::size_t>(dd)];
  }

  Volume out;
  out.shape = mask.shape;
  out.spacing_mm = spacing_mm;
  out.values.resize(numel);
  for (std::size_t i = 0; i < numel; ++i) out.values[i] = static_cast<float>(std::sqrt(sq[i]));
  return out;
}

PhantomSample generate(const PhantomSpec& spec) {
  spec.validate();

  PhantomSample sample;
  sample.masks.reserve(1 + spec.oars.size());
  sample.masks.push_back(rasterize(spec.ptv, "ptv", spec.grid, spec.spacing_mm));
  const MaskVolume& ptv = sample.masks.front();
  if (mask_voxel_count(ptv) == 0) {
    throw std::invalid_argument("phantom: the target rasterizes to an empty mask");
  }
  for (const auto& oar : spec.oars) {
    MaskVolume m = rasterize(oar.shape, oar.label, spec.grid, spec.spacing_mm);
    for (std::size_t i = 0; i < m.values.size(); ++i) {
      if (m.values[i] && ptv.values[i]) {
        throw std::invalid_argument("phantom: structure '" + oar.label + "' overlaps the target");
      }
    }
    sample.masks.push_back(std::move(m));
  }

  const std::int64_t D = spec.grid[0], H = spec.grid[1], W = spec.grid[2];
  const std::size_t numel = static_cast<std::size_t>(D * H * W);

  // analytic dose: prescription inside the target, falloff plus beams outside
  const Volume dist = distance_transform(ptv, spec.spacing_mm);
  double cy_mm = 0.0, cx_mm = 0.0;
  std::int64_t ptv_n = 0;
  {
    std::size_t i = 0;
    for (std::int64_t dd = 0; dd < D; ++dd) {
      for (std::int64_t h = 0; h < H; ++h) {
        for (std::int64_t w = 0; w < W; ++w, ++i) {
          if (!ptv.values[i]) continue;
          cy_mm += static_cast<double>(h) * spec.spacing_mm[1];
          cx_mm += static_cast<double>(w) * spec.spacing_mm[2];
          ++ptv_n;
        }
      }
    }
    cy_mm /= static_cast<double>(ptv_n);
    cx_mm /= static_cast<double>(ptv_n);
  }
  const std::vector<double> beam = beam_field(spec.grid, spec.spacing_mm, cy_mm, cx_mm,
                                              spec.n_beams);

  sample.dose.shape = spec.grid;
  sample.dose.spacing_mm = spec.spacing_mm;
  sample.dose.values.resize(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    if (ptv.values[i]) {
      sample.dose.values[i] = static_cast<float>(spec.prescription_gy);
    } else {
      const double falloff = std::exp(-static_cast<double>(dist.values[i]) /
                                      spec.falloff_sigma_mm);
      const double b = beam[i % static_cast<std::size_t>(H * W)];
      sample.dose.values[i] = static_cast<float>(
          spec.prescription_gy * (kFalloffWeight * falloff + (1.0 - kFalloffWeight) * b));
    }
  }

  // CT-like field: smooth noise with elevated intensity inside bone
  Prng rng(mix_seed(spec.seed, 1));
  sample.ct.shape = spec.grid;
  sample.ct.spacing_mm = spec.spacing_mm;
  sample.ct.values = smooth_noise(rng, spec.grid);
  for (std::size_t s = 0; s < sample.masks.size(); ++s) {
    const MaskVolume& m = sample.masks[s];
    if (m.label != "femur_l" && m.label != "femur_r") continue;
    for (std::size_t i = 0; i < numel; ++i) {
      if (m.values[i]) sample.ct.values[i] = std::min(1.0f, sample.ct.values[i] + 0.35f);
    }
  }
  return sample;
}

std::array<int, 3> make_dataset(int n, std::uint64_t base_seed, const std::string& out_dir,
                                const Shape& grid, const std::array<int, 3>& split) {
  if (n < 1) throw std::invalid_argument("make_dataset: need at least one sample");
  for (int s : split) {
    if (s < 0) throw std::invalid_argument("make_dataset: split counts must be non-negative");
  }
  const long total = static_cast<long>(split[0]) + split[1] + split[2];
  if (total <= 0) throw std::invalid_argument("make_dataset: split must not be all zero");

  const int n_train = static_cast<int>(
      std::lround(static_cast<double>(n) * split[0] / static_cast<double>(total)));
  int n_val = static_cast<int>(
      std::lround(static_cast<double>(n) * split[1] / static_cast<double>(total)));
  n_val = std::min(n_val, n - n_train);
  const int n_test = n - n_train - n_val;
  if (n_val == 0 || n_test == 0) {
    std::fprintf(stderr, "warning: %d samples leave an empty validation or test split\n", n);
  }

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw io_error("make_dataset: cannot create '" + out_dir + "': " + ec.message());

  // the prescription is uniform across samples, so generate one spec up front
  const double prescription = PhantomSpec{}.prescription_gy;

  std::mutex fail_mutex;
  std::exception_ptr failure;
  parallel_for(n, worker_threads(), [&](std::int64_t i) {
    try {
      char name[16];
      std::snprintf(name, sizeof(name), "s%04d", static_cast<int>(i));
      const fs::path dir = fs::path(out_dir) / name;
      fs::create_directories(dir);
      const PhantomSample sample = generate(
          default_phantom_spec(base_seed + static_cast<std::uint64_t>(i), grid));
      write_volume((dir / "ct.dvol").string(), sample.ct);
      write_volume((dir / "dose.dvol").string(), sample.dose);
      for (const MaskVolume& m : sample.masks) {
        write_mask((dir / (m.label + ".dmask")).string(), m);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(fail_mutex);
      if (!failure) failure = std::current_exception();
    }
  });
  if (failure) std::rethrow_exception(failure);

  std::ofstream manifest(fs::path(out_dir) / "manifest.txt", std::ios::trunc);
  if (!manifest) throw io_error("make_dataset: cannot write the manifest in '" + out_dir + "'");
  char pbuf[64];
  std::snprintf(pbuf, sizeof(pbuf), "%.9g", prescription);
  manifest << "# prescription_gy=" << pbuf << "\n";
  const char* kStructures[] = {"ptv",
                               "bladder",
                               "femur_l",
                               "femur_r",
                               "small_intestine",
                               "rectum"};
  for (int i = 0; i < n; ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "s%04d", i);
    const char* part = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    manifest << name << ' ' << part << ' ' << name << "/ct.dvol " << name << "/dose.dvol";
    for (const char* s : kStructures) manifest << ' ' << name << '/' << s << ".dmask";
    manifest << "\n";
  }
  if (!manifest.flush()) {
    throw io_error("make_dataset: cannot write the manifest in '" + out_dir + "'");
  }
  return {n_train, n_val, n_test};
}

}  // namespace aranet
