#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "aranet/dosimetry.hpp"
#include "aranet/persist.hpp"
#include "aranet/phantom.hpp"
#include "aranet/util.hpp"

using namespace aranet;
namespace fs = std::filesystem;

namespace {

// all-pairs nearest mask voxel, feasible only on tiny grids
Volume oracle_edt(const MaskVolume& m, const std::array<double, 3>& sp) {
  const std::int64_t D = m.shape[0], H = m.shape[1], W = m.shape[2];
  const std::array<double, 3> w2{sp[0] * sp[0], sp[1] * sp[1], sp[2] * sp[2]};
  std::vector<std::array<std::int64_t, 3>> set;
  std::size_t i = 0;
  for (std::int64_t d = 0; d < D; ++d) {
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w, ++i) {
        if (m.values[i]) set.push_back({d, h, w});
      }
    }
  }
  REQUIRE(!set.empty());

  Volume out;
  out.shape = m.shape;
  out.spacing_mm = sp;
  out.values.resize(m.values.size());
  i = 0;
  for (std::int64_t d = 0; d < D; ++d) {
    for (std::int64_t h = 0; h < H; ++h) {
      for (std::int64_t w = 0; w < W; ++w, ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& p : set) {
          const double dd = static_cast<double>((d - p[0]) * (d - p[0]));
          const double dh = static_cast<double>((h - p[1]) * (h - p[1]));
          const double dw = static_cast<double>((w - p[2]) * (w - p[2]));
          best = std::min(best, w2[0] * dd + w2[1] * dh + w2[2] * dw);
        }
        out.values[i] = static_cast<float>(std::sqrt(best));
      }
    }
  }
  return out;
}

MaskVolume point_mask(const Shape& grid, std::int64_t d, std::int64_t h, std::int64_t w) {
  MaskVolume m;
  m.shape = grid;
  m.label = "probe";
  m.values.assign(static_cast<std::size_t>(shape_numel(grid)), 0);
  m.values[static_cast<std::size_t>((d * grid[1] + h) * grid[2] + w)] = 1;
  return m;
}

std::size_t flat(const Shape& g, std::int64_t d, std::int64_t h, std::int64_t w) {
  return static_cast<std::size_t>((d * g[1] + h) * g[2] + w);
}

struct MaskExtents {
  std::int64_t lo[3], hi[3];
};

MaskExtents extents_of(const MaskVolume& m) {
  MaskExtents e{{m.shape[0], m.shape[1], m.shape[2]}, {-1, -1, -1}};
  std::size_t i = 0;
  for (std::int64_t d = 0; d < m.shape[0]; ++d) {
    for (std::int64_t h = 0; h < m.shape[1]; ++h) {
      for (std::int64_t w = 0; w < m.shape[2]; ++w, ++i) {
        if (!m.values[i]) continue;
        const std::int64_t c[3] = {d, h, w};
        for (int a = 0; a < 3; ++a) {
          e.lo[a] = std::min(e.lo[a], c[a]);
          e.hi[a] = std::max(e.hi[a], c[a]);
        }
      }
    }
  }
  return e;
}

struct TmpDir {
  fs::path path;
  TmpDir() {
    path = fs::temp_directory_path() / ("aranet_phantom_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string dir(const std::string& name) const { return (path / name).string(); }
};

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("distance transform matches hand geometry") {
  const Shape grid{5, 5, 5};
  const Volume d = distance_transform(point_mask(grid, 2, 2, 2), {3.0, 3.0, 3.0});

  CHECK(d.values[flat(grid, 2, 2, 2)] == 0.0f);
  CHECK(d.values[flat(grid, 2, 2, 3)] == 3.0f);  // one step along an axis
  CHECK(d.values[flat(grid, 2, 1, 2)] == 3.0f);
  CHECK(d.values[flat(grid, 1, 2, 2)] == 3.0f);
  CHECK(d.values[flat(grid, 2, 3, 3)] == static_cast<float>(std::sqrt(18.0)));
  CHECK(d.values[flat(grid, 0, 0, 0)] == static_cast<float>(std::sqrt(3.0 * 36.0)));

  // anisotropic spacing weighs each axis separately
  const Volume a = distance_transform(point_mask(grid, 2, 2, 2), {2.0, 3.0, 0.75});
  CHECK(a.values[flat(grid, 3, 2, 2)] == 2.0f);
  CHECK(a.values[flat(grid, 2, 2, 4)] == 1.5f);
  CHECK(a.values[flat(grid, 3, 3, 4)] == static_cast<float>(std::sqrt(4.0 + 9.0 + 2.25)));

  // inside a filled mask every distance is zero
  MaskVolume full;
  full.shape = {2, 3, 4};
  full.label = "full";
  full.values.assign(24, 1);
  const Volume z = distance_transform(full, {3.0, 3.0, 3.0});
  for (float x : z.values) CHECK(x == 0.0f);
}

TEST_CASE("distance transform equals the all-pairs search on small grids") {
  Prng rng(911);
  const double spacings[] = {3.0, 1.0, 2.0, 0.75, 1.25, 4.0};
  for (int trial = 0; trial < 30; ++trial) {
    MaskVolume m;
    m.shape = {rng.index(12) + 1, rng.index(12) + 1, rng.index(12) + 1};
    m.label = "probe";
    m.values.resize(static_cast<std::size_t>(shape_numel(m.shape)));
    for (auto& x : m.values) x = rng.uniform() < 0.25 ? 1 : 0;
    m.values[static_cast<std::size_t>(rng.index(shape_numel(m.shape)))] = 1;
    const std::array<double, 3> sp{spacings[rng.index(6)], spacings[rng.index(6)],
                                   spacings[rng.index(6)]};

    const Volume fast = distance_transform(m, sp);
    const Volume slow = oracle_edt(m, sp);
    REQUIRE(fast.values.size() == slow.values.size());
    for (std::size_t i = 0; i < fast.values.size(); ++i) {
      CHECK(fast.values[i] == slow.values[i]);
    }
  }
}

TEST_CASE("distance transform rejects bad input") {
  MaskVolume empty;
  empty.shape = {2, 2, 2};
  empty.label = "void";
  empty.values.assign(8, 0);
  CHECK_THROWS_WITH_AS(distance_transform(empty, {3.0, 3.0, 3.0}), doctest::Contains("empty mask"),
                       std::invalid_argument);
  const MaskVolume ok = point_mask({2, 2, 2}, 0, 0, 0);
  CHECK_THROWS_WITH_AS(distance_transform(ok, {3.0, 0.0, 3.0}), doctest::Contains("spacing"),
                       std::invalid_argument);
}

TEST_CASE("default geometry is deterministic and jittered") {
  const PhantomSpec a = default_phantom_spec(5);
  const PhantomSpec b = default_phantom_spec(5);
  const PhantomSpec c = default_phantom_spec(6);
  a.validate();
  CHECK(a.seed == 5);
  CHECK((a.grid == Shape{8, 64, 64}));
  CHECK(a.prescription_gy == 45.0);
  CHECK(a.n_beams == 7);
  REQUIRE(a.oars.size() == 5);
  CHECK(a.oars[0].label == "bladder");
  CHECK(a.oars[1].label == "femur_l");
  CHECK(a.oars[2].label == "femur_r");
  CHECK(a.oars[3].label == "small_intestine");
  CHECK(a.oars[4].label == "rectum");

  CHECK(a.ptv.center == b.ptv.center);
  CHECK(a.oars[4].shape.center == b.oars[4].shape.center);
  CHECK(a.ptv.center != c.ptv.center);

  // jitter stays inside its declared bounds
  for (int axis = 0; axis < 3; ++axis) {
    const double mid = static_cast<double>(a.grid[axis] - 1) / 2.0;
    const double span = axis == 0 ? 0.5 : 2.0;
    CHECK(std::abs(a.ptv.center[axis] - mid) <= span);
  }
  CHECK(a.ptv.radii[1] >= 9.0 * 0.9);
  CHECK(a.ptv.radii[1] <= 9.0 * 1.1);

  // every seed in a wide range yields a valid in-grid layout
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    default_phantom_spec(seed).validate();
    default_phantom_spec(seed, {8, 32, 32}).validate();
  }
}

TEST_CASE("generated volumes are deterministic in the seed") {
  const PhantomSpec spec = default_phantom_spec(42);
  const PhantomSample s1 = generate(spec);
  const PhantomSample s2 = generate(spec);
  CHECK(s1.ct.values == s2.ct.values);
  CHECK(s1.dose.values == s2.dose.values);
  REQUIRE(s1.masks.size() == s2.masks.size());
  for (std::size_t i = 0; i < s1.masks.size(); ++i) {
    CHECK(s1.masks[i].values == s2.masks[i].values);
    CHECK(s1.masks[i].label == s2.masks[i].label);
  }

  const PhantomSample other = generate(default_phantom_spec(43));
  CHECK(s1.ct.values != other.ct.values);
  CHECK(s1.dose.values != other.dose.values);
}

TEST_CASE("masks are binary, labeled, and target-disjoint") {
  const PhantomSample s = generate(default_phantom_spec(7));
  REQUIRE(s.masks.size() == 6);
  CHECK(s.masks[0].label == "ptv");
  const MaskVolume& ptv = s.masks[0];
  CHECK(mask_voxel_count(ptv) > 0);
  for (const MaskVolume& m : s.masks) {
    validate_mask(m);
    CHECK(mask_voxel_count(m) > 0);
    CHECK(m.shape == s.dose.shape);
  }
  for (std::size_t k = 1; k < s.masks.size(); ++k) {
    for (std::size_t i = 0; i < ptv.values.size(); ++i) {
      if (s.masks[k].values[i]) CHECK(ptv.values[i] == 0);
    }
  }
}

TEST_CASE("dose is the prescription inside the target and lower outside") {
  const PhantomSpec spec = default_phantom_spec(11);
  const PhantomSample s = generate(spec);
  const float p = static_cast<float>(spec.prescription_gy);
  const MaskVolume& ptv = s.masks[0];

  float dmax = 0.0f, dmin = p;
  for (std::size_t i = 0; i < s.dose.values.size(); ++i) {
    const float d = s.dose.values[i];
    dmax = std::max(dmax, d);
    dmin = std::min(dmin, d);
    if (ptv.values[i]) {
      CHECK(d == p);
    } else {
      CHECK(d < p);
    }
    CHECK(d >= 0.0f);
  }
  CHECK(dmax == p);
  CHECK(dmax <= static_cast<float>(spec.prescription_gy * 1.05));
  CHECK(dmin >= 0.0f);

  // the prescription isodose region is exactly the target
  CHECK(v_at(s.dose, ptv, spec.prescription_gy) == 1.0);
  CHECK(conformity_index(s.dose, ptv, spec.prescription_gy) == 1.0);
}

TEST_CASE("dose falls off monotonically along axis rays without beams") {
  PhantomSpec spec = default_phantom_spec(13);
  spec.n_beams = 0;
  const PhantomSample s = generate(spec);
  const MaskVolume& ptv = s.masks[0];
  const Shape& g = spec.grid;
  const MaskExtents e = extents_of(ptv);
  const std::int64_t cd = std::llround(spec.ptv.center[0]);
  const std::int64_t ch = std::llround(spec.ptv.center[1]);
  const std::int64_t cw = std::llround(spec.ptv.center[2]);

  int checked = 0;
  for (std::int64_t w = e.hi[2] + 1; w + 1 < g[2]; ++w, ++checked) {
    CHECK(s.dose.values[flat(g, cd, ch, w + 1)] < s.dose.values[flat(g, cd, ch, w)]);
  }
  for (std::int64_t w = e.lo[2] - 1; w > 0; --w, ++checked) {
    CHECK(s.dose.values[flat(g, cd, ch, w - 1)] < s.dose.values[flat(g, cd, ch, w)]);
  }
  for (std::int64_t h = e.hi[1] + 1; h + 1 < g[1]; ++h, ++checked) {
    CHECK(s.dose.values[flat(g, cd, h + 1, cw)] < s.dose.values[flat(g, cd, h, cw)]);
  }
  for (std::int64_t h = e.lo[1] - 1; h > 0; --h, ++checked) {
    CHECK(s.dose.values[flat(g, cd, h - 1, cw)] < s.dose.values[flat(g, cd, h, cw)]);
  }
  for (std::int64_t d = e.hi[0] + 1; d + 1 < g[0]; ++d, ++checked) {
    CHECK(s.dose.values[flat(g, d + 1, ch, cw)] < s.dose.values[flat(g, d, ch, cw)]);
  }
  CHECK(checked > 40);

  // beams only add dose outside the target
  PhantomSpec beamed = default_phantom_spec(13);
  const PhantomSample b = generate(beamed);
  bool raised = false;
  for (std::size_t i = 0; i < b.dose.values.size(); ++i) {
    CHECK(b.dose.values[i] >= s.dose.values[i]);
    raised = raised || b.dose.values[i] > s.dose.values[i];
  }
  CHECK(raised);
}

TEST_CASE("ct field stays in range with elevated bone intensity") {
  const PhantomSample s = generate(default_phantom_spec(17));
  for (float x : s.ct.values) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }
  double in_bone = 0.0, outside = 0.0;
  std::int64_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < s.ct.values.size(); ++i) {
    const bool bone = s.masks[2].values[i] || s.masks[3].values[i];
    (bone ? in_bone : outside) += s.ct.values[i];
    (bone ? n_in : n_out) += 1;
  }
  REQUIRE(n_in > 0);
  CHECK(in_bone / n_in > outside / n_out + 0.25);
}

TEST_CASE("invalid specs are rejected") {
  PhantomSpec spec = default_phantom_spec(1);

  PhantomSpec out_of_grid = spec;
  out_of_grid.ptv.center[2] = 62.0;
  CHECK_THROWS_WITH_AS(out_of_grid.validate(), doctest::Contains("does not fit inside the grid"),
                       std::invalid_argument);

  PhantomSpec overlapping = spec;
  overlapping.oars[0].shape.center = spec.ptv.center;
  CHECK_THROWS_WITH_AS(generate(overlapping), doctest::Contains("overlaps the target"),
                       std::invalid_argument);

  PhantomSpec bad_sigma = spec;
  bad_sigma.falloff_sigma_mm = 0.0;
  CHECK_THROWS_WITH_AS(bad_sigma.validate(), doctest::Contains("sigma"), std::invalid_argument);

  PhantomSpec bad_beams = spec;
  bad_beams.n_beams = -1;
  CHECK_THROWS_WITH_AS(bad_beams.validate(), doctest::Contains("beam count"),
                       std::invalid_argument);

  PhantomSpec bad_rx = spec;
  bad_rx.prescription_gy = -1.0;
  CHECK_THROWS_WITH_AS(bad_rx.validate(), doctest::Contains("prescription"),
                       std::invalid_argument);

  PhantomSpec bad_radii = spec;
  bad_radii.oars[2].shape.radii[1] = 0.0;
  CHECK_THROWS_WITH_AS(bad_radii.validate(), doctest::Contains("positive radii"),
                       std::invalid_argument);

  PhantomSpec bad_grid = spec;
  bad_grid.grid = {64, 64};
  CHECK_THROWS_WITH_AS(bad_grid.validate(), doctest::Contains("[D,H,W]"), std::invalid_argument);
}

TEST_CASE("datasets are split, listed, and reloadable") {
  TmpDir tmp;
  const Shape grid{8, 32, 32};
  const auto counts = make_dataset(6, 100, tmp.dir("d6"), grid);
  CHECK((counts == std::array<int, 3>{4, 1, 1}));

  std::ifstream manifest(tmp.path / "d6" / "manifest.txt");
  REQUIRE(manifest.good());
  std::string line;
  REQUIRE(std::getline(manifest, line));
  CHECK(line == "# prescription_gy=45");

  std::map<std::string, int> split_seen;
  std::vector<std::string> ids;
  while (std::getline(manifest, line)) {
    std::istringstream ss(line);
    std::string id, part;
    REQUIRE(static_cast<bool>(ss >> id >> part));
    ids.push_back(id);
    split_seen[part] += 1;
    int paths = 0;
    std::string rel;
    while (ss >> rel) {
      ++paths;
      CHECK(fs::exists(fs::path(tmp.dir("d6")) / rel));
    }
    CHECK(paths == 8);
  }
  CHECK(ids.size() == 6);
  CHECK(split_seen["train"] == 4);
  CHECK(split_seen["val"] == 1);
  CHECK(split_seen["test"] == 1);
  for (int i = 0; i < 6; ++i) {
    char want[16];
    std::snprintf(want, sizeof(want), "s%04d", i);
    CHECK(ids[static_cast<std::size_t>(i)] == want);
  }

  // files round-trip through the readers with their grid intact
  const Volume dose = read_volume(tmp.dir("d6") + "/s0000/dose.dvol");
  const MaskVolume ptv = read_mask(tmp.dir("d6") + "/s0000/ptv.dmask");
  const MaskVolume si = read_mask(tmp.dir("d6") + "/s0000/small_intestine.dmask");
  CHECK(dose.shape == grid);
  CHECK(ptv.label == "ptv");
  CHECK(si.label == "small_intestine");
  CHECK(v_at(dose, ptv, 45.0) == 1.0);

  // same base seed regenerates identical bytes
  make_dataset(6, 100, tmp.dir("again"), grid);
  CHECK(slurp(tmp.dir("d6") + "/manifest.txt") == slurp(tmp.dir("again") + "/manifest.txt"));
  CHECK(slurp(tmp.dir("d6") + "/s0002/ct.dvol") == slurp(tmp.dir("again") + "/s0002/ct.dvol"));
  CHECK(slurp(tmp.dir("d6") + "/s0002/dose.dvol") ==
        slurp(tmp.dir("again") + "/s0002/dose.dvol"));

  // a different seed changes the data
  make_dataset(6, 101, tmp.dir("other"), grid);
  CHECK(slurp(tmp.dir("d6") + "/s0002/ct.dvol") != slurp(tmp.dir("other") + "/s0002/ct.dvol"));
}

TEST_CASE("parallel generation reproduces the single-thread bytes") {
  TmpDir tmp;
  const Shape grid{8, 32, 32};
  make_dataset(5, 2024, tmp.dir("serial"), grid);

  const char* old = std::getenv("ARANET_THREADS");
  const std::string saved = old ? old : "";
  setenv("ARANET_THREADS", "4", 1);
  make_dataset(5, 2024, tmp.dir("parallel"), grid);
  if (old) {
    setenv("ARANET_THREADS", saved.c_str(), 1);
  } else {
    unsetenv("ARANET_THREADS");
  }

  for (int i = 0; i < 5; ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "s%04d", i);
    for (const char* file : {"ct.dvol", "dose.dvol", "ptv.dmask", "rectum.dmask"}) {
      CHECK(slurp(tmp.dir("serial") + "/" + name + "/" + file) ==
            slurp(tmp.dir("parallel") + "/" + name + "/" + file));
    }
  }
  CHECK(slurp(tmp.dir("serial") + "/manifest.txt") == slurp(tmp.dir("parallel") + "/manifest.txt"));
}

TEST_CASE("split proportions follow the requested ratios") {
  TmpDir tmp;
  const Shape grid{8, 32, 32};
  CHECK((make_dataset(1, 7, tmp.dir("one"), grid) == std::array<int, 3>{1, 0, 0}));
  CHECK((make_dataset(10, 7, tmp.dir("ten"), grid) == std::array<int, 3>{7, 1, 2}));
  CHECK((make_dataset(4, 7, tmp.dir("even"), grid, {1, 1, 2}) == std::array<int, 3>{1, 1, 2}));
  CHECK_THROWS_AS(make_dataset(0, 7, tmp.dir("zero"), grid), std::invalid_argument);
  CHECK_THROWS_AS(make_dataset(3, 7, tmp.dir("bad"), grid, {0, 0, 0}), std::invalid_argument);
}
