// Acceptance gate: end-to-end checks of the numerical core, the training
// loop, and the persistence layer. Prints one [PASS]/[FAIL] line per
// criterion and exits nonzero if any criterion fails. Heavier criteria
// (overfit run, four-arm harness) train real models, so a full run takes a
// few minutes on one core.

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "aranet/dosimetry.hpp"
#include "aranet/losses.hpp"
#include "aranet/model.hpp"
#include "aranet/persist.hpp"
#include "aranet/phantom.hpp"
#include "aranet/trainer.hpp"
#include "aranet/util.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace aranet;

namespace {

// ---------------------------------------------------------------------------
// reporting scaffold

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& msg) {
  if (!cond) throw Failure(msg);
}

std::string fmt(double v, const char* spec = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return std::string(buf);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// small shared helpers

ArchConfig make_cfg(std::int64_t in_ch, std::int64_t base, std::int64_t depth, std::int64_t ds,
                    bool att, bool res, std::int64_t size) {
  ArchConfig cfg;
  cfg.in_channels = in_ch;
  cfg.base_channels = base;
  cfg.depth = depth;
  cfg.ds_scales = ds;
  cfg.attention_enabled = att;
  cfg.residual_enabled = res;
  cfg.input_size = size;
  return cfg;
}

TensorD weighted_sum(const TensorD& y, Prng& rng) {
  auto w = gradcheck::random_tensor(y.shape(), rng, 0.25, 1.75);
  w.set_requires_grad(false);
  return sum_all(mul(y, w));
}

std::vector<std::uint8_t> slurp_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spew_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), "cannot write " + path.string());
}

std::uint32_t bits(float v) { return std::bit_cast<std::uint32_t>(v); }
std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v); }

// ---------------------------------------------------------------------------
// 1. gradient finite differences

std::string criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::int64_t checked = 0;

  constexpr int kSeeds = 20;
  for (int seed = 0; seed < kSeeds; ++seed) {
    Prng rng(static_cast<std::uint64_t>(9100 + seed));

    auto take = [&](const gradcheck::FdReport& r, const char* what) {
      require(r.max_rel_err <= 1e-4,
              std::string(what) + " seed " + std::to_string(seed) + ": rel err " + fmt(r.max_rel_err));
      worst = std::max(worst, r.max_rel_err);
      checked += r.checked;
    };

    // Every loss builder re-runs per probe, so the weight stream restarts
    // from a per-seed copy to keep the objective fixed across probes.
    const Prng wseed(static_cast<std::uint64_t>(600 + seed));
    auto check_op = [&](const char* what, const std::function<TensorD()>& build,
                        const std::vector<TensorD>& leaves) {
      auto loss = [&]() {
        Prng r(wseed);
        return weighted_sum(build(), r);
      };
      take(gradcheck::check(loss, leaves), what);
    };

    // elementwise, scalar, and reduction primitives
    auto a = gradcheck::random_tensor({2, 3, 5}, rng, -1.5, 1.5);
    auto b = gradcheck::random_tensor({2, 3, 5}, rng, -1.5, 1.5);
    check_op("add", [&] { return add(a, b); }, {a, b});
    check_op("sub", [&] { return sub(a, b); }, {a, b});
    check_op("mul", [&] { return mul(a, b); }, {a, b});
    check_op("scalar_mul", [&] { return scalar_mul(a, 1.3); }, {a});
    check_op("add_scalar", [&] { return add_scalar(a, -0.7); }, {a});
    check_op("sigmoid", [&] { return sigmoid(a); }, {a});
    check_op("sum_all", [&] { return sum_all(a); }, {a});
    check_op("mean_all", [&] { return mean_all(a); }, {a});

    // activations with a kink at zero: sample clear of it
    auto k0 = gradcheck::random_tensor({2, 3, 5}, rng, -1.5, 1.5, {0.0}, 5e-3);
    check_op("relu", [&] { return relu(k0); }, {k0});
    check_op("leaky_relu", [&] { return leaky_relu(k0, 0.01); }, {k0});

    // robust penalty: quadratic-to-linear crossovers at +-delta
    auto hu = gradcheck::random_tensor({2, 3, 5}, rng, -2.5, 2.5, {-1.0, 1.0}, 5e-3);
    check_op("huber", [&] { return huber(hu, 1.0); }, {hu});

    // convolution: rotate through the distinct kernel/stride regimes the
    // networks use, including 1x1 kernels and a plane wide enough to engage
    // the streaming forward path
    struct ConvCase {
      Shape x, k;
      std::int64_t stride, pad;
    };
    static const ConvCase conv_cases[5] = {
        {{2, 3, 8, 8}, {4, 3, 3, 3}, 1, 1},
        {{1, 2, 6, 6}, {3, 2, 2, 2}, 2, 0},
        {{2, 2, 6, 6}, {2, 2, 4, 4}, 2, 1},
        {{1, 1, 5, 5}, {2, 1, 1, 1}, 1, 0},
        {{1, 1, 48, 48}, {2, 1, 3, 3}, 1, 1},
    };
    const ConvCase& cc = conv_cases[seed % 5];
    auto cx = gradcheck::random_tensor(cc.x, rng, -1.0, 1.0);
    auto ck = gradcheck::random_tensor(cc.k, rng, -1.0, 1.0);
    auto cb = gradcheck::random_tensor({cc.k[0]}, rng, -0.5, 0.5);
    check_op("conv2d", [&] { return conv2d(cx, ck, cb, cc.stride, cc.pad); }, {cx, ck, cb});

    // spatial rearrangements
    auto s4 = gradcheck::random_tensor({2, 3, 4, 4}, rng, -1.5, 1.5);
    auto s2 = gradcheck::random_tensor({2, 2, 4, 4}, rng, -1.5, 1.5);
    check_op("upsample_nearest2x", [&] { return upsample_nearest2x(s4); }, {s4});
    check_op("avgpool2x", [&] { return avgpool2x(s4); }, {s4});
    check_op("concat_channels", [&] { return concat_channels(s4, s2); }, {s4, s2});
    check_op("mean_per_sample", [&] { return mean_per_sample(s4); }, {s4});

    auto w1 = gradcheck::random_tensor({1}, rng, 0.5, 1.5);
    auto b1 = gradcheck::random_tensor({1}, rng, -0.5, 0.5);
    check_op("scalar_affine", [&] { return scalar_affine(a, w1, b1); }, {a, w1, b1});

    // Whole-network checks. A fixed-step central difference is only valid
    // when no internal pre-activation sits within the probe window of a
    // relu/leaky-relu kink, and random nets at random inputs land near one
    // about a third of the time. Each logical seed therefore carries a frozen
    // variant offset — the first shift of (net seed, input, weights) whose
    // base point is kink-clear. A genuine gradient defect fails every
    // variant, so the selection cannot mask one.
    static const int kGenVariant[kSeeds] = {0, 0, 0, 0, 0, 0, 1, 0, 0, 1,
                                            1, 0, 0, 0, 1, 0, 1, 0, 1, 0};
    static const int kCriticVariant[kSeeds] = {0, 0, 0, 1, 0, 0, 0, 0, 0, 0,
                                               0, 1, 0, 0, 0, 0, 0, 0, 0, 0};

    // full prediction network, rotating the architecture switches
    struct ArmToggle {
      bool att, res;
    };
    static const ArmToggle toggles[3] = {{true, true}, {false, false}, {false, true}};
    const ArmToggle tg = toggles[seed % 3];
    {
      const auto off = static_cast<std::uint64_t>(100 * kGenVariant[seed] + seed);
      PreNet<double> net(make_cfg(2, 2, 2, 2, tg.att, tg.res, 8), 4300 + off);
      Prng grng(9100 + off);
      auto gx = gradcheck::random_tensor({1, 2, 8, 8}, grng, -1.0, 1.0);
      const Prng gw(600 + off);
      auto loss = [&]() {
        Prng r(gw);
        auto out = net.forward(gx);
        TensorD total = weighted_sum(out.final, r);
        for (const auto& head : out.heads) total = add(total, weighted_sum(head, r));
        return total;
      };
      std::vector<TensorD> leaves{gx};
      for (const auto& p : net.params()) leaves.push_back(p.tensor);
      auto report = gradcheck::check(loss, leaves);
      require(report.checked == net.parameter_count() + gx.numel(),
              "generator leaf coverage mismatch at seed " + std::to_string(seed));
      take(report, "generator");
    }

    // full critic network
    {
      const auto off = static_cast<std::uint64_t>(100 * kCriticVariant[seed] + seed);
      AdvNet<double> critic(make_cfg(2, 2, 2, 2, true, true, 16), 5300 + off);
      Prng crng(7100 + off);
      auto cand = gradcheck::random_tensor({1, 1, 16, 16}, crng, 0.05, 1.0);
      auto cond = gradcheck::random_tensor({1, 2, 16, 16}, crng, -1.0, 1.0);
      const Prng cw(800 + off);
      auto loss = [&]() {
        Prng r(cw);
        return weighted_sum(critic.forward(cand, cond), r);
      };
      std::vector<TensorD> leaves{cand, cond};
      for (const auto& p : critic.params()) leaves.push_back(p.tensor);
      auto report = gradcheck::check(loss, leaves);
      require(report.checked == critic.parameter_count() + cand.numel() + cond.numel(),
              "critic leaf coverage mismatch at seed " + std::to_string(seed));
      take(report, "critic");
    }
  }

  const double elapsed = seconds_since(t0);
  require(elapsed <= 60.0, "suite took " + fmt(elapsed, "%.1f") + "s, budget is 60s");
  return "max rel err " + fmt(worst) + " over " + std::to_string(checked) + " derivative checks (" +
         std::to_string(kSeeds) + " seeds, " + fmt(elapsed, "%.1f") + "s)";
}

// ---------------------------------------------------------------------------
// 2. loss identities

std::string criterion_losses() {
  Prng rng(2200);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const float lf = static_cast<float>(rng.uniform(0.0, 3.0));
    const float lds = static_cast<float>(rng.uniform(0.0, 3.0));
    const float ladv = static_cast<float>(rng.uniform(0.0, 3.0));
    LossWeights w;
    w.lambda1 = static_cast<float>(rng.uniform(0.5, 4.0));
    w.lambda2 = static_cast<float>(rng.uniform(0.0, 2.0));
    w.lambda3 = static_cast<float>(rng.uniform(0.0, 1.0));

    const float total = total_generator_loss(TensorF::scalar(lf), TensorF::scalar(lds),
                                             TensorF::scalar(ladv), w)
                            .value();
    const double ref = static_cast<double>(w.lambda1) *
                           (static_cast<double>(lf) + static_cast<double>(w.lambda3) * lds) +
                       static_cast<double>(w.lambda2) * ladv;
    const double rel = std::abs(static_cast<double>(total) - ref) / std::max(std::abs(ref), 1e-12);
    worst = std::max(worst, rel);
    require(rel <= 1e-6, "weighting identity broke on tuple " + std::to_string(t) + ": rel err " + fmt(rel));
  }

  // crossover values of the robust term: quadratic branch at r=0.5, linear at r=2
  const float quad = smooth_l1_loss(TensorF::full({1}, 0.5f), TensorF::zeros({1}), 1.0f).value();
  require(std::abs(static_cast<double>(quad) - 0.125) <= 1e-7,
          "quadratic branch value " + fmt(quad, "%.9g") + ", expected 0.125");
  const float lin = smooth_l1_loss(TensorF::full({1}, 2.0f), TensorF::zeros({1}), 1.0f).value();
  require(std::abs(static_cast<double>(lin) - 1.5) <= 1e-7,
          "linear branch value " + fmt(lin, "%.9g") + ", expected 1.5");

  return "worst identity rel err " + fmt(worst) + " over 100 tuples; branch values 0.125 and 1.5 hit";
}

// ---------------------------------------------------------------------------
// 3. dosimetry vs brute-force voxel enumeration

// Counting-based references: every quantity below is re-derived by direct
// enumeration over voxels (no sorting), independent of the library's
// sorted-percentile implementation.
std::vector<double> enum_masked(const Volume& dose, const MaskVolume& mask) {
  std::vector<double> out;
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    if (mask.values[i]) out.push_back(static_cast<double>(dose.values[i]));
  }
  return out;
}

double enum_d_percentile(const Volume& dose, const MaskVolume& mask, double m) {
  const std::vector<double> vals = enum_masked(dose, mask);
  const auto k = static_cast<double>(vals.size());
  const std::set<double> candidates(vals.begin(), vals.end());
  bool found = false;
  double best = 0.0;
  for (double v : candidates) {
    std::int64_t cnt = 0;
    for (double x : vals) cnt += x >= v ? 1 : 0;
    if (100.0 * static_cast<double>(cnt) >= m * k && (!found || v > best)) {
      best = v;
      found = true;
    }
  }
  require(found, "brute-force percentile found no covering dose");
  return best;
}

double enum_v_at(const Volume& dose, const MaskVolume& mask, double x) {
  const std::vector<double> vals = enum_masked(dose, mask);
  std::int64_t cnt = 0;
  for (double v : vals) cnt += v >= x ? 1 : 0;
  return static_cast<double>(cnt) / static_cast<double>(vals.size());
}

double enum_mean(const Volume& dose, const MaskVolume& mask) {
  const std::vector<double> vals = enum_masked(dose, mask);
  double s = 0.0;
  for (double v : vals) s += v;
  return s / static_cast<double>(vals.size());
}

double enum_ci(const Volume& dose, const MaskVolume& ptv, double prescription) {
  std::int64_t tv = 0, piv = 0, ov = 0;
  for (std::size_t i = 0; i < ptv.values.size(); ++i) {
    const bool a = ptv.values[i] != 0;
    const bool b = static_cast<double>(dose.values[i]) >= prescription;
    tv += a;
    piv += b;
    ov += a && b;
  }
  if (piv == 0) return 0.0;
  return static_cast<double>(ov) * static_cast<double>(ov) /
         (static_cast<double>(tv) * static_cast<double>(piv));
}

double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-30});
}

std::string criterion_dosimetry() {
  Prng rng(3300);
  double worst_ratio = 0.0;

  for (int trial = 0; trial < 200; ++trial) {
    // random grid up to 16^3, a handful of dose levels so counting stays cheap
    Shape shape{rng.index(16) + 1, rng.index(16) + 1, rng.index(16) + 1};
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    const std::int64_t n_levels = rng.index(8) + 1;
    std::vector<double> levels;
    for (std::int64_t i = 0; i < n_levels; ++i) levels.push_back(rng.uniform(0.0, 80.0));

    Volume dose;
    dose.shape = shape;
    dose.values.resize(n);
    for (auto& v : dose.values) {
      v = static_cast<float>(levels[static_cast<std::size_t>(rng.index(n_levels))]);
    }
    MaskVolume mask;
    mask.shape = shape;
    mask.label = "ptv";
    mask.values.resize(n);
    bool any = false;
    for (auto& v : mask.values) {
      v = rng.uniform() < 0.35 ? 1 : 0;
      any = any || v;
    }
    if (!any) mask.values[static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(n)))] = 1;

    // dose percentiles select actual voxel values: exact match required
    for (double m : {2.0, 5.0, 50.0, 95.0, 98.0, 100.0}) {
      const double got = d_percentile(dose, mask, m);
      const double want = enum_d_percentile(dose, mask, m);
      require(got == want, "D" + fmt(m, "%.0f") + " " + fmt(got, "%.17g") + " != brute-force " +
                               fmt(want, "%.17g") + " on trial " + std::to_string(trial));
    }

    // ratio metrics: within 1e-9 relative of the enumeration
    auto ratio = [&](const char* what, double got, double want) {
      const double rd = rel_diff(got, want);
      worst_ratio = std::max(worst_ratio, rd);
      require(rd <= 1e-9, std::string(what) + " " + fmt(got, "%.17g") + " vs brute-force " +
                              fmt(want, "%.17g") + " on trial " + std::to_string(trial));
    };
    for (double level : levels) {
      ratio("V_x", v_at(dose, mask, level), enum_v_at(dose, mask, level));
      ratio("V_x", v_at(dose, mask, level + 0.1), enum_v_at(dose, mask, level + 0.1));
      const double p = level > 0.0 ? level : 2.5;
      ratio("CI", conformity_index(dose, mask, p), enum_ci(dose, mask, p));
    }
    ratio("D_mean", mean_dose(dose, mask), enum_mean(dose, mask));

    const double d50 = enum_d_percentile(dose, mask, 50.0);
    if (d50 > 0.0) {
      const double want =
          (enum_d_percentile(dose, mask, 2.0) - enum_d_percentile(dose, mask, 98.0)) / d50;
      ratio("HI", heterogeneity_index(dose, mask), want);
    }

    // percent error over random metric vectors vs a direct mean loop
    const std::int64_t len = rng.index(4) + 1;
    std::vector<double> truth, pred;
    for (std::int64_t i = 0; i < len; ++i) {
      truth.push_back(rng.uniform(0.5, 80.0));
      pred.push_back(rng.uniform(0.5, 80.0));
    }
    double s = 0.0;
    for (std::int64_t i = 0; i < len; ++i) {
      s += std::abs(truth[static_cast<std::size_t>(i)] - pred[static_cast<std::size_t>(i)]) /
           pred[static_cast<std::size_t>(i)];
    }
    ratio("APE", ape(truth, pred), 100.0 * s / static_cast<double>(len));
  }

  // constructed case: target of 1 voxel at prescription, one outside voxel
  // also reaching it -> overlap^2 / (1 * 2) = 0.5
  {
    Volume dose;
    dose.shape = {1, 1, 2};
    dose.values = {45.0f, 50.0f};
    MaskVolume ptv;
    ptv.shape = {1, 1, 2};
    ptv.label = "ptv";
    ptv.values = {1, 0};
    const double ci = conformity_index(dose, ptv, 45.0);
    require(ci == 0.5, "constructed conformity " + fmt(ci, "%.17g") + ", expected exactly 0.5");
  }

  // constructed case: doses 1..100 Gy, one voxel each -> (D2-D98)/D50 = (99-3)/51
  {
    Shape shape{4, 5, 5};
    std::vector<float> vals(100);
    for (int i = 0; i < 100; ++i) vals[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
    Prng shuffle(41);
    for (int i = 99; i > 0; --i) {
      std::swap(vals[static_cast<std::size_t>(i)],
                vals[static_cast<std::size_t>(shuffle.index(i + 1))]);
    }
    Volume dose;
    dose.shape = shape;
    dose.values = std::move(vals);
    MaskVolume mask;
    mask.shape = shape;
    mask.label = "ptv";
    mask.values.assign(100, 1);
    const double hi = heterogeneity_index(dose, mask);
    require(hi == (99.0 - 3.0) / 51.0,
            "constructed heterogeneity " + fmt(hi, "%.17g") + ", expected exactly (99-3)/51");
  }

  return "200 grids: percentiles exact, worst ratio rel err " + fmt(worst_ratio) +
         "; constructed CI=0.5 and HI=(99-3)/51 exact";
}

// ---------------------------------------------------------------------------
// 4. output shape law

std::string criterion_shapes() {
  int combos = 0;
  for (std::int64_t size : {std::int64_t{32}, std::int64_t{64}}) {
    for (std::int64_t depth : {std::int64_t{3}, std::int64_t{4}}) {
      PreNet<float> net(make_cfg(7, 8, depth, 3, true, true, size), 11);
      Prng rng(99);
      TensorF x({1, 7, size, size});
      for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
      auto out = net.forward(x);

      const std::string at = "size " + std::to_string(size) + " depth " + std::to_string(depth);
      require(out.final.shape() == Shape{1, 1, size, size}, at + ": final shape " + shape_str(out.final.shape()));
      require(out.heads.size() == 3, at + ": expected 3 auxiliary heads");
      for (std::int64_t i = 1; i <= 3; ++i) {
        const Shape want{1, 1, size >> i, size >> i};
        require(out.heads[static_cast<std::size_t>(i - 1)].shape() == want,
                at + ": head " + std::to_string(i) + " shape " +
                    shape_str(out.heads[static_cast<std::size_t>(i - 1)].shape()));
      }
      require(static_cast<std::int64_t>(out.attention_maps.size()) == depth,
              at + ": expected one attention map per decoder level");
      for (const auto& attn : out.attention_maps) {
        for (float v : attn.data()) {
          require(v > 0.0f && v < 1.0f, at + ": attention value " + fmt(v, "%.9g") + " outside (0,1)");
        }
      }
      ++combos;
    }
  }
  return std::to_string(combos) + " size/depth combinations: final at full scale, heads halving per "
         "scale, attention maps strictly inside (0,1)";
}

// ---------------------------------------------------------------------------
// 5. overfit run on four slices

std::string criterion_overfit(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = work / "overfit_data";
  make_dataset(1, 51, dir.string(), {4, 64, 64}, {1, 0, 0});
  const Manifest mf = read_manifest(dir.string());
  SlicePool pool = load_slices(mf, "train");
  require(pool.x.size() == 4, "expected 4 training slices, got " + std::to_string(pool.x.size()));

  TrainConfig cfg;  // defaults: full arm, lr 1e-3, batch 2, 64x64 architecture
  cfg.steps = 500;
  cfg.seed = 7;

  // fixed probe batch of all four slices for the per-scale loss terms
  const std::int64_t cs = 7 * 64 * 64;
  TensorF px({4, 7, 64, 64});
  TensorF py({4, 1, 64, 64});
  for (std::size_t i = 0; i < 4; ++i) {
    auto xs = pool.x[i].data();
    auto ys = pool.y[i].data();
    std::copy(xs.begin(), xs.end(), px.data().begin() + static_cast<std::ptrdiff_t>(i) * cs);
    std::copy(ys.begin(), ys.end(), py.data().begin() + static_cast<std::ptrdiff_t>(i) * 64 * 64);
  }
  const std::vector<TensorF> targets = downscale_pyramid(py, 3);
  auto aux_terms = [&](PreNet<float>& gen) {
    auto out = gen.forward(px);
    std::array<double, 3> t{};
    for (std::size_t k = 0; k < 3; ++k) {
      t[k] = static_cast<double>(mean_squared_error(out.heads[k], targets[k]).value());
    }
    return t;
  };

  Trainer trainer(cfg, pool);
  const LossReport first = trainer.step();
  const std::array<double, 3> aux1 = aux_terms(trainer.generator());
  float min_l_final = first.l_final;
  for (int s = 1; s < 500; ++s) {
    const LossReport r = trainer.step();
    min_l_final = std::min(min_l_final, r.l_final);
  }
  const std::array<double, 3> aux500 = aux_terms(trainer.generator());
  const double elapsed = seconds_since(t0);

  require(first.l_final > 0.0f, "first step emitted a zero reconstruction loss");
  require(static_cast<double>(min_l_final) <= 0.1 * static_cast<double>(first.l_final),
          "l_final only fell from " + fmt(first.l_final) + " to " + fmt(min_l_final) +
              " within 500 steps (needs a 90% drop)");
  for (std::size_t k = 0; k < 3; ++k) {
    require(aux500[k] < aux1[k], "auxiliary scale " + std::to_string(k + 1) + " term rose: " +
                                     fmt(aux1[k]) + " -> " + fmt(aux500[k]));
  }
  require(elapsed <= 600.0, "run took " + fmt(elapsed, "%.1f") + "s, budget is 600s");

  return "l_final " + fmt(first.l_final) + " -> " + fmt(min_l_final) + " (" +
         fmt(100.0 * (1.0 - static_cast<double>(min_l_final) / static_cast<double>(first.l_final)),
             "%.1f") +
         "% drop); all 3 auxiliary terms fell; " + fmt(elapsed, "%.0f") + "s";
}

// ---------------------------------------------------------------------------
// 6. four-arm ablation harness

std::string criterion_ablation(const fs::path& work) {
  const fs::path dir = work / "ablation_data";
  const auto counts = make_dataset(10, 61, dir.string(), {4, 32, 32}, {6, 2, 2});
  require(counts == std::array<int, 3>{6, 2, 2}, "unexpected dataset split");
  const Manifest mf = read_manifest(dir.string());
  const SlicePool pool = load_slices(mf, "train");

  for (Arm arm : {Arm::unet, Arm::aunet, Arm::raunet, Arm::full}) {
    const std::string name = arm_name(arm);
    TrainConfig cfg;
    cfg.arch.input_size = 32;
    cfg.arm = arm;
    cfg.steps = 200;
    cfg.seed = 99;

    Trainer trainer(cfg, pool);
    for (int s = 0; s < 200; ++s) {
      const LossReport r = trainer.step();
      for (float v : {r.total, r.l_g, r.l_final, r.l_ds, r.l_adv_g, r.l_adv_d}) {
        require(std::isfinite(v), name + " emitted a non-finite loss at step " + std::to_string(s + 1));
      }
      if (arm == Arm::unet) {
        require(r.l_adv_g == 0.0f && r.l_adv_d == 0.0f,
                "unet adversarial losses are not identically zero at step " + std::to_string(s + 1));
      }
    }

    // per-arm percent-error report over the held-out test split
    const CohortEval ev = evaluate_split(trainer.generator(), mf, "test", mf.prescription_gy);
    for (double v : {ev.ape_d95, ev.ape_d50, ev.ape_dmean}) {
      require(std::isfinite(v), name + ": non-finite percent error in the report");
    }
    const fs::path rp = work / ("ape_report_" + name + ".csv");
    {
      std::ofstream out(rp);
      out << "metric,ape_percent\n";
      out << "D95," << fmt(ev.ape_d95, "%.9g") << "\n";
      out << "D50," << fmt(ev.ape_d50, "%.9g") << "\n";
      out << "Dmean," << fmt(ev.ape_dmean, "%.9g") << "\n";
      require(static_cast<bool>(out), "cannot write " + rp.string());
    }
    std::ifstream in(rp);
    std::string line;
    std::getline(in, line);
    require(line == "metric,ape_percent", name + ": report header mismatch");
    for (const char* row : {"D95", "D50", "Dmean"}) {
      require(static_cast<bool>(std::getline(in, line)), name + ": report misses a row");
      const auto comma = line.find(',');
      require(comma != std::string::npos && line.substr(0, comma) == row,
              name + ": report row order broke at " + std::string(row));
      require(std::isfinite(std::stod(line.substr(comma + 1))),
              name + ": report value for " + row + " does not parse");
    }
  }
  return "unet/aunet/raunet/full x 200 steps all finite; unet adversarial column identically zero; "
         "percent-error reports written for all arms";
}

// ---------------------------------------------------------------------------
// 7. determinism, round-trips, and reader fuzzing

bool reports_bitwise_equal(const LossReport& a, const LossReport& b) {
  return bits(a.total) == bits(b.total) && bits(a.l_g) == bits(b.l_g) &&
         bits(a.l_final) == bits(b.l_final) && bits(a.l_ds) == bits(b.l_ds) &&
         bits(a.l_adv_g) == bits(b.l_adv_g) && bits(a.l_adv_d) == bits(b.l_adv_d);
}

std::string criterion_determinism(const fs::path& work) {
  const fs::path dir = work / "determinism_data";
  make_dataset(2, 71, dir.string(), {4, 32, 32}, {2, 0, 0});
  const Manifest mf = read_manifest(dir.string());
  const SlicePool pool = load_slices(mf, "train");

  TrainConfig cfg;
  cfg.arch.base_channels = 4;
  cfg.arch.depth = 2;
  cfg.arch.ds_scales = 2;
  cfg.arch.input_size = 32;
  cfg.steps = 10;
  cfg.seed = 5;

  // two identically seeded runs
  auto run = [&](const fs::path& ckpt, std::vector<LossReport>& reports, std::string& log) {
    Trainer t(cfg, pool);
    std::ostringstream csv;
    write_loss_csv_header(csv);
    for (int s = 0; s < 10; ++s) {
      reports.push_back(t.step());
      append_loss_csv(csv, s + 1, reports.back());
    }
    t.set_prescription_gy(mf.prescription_gy);
    t.save(ckpt.string());
    log = csv.str();
  };
  std::vector<LossReport> ra, rb;
  std::string log_a, log_b;
  const fs::path ckpt_a = work / "det_a.ackpt";
  const fs::path ckpt_b = work / "det_b.ackpt";
  run(ckpt_a, ra, log_a);
  run(ckpt_b, rb, log_b);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    require(reports_bitwise_equal(ra[i], rb[i]),
            "loss reports diverge at step " + std::to_string(i + 1));
  }
  require(log_a == log_b, "loss logs differ between identically seeded runs");
  const std::vector<std::uint8_t> ckpt_bytes = slurp_bytes(ckpt_a);
  require(ckpt_bytes == slurp_bytes(ckpt_b), "checkpoints differ between identically seeded runs");

  // volume and mask round-trips are bit-identical
  const fs::path sample_dose = fs::path(mf.root) / mf.samples.at(0).dose;
  const fs::path sample_mask = fs::path(mf.root) / mf.samples.at(0).masks.at(0);
  {
    const Volume v = read_volume(sample_dose.string());
    const fs::path t1 = work / "rt1.dvol";
    const fs::path t2 = work / "rt2.dvol";
    write_volume(t1.string(), v);
    const Volume v2 = read_volume(t1.string());
    require(v2.shape == v.shape && v2.spacing_mm == v.spacing_mm, "volume round-trip changed the grid");
    require(v2.values.size() == v.values.size() &&
                std::memcmp(v2.values.data(), v.values.data(), v.values.size() * sizeof(float)) == 0,
            "volume round-trip changed voxel bits");
    write_volume(t2.string(), v2);
    require(slurp_bytes(t1) == slurp_bytes(t2), "volume files differ after a second round-trip");
  }
  {
    const MaskVolume m = read_mask(sample_mask.string());
    const fs::path t1 = work / "rt1.dmask";
    const fs::path t2 = work / "rt2.dmask";
    write_mask(t1.string(), m);
    const MaskVolume m2 = read_mask(t1.string());
    require(m2.shape == m.shape && m2.label == m.label && m2.values == m.values,
            "mask round-trip changed contents");
    write_mask(t2.string(), m2);
    require(slurp_bytes(t1) == slurp_bytes(t2), "mask files differ after a second round-trip");
  }

  // resuming a checkpoint and saving again reproduces it byte for byte
  {
    Trainer resumed = Trainer::resume(ckpt_a.string(), pool);
    const fs::path again = work / "det_resumed.ackpt";
    resumed.save(again.string());
    require(slurp_bytes(again) == ckpt_bytes, "resume+save does not reproduce the checkpoint bytes");
  }

  // corrupt-one-byte fuzzing: checkpoint reads must fail on the checksum;
  // volume/mask reads may succeed (payload flips can stay valid) but any
  // failure must be a typed error, never a crash or a foreign exception
  const std::vector<std::uint8_t> dose_bytes = slurp_bytes(sample_dose);
  const std::vector<std::uint8_t> mask_bytes = slurp_bytes(sample_mask);
  Prng fuzz(20260817);
  int ckpt_cases = 0, ckpt_rejected = 0, grid_cases = 0, grid_rejected = 0, grid_parsed = 0;
  const fs::path fz_ckpt = work / "fuzz.ackpt";
  const fs::path fz_dvol = work / "fuzz.dvol";
  const fs::path fz_dmask = work / "fuzz.dmask";
  for (int i = 0; i < 1000; ++i) {
    const int kind = i % 3;
    const std::vector<std::uint8_t>& src =
        kind == 0 ? ckpt_bytes : (kind == 1 ? dose_bytes : mask_bytes);
    std::vector<std::uint8_t> buf = src;
    const auto pos = static_cast<std::size_t>(fuzz.index(static_cast<std::int64_t>(buf.size())));
    buf[pos] ^= static_cast<std::uint8_t>(1 + fuzz.index(255));
    const fs::path& target = kind == 0 ? fz_ckpt : (kind == 1 ? fz_dvol : fz_dmask);
    spew_bytes(target, buf);
    try {
      if (kind == 0) {
        ++ckpt_cases;
        (void)load_checkpoint(target.string());
        require(false, "a corrupted checkpoint parsed successfully (case " + std::to_string(i) + ")");
      } else {
        ++grid_cases;
        if (kind == 1) {
          (void)read_volume(target.string());
        } else {
          (void)read_mask(target.string());
        }
        ++grid_parsed;
      }
    } catch (const io_error&) {
      kind == 0 ? ++ckpt_rejected : ++grid_rejected;
    } catch (const std::invalid_argument&) {
      require(kind != 0, "checkpoint reader raised a validation error instead of an i/o error");
      ++grid_rejected;
    }
    // any other exception type escapes and fails the criterion
  }
  require(ckpt_rejected == ckpt_cases, "checksum missed a corrupted checkpoint");
  require(grid_rejected + grid_parsed == grid_cases, "grid fuzz accounting broke");

  return "10-step reruns, logs, and checkpoints bit-identical; round-trips bit-identical; 1000 fuzz "
         "cases: " +
         std::to_string(ckpt_rejected) + " checkpoint rejects, " + std::to_string(grid_rejected) +
         " grid rejects, " + std::to_string(grid_parsed) + " benign parses, zero crashes";
}

// ---------------------------------------------------------------------------
// 8. ground truth evaluated against itself

std::string criterion_self_evaluation(const fs::path& work) {
  const fs::path dir = work / "self_eval_data";
  make_dataset(1, 81, dir.string(), {4, 32, 32}, {1, 0, 0});
  const Manifest mf = read_manifest(dir.string());
  const SampleFiles& s = mf.samples.at(0);
  const Volume dose = read_volume((fs::path(mf.root) / s.dose).string());

  for (std::size_t k = 0; k < s.masks.size(); ++k) {
    const MaskVolume mask = read_mask((fs::path(mf.root) / s.masks[k]).string());
    const bool is_target = k == 0;
    const StructureMetrics m1 =
        compute_structure_metrics(dose, mask, is_target, mf.prescription_gy, 50.0);
    const StructureMetrics m2 =
        compute_structure_metrics(dose, mask, is_target, mf.prescription_gy, 50.0);

    require(m1.structure == m2.structure && m1.has_ci == m2.has_ci && m1.has_hi == m2.has_hi,
            mask.label + ": repeated evaluation changed the metric set");
    for (auto field : {&StructureMetrics::d_mean, &StructureMetrics::d2, &StructureMetrics::d50,
                       &StructureMetrics::d95, &StructureMetrics::d98, &StructureMetrics::v50,
                       &StructureMetrics::ci, &StructureMetrics::hi}) {
      require(bits(m1.*field) == bits(m2.*field), mask.label + ": repeated evaluation changed a value");
    }

    // percent error of the truth against itself is exactly zero
    for (auto field : {&StructureMetrics::d95, &StructureMetrics::d50, &StructureMetrics::d_mean}) {
      require(ape({m1.*field}, {m2.*field}) == 0.0, mask.label + ": self percent error is nonzero");
    }

    if (is_target) {
      require(m1.has_ci && m1.ci == 1.0,
              "target self-conformity is " + fmt(m1.ci, "%.17g") + ", expected exactly 1");
      require(m1.has_hi && bits(m1.hi) == bits(m2.hi), "target heterogeneity not reproduced");
      require(m1.hi == 0.0, "uniform target dose should give zero heterogeneity, got " +
                                fmt(m1.hi, "%.17g"));
    } else {
      require(!m1.has_ci && !m1.has_hi, mask.label + ": conformity reported for a non-target");
    }
  }
  return "truth vs itself over " + std::to_string(mf.samples.at(0).masks.size()) +
         " structures: APE 0, CI 1, HI reproduced (0 for the uniform target)";
}

// ---------------------------------------------------------------------------

struct Criterion {
  const char* name;
  std::function<std::string()> fn;
};

}  // namespace

int main() {
  const fs::path work =
      fs::temp_directory_path() / ("aranet_acceptance_" + std::to_string(::getpid()));
  std::error_code ec;
  fs::remove_all(work, ec);
  fs::create_directories(work);

  const std::vector<Criterion> criteria = {
      {"gradient finite differences", [] { return criterion_gradients(); }},
      {"loss identities", [] { return criterion_losses(); }},
      {"dosimetry brute-force equivalence", [] { return criterion_dosimetry(); }},
      {"output shape law", [] { return criterion_shapes(); }},
      {"overfit run", [&] { return criterion_overfit(work); }},
      {"four-arm ablation harness", [&] { return criterion_ablation(work); }},
      {"determinism and persistence", [&] { return criterion_determinism(work); }},
      {"self-evaluation sanity", [&] { return criterion_self_evaluation(work); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    std::string detail;
    bool ok = false;
    try {
      detail = criteria[i].fn();
      ok = true;
    } catch (const std::exception& e) {
      detail = e.what();
    } catch (...) {
      detail = "unknown exception";
    }
    if (!ok) ++failures;
    std::printf("[%s] %zu. %s: %s\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].name, detail.c_str());
    std::fflush(stdout);
  }

  fs::remove_all(work, ec);
  std::printf("acceptance: %zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failures),
              criteria.size());
  return failures == 0 ? 0 : 1;
}
