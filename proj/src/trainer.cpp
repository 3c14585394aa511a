#include "aranet/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>

#include "aranet/persist.hpp"
#include "aranet/util.hpp"

namespace aranet {

namespace {

// seed streams: 2 generator init, 3 critic init, 4+step batch sampling
// (phantom generation owns streams 0 and 1 of its own per-sample seeds)
constexpr std::uint64_t kGenInitStream = 2;
constexpr std::uint64_t kCriticInitStream = 3;
constexpr std::uint64_t kBatchStreamBase = 4;

void append_u64_chunks(std::vector<float>& out, std::uint64_t v) {
  for (int k = 0; k < 4; ++k) {
    out.push_back(static_cast<float>((v >> (16 * k)) & 0xFFFFu));
  }
}

std::uint64_t read_u64_chunks(std::span<const float> data, std::size_t at) {
  std::uint64_t v = 0;
  for (int k = 0; k < 4; ++k) {
    const double c = data[at + static_cast<std::size_t>(k)];
    if (!(c >= 0.0) || c > 65535.0 || c != std::floor(c)) {
      throw io_error("checkpoint: corrupt 16-bit chunk in metadata");
    }
    v |= static_cast<std::uint64_t>(c) << (16 * k);
  }
  return v;
}

double read_f64_chunks(std::span<const float> data, std::size_t at) {
  return std::bit_cast<double>(read_u64_chunks(data, at));
}

std::int64_t meta_int(float v, const char* what) {
  if (!std::isfinite(v) || v != std::floor(v)) {
    throw io_error(std::string("checkpoint: non-integral ") + what);
  }
  return static_cast<std::int64_t>(v);
}

}  // namespace

ArmSwitches ablation_arm(Arm arm) {
  switch (arm) {
    case Arm::unet:
      return {false, false, 0.0f, 0.5f};
    case Arm::aunet:
      return {false, false, 1.0f, 0.5f};
    case Arm::raunet:
      return {true, true, 1.0f, 0.0f};
    case Arm::full:
      return {true, true, 1.0f, 0.5f};
  }
  throw std::invalid_argument("unknown ablation arm");
}

Arm parse_arm(const std::string& name) {
  if (name == "unet") return Arm::unet;
  if (name == "aunet") return Arm::aunet;
  if (name == "raunet") return Arm::raunet;
  if (name == "full") return Arm::full;
  throw std::invalid_argument("unknown arm '" + name + "' (expected unet, aunet, raunet, full)");
}

const char* arm_name(Arm arm) {
  switch (arm) {
    case Arm::unet:
      return "unet";
    case Arm::aunet:
      return "aunet";
    case Arm::raunet:
      return "raunet";
    case Arm::full:
      return "full";
  }
  return "?";
}

void TrainConfig::validate() const {
  arch.validate();
  weights.validate();
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be at least 1");
  if (steps < 0) throw std::invalid_argument("train: step count must be non-negative");
  if (!(beta1 > 0.0) || beta1 >= 1.0 || !(beta2 > 0.0) || beta2 >= 1.0) {
    throw std::invalid_argument("train: betas must lie in (0,1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("train: eps must be positive");
}

TrainConfig resolve_arm(TrainConfig cfg) {
  const ArmSwitches sw = ablation_arm(cfg.arm);
  cfg.arch.attention_enabled = sw.attention_enabled;
  cfg.arch.residual_enabled = sw.residual_enabled;
  cfg.weights.lambda2 = sw.lambda2;
  cfg.weights.lambda3 = sw.lambda3;
  return cfg;
}

// ---------------------------------------------------------------------------
// dataset plumbing

Manifest read_manifest(const std::string& dir) {
  const std::string path = dir + "/manifest.txt";
  std::ifstream in(path);
  if (!in) throw io_error("manifest: cannot open '" + path + "'");

  Manifest mf;
  mf.root = dir;
  bool have_rx = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string key = "prescription_gy=";
      const std::size_t at = line.find(key);
      if (at != std::string::npos) {
        char* end = nullptr;
        const std::string val = line.substr(at + key.size());
        mf.prescription_gy = std::strtod(val.c_str(), &end);
        if (end == val.c_str() || *end != '\0' || !(mf.prescription_gy > 0.0) ||
            !std::isfinite(mf.prescription_gy)) {
          throw io_error("manifest: bad prescription on line " + std::to_string(lineno));
        }
        have_rx = true;
      }
      continue;
    }
    std::istringstream ss(line);
    SampleFiles s;
    std::vector<std::string> paths;
    std::string tok;
    if (!(ss >> s.id >> s.split)) {
      throw io_error("manifest: malformed line " + std::to_string(lineno));
    }
    while (ss >> tok) paths.push_back(tok);
    if (s.split != "train" && s.split != "val" && s.split != "test") {
      throw io_error("manifest: unknown split '" + s.split + "' on line " +
                     std::to_string(lineno));
    }
    if (paths.size() != 8) {
      throw io_error("manifest: expected 8 paths on line " + std::to_string(lineno) + ", got " +
                     std::to_string(paths.size()));
    }
    s.ct = paths[0];
    s.dose = paths[1];
    s.masks.assign(paths.begin() + 2, paths.end());
    mf.samples.push_back(std::move(s));
  }
  if (!have_rx) throw io_error("manifest: missing prescription_gy header");
  return mf;
}

namespace {

struct LoadedSample {
  Volume ct;
  Volume dose;
  std::vector<MaskVolume> masks;
};

LoadedSample load_sample(const Manifest& mf, const SampleFiles& s) {
  LoadedSample ls;
  ls.ct = read_volume(mf.root + "/" + s.ct);
  ls.dose = read_volume(mf.root + "/" + s.dose);
  if (ls.ct.shape != ls.dose.shape) {
    throw std::invalid_argument("sample " + s.id + ": dose grid " + shape_str(ls.dose.shape) +
                                " does not match CT grid " + shape_str(ls.ct.shape));
  }
  for (float x : ls.ct.values) {
    if (x < 0.0f || x > 1.0f) {
      throw std::invalid_argument("sample " + s.id + ": CT values must lie in [0,1]");
    }
  }
  for (float x : ls.dose.values) {
    if (x < 0.0f) throw std::invalid_argument("sample " + s.id + ": negative dose");
  }
  for (const std::string& rel : s.masks) {
    MaskVolume m = read_mask(mf.root + "/" + rel);
    require_same_grid(ls.ct, m);
    ls.masks.push_back(std::move(m));
  }
  return ls;
}

}  // namespace

SlicePool load_slices(const Manifest& mf, const std::string& split) {
  SlicePool pool;
  for (const SampleFiles& s : mf.samples) {
    if (s.split != split) continue;
    const LoadedSample ls = load_sample(mf, s);
    const std::int64_t D = ls.ct.shape[0], H = ls.ct.shape[1], W = ls.ct.shape[2];
    const std::int64_t plane = H * W;
    const std::int64_t channels = 1 + static_cast<std::int64_t>(ls.masks.size());
    for (std::int64_t z = 0; z < D; ++z) {
      TensorF x({channels, H, W});
      TensorF y({1, H, W});
      auto xd = x.data();
      auto yd = y.data();
      const std::size_t off = static_cast<std::size_t>(z * plane);
      for (std::int64_t i = 0; i < plane; ++i) {
        xd[static_cast<std::size_t>(i)] = ls.ct.values[off + static_cast<std::size_t>(i)];
        yd[static_cast<std::size_t>(i)] = static_cast<float>(
            static_cast<double>(ls.dose.values[off + static_cast<std::size_t>(i)]) /
            mf.prescription_gy);
      }
      for (std::size_t c = 0; c < ls.masks.size(); ++c) {
        const std::size_t base = (c + 1) * static_cast<std::size_t>(plane);
        for (std::int64_t i = 0; i < plane; ++i) {
          xd[base + static_cast<std::size_t>(i)] =
              static_cast<float>(ls.masks[c].values[off + static_cast<std::size_t>(i)]);
        }
      }
      pool.x.push_back(std::move(x));
      pool.y.push_back(std::move(y));
    }
  }
  if (pool.x.empty()) {
    throw std::invalid_argument("split '" + split + "' has no samples");
  }
  return pool;
}

// ---------------------------------------------------------------------------
// training

void adam_step(std::vector<NamedParam<float>>& params, AdamSlots& slots, double lr, double beta1,
               double beta2, double eps) {
  if (slots.m.empty()) {
    for (const auto& p : params) {
      slots.m.push_back(TensorF::zeros(p.tensor.shape()));
      slots.v.push_back(TensorF::zeros(p.tensor.shape()));
    }
  }
  if (slots.m.size() != params.size() || slots.v.size() != params.size()) {
    throw std::logic_error("adam: moment slots do not match the parameter list");
  }
  ++slots.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(slots.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(slots.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].tensor.ensure_grad();
    auto pd = params[i].tensor.data();
    auto g = params[i].tensor.grad();
    auto md = slots.m[i].data();
    auto vd = slots.v[i].data();
    for (std::size_t j = 0; j < pd.size(); ++j) {
      const double gj = g[j];
      const double mj = beta1 * md[j] + (1.0 - beta1) * gj;
      const double vj = beta2 * vd[j] + (1.0 - beta2) * gj * gj;
      md[j] = static_cast<float>(mj);
      vd[j] = static_cast<float>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + eps);
      pd[j] = static_cast<float>(pd[j] - update);
    }
  }
}

Trainer::Trainer(const TrainConfig& cfg, SlicePool pool)
    : Trainer(
          [&] {
            TrainConfig r = resolve_arm(cfg);
            r.validate();
            return r;
          }(),
          std::move(pool), false) {}

Trainer::Trainer(const TrainConfig& resolved_cfg, SlicePool pool, bool /*from_checkpoint*/)
    : cfg_(resolved_cfg),
      pool_(std::move(pool)),
      gen_(cfg_.arch, mix_seed(cfg_.seed, kGenInitStream)) {
  if (pool_.x.empty() || pool_.x.size() != pool_.y.size()) {
    throw std::invalid_argument("train: need a non-empty slice pool with matching targets");
  }
  const Shape& xs = pool_.x.front().shape();
  if (xs.size() != 3 || xs[0] != cfg_.arch.in_channels) {
    throw std::invalid_argument("train: slices must be [in_channels,H,W] with " +
                                std::to_string(cfg_.arch.in_channels) + " channels, got " +
                                shape_str(xs));
  }
  for (std::size_t i = 0; i < pool_.x.size(); ++i) {
    if (pool_.x[i].shape() != xs) {
      throw std::invalid_argument("train: slice shapes are inconsistent");
    }
    if (pool_.y[i].shape() != Shape{1, xs[1], xs[2]}) {
      throw std::invalid_argument("train: target shapes are inconsistent");
    }
  }

  if (cfg_.weights.lambda2 > 0.0f) {
    critic_ = std::make_unique<AdvNet<float>>(cfg_.arch, mix_seed(cfg_.seed, kCriticInitStream));
  }

  for (auto& p : gen_.params()) p.tensor.ensure_grad();
  adam_step_init(opt_g_, gen_.params());
  if (critic_) {
    for (auto& p : critic_->params()) p.tensor.ensure_grad();
    adam_step_init(opt_d_, critic_->params());
  }
}

void Trainer::adam_step_init(AdamSlots& slots, const std::vector<NamedParam<float>>& params) {
  slots.m.clear();
  slots.v.clear();
  for (const auto& p : params) {
    slots.m.push_back(TensorF::zeros(p.tensor.shape()));
    slots.v.push_back(TensorF::zeros(p.tensor.shape()));
  }
  slots.t = 0;
}

AdvNet<float>& Trainer::critic() {
  if (!critic_) throw std::logic_error("this arm trains without a critic");
  return *critic_;
}

void Trainer::batch_for_step(std::int64_t step, TensorF& xb, TensorF& yb) const {
  Prng rng(mix_seed(cfg_.seed, kBatchStreamBase + static_cast<std::uint64_t>(step)));
  const std::int64_t n = static_cast<std::int64_t>(pool_.x.size());
  const Shape& xs = pool_.x.front().shape();
  const std::int64_t nb = cfg_.batch_size;
  xb = TensorF({nb, xs[0], xs[1], xs[2]});
  yb = TensorF({nb, 1, xs[1], xs[2]});
  auto xd = xb.data();
  auto yd = yb.data();
  const std::size_t xn = static_cast<std::size_t>(xs[0] * xs[1] * xs[2]);
  const std::size_t yn = static_cast<std::size_t>(xs[1] * xs[2]);
  for (std::int64_t b = 0; b < nb; ++b) {
    const std::size_t pick = static_cast<std::size_t>(rng.index(n));
    auto xsrc = pool_.x[pick].data();
    auto ysrc = pool_.y[pick].data();
    std::copy(xsrc.begin(), xsrc.end(), xd.begin() + static_cast<std::ptrdiff_t>(b * xn));
    std::copy(ysrc.begin(), ysrc.end(), yd.begin() + static_cast<std::ptrdiff_t>(b * yn));
  }
}

LossReport Trainer::step_body() {
  TensorF xb, yb;
  batch_for_step(step_, xb, yb);
  const LossWeights& w = cfg_.weights;
  LossReport r;

  if (critic_) {
    // critic phase: detached fakes, then one Adam update on critic params
    const TensorF fake = gen_.forward(xb).final;
    for (auto& p : critic_->params()) p.tensor.zero_grad();
    Tape<float> tape;
    {
      Tape<float>::Scope scope(tape);
      const TensorF real_scores = critic_->forward(yb, xb);
      const TensorF fake_scores = critic_->forward(fake, xb);
      const TensorF l_d = adv_loss_d(real_scores, fake_scores);
      tape.backward(l_d);
      r.l_adv_d = l_d.value();
    }
    adam_step(critic_->params(), opt_d_, cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.eps);
  }

  // generator phase against the updated critic
  for (auto& p : gen_.params()) p.tensor.zero_grad();
  if (critic_) {
    for (auto& p : critic_->params()) p.tensor.zero_grad();
  }
  const std::vector<TensorF> targets = downscale_pyramid(yb, cfg_.arch.ds_scales);
  Tape<float> tape;
  {
    Tape<float>::Scope scope(tape);
    const PreNet<float>::Output out = gen_.forward(xb);
    const TensorF l_final = smooth_l1_loss(out.final, yb, w.delta);
    const TensorF l_ds = deep_supervision_loss(out.heads, targets);
    const TensorF l_adv_g =
        critic_ ? adv_loss_g(critic_->forward(out.final, xb)) : TensorF::scalar(0.0f);
    const TensorF total = total_generator_loss(l_final, l_ds, l_adv_g, w);
    tape.backward(total);
    r.total = total.value();
    r.l_final = l_final.value();
    r.l_ds = l_ds.value();
    r.l_adv_g = l_adv_g.value();
  }
  adam_step(gen_.params(), opt_g_, cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.eps);
  r.l_g = r.l_final + w.lambda3 * r.l_ds;
  return r;
}

namespace {

std::string report_line(const LossReport& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "total=%.9g l_g=%.9g l_final=%.9g l_ds=%.9g l_adv_g=%.9g l_adv_d=%.9g",
                static_cast<double>(r.total), static_cast<double>(r.l_g),
                static_cast<double>(r.l_final), static_cast<double>(r.l_ds),
                static_cast<double>(r.l_adv_g), static_cast<double>(r.l_adv_d));
  return buf;
}

bool finite_report(const LossReport& r) {
  return std::isfinite(r.total) && std::isfinite(r.l_g) && std::isfinite(r.l_final) &&
         std::isfinite(r.l_ds) && std::isfinite(r.l_adv_g) && std::isfinite(r.l_adv_d);
}

}  // namespace

LossReport Trainer::step() {
  const std::int64_t this_step = step_ + 1;  // 1-based for reporting
  auto trailer = [&] {
    return has_finite_ ? "last finite report at step " + std::to_string(step_) + ": " +
                             report_line(last_finite_)
                       : std::string("no finite report recorded");
  };
  LossReport r;
  try {
    r = step_body();
  } catch (const std::invalid_argument&) {
    throw;  // shape or config misuse, not divergence
  } catch (const std::exception& e) {
    throw std::runtime_error("training failed at step " + std::to_string(this_step) + ": " +
                             e.what() + "; " + trailer());
  }
  if (!finite_report(r)) {
    throw std::runtime_error("training diverged at step " + std::to_string(this_step) +
                             ": non-finite loss (" + report_line(r) + "); " + trailer());
  }
  ++step_;
  history_.push_back(r);
  last_finite_ = r;
  has_finite_ = true;
  return r;
}

// ---------------------------------------------------------------------------
// checkpoints

void Trainer::save(const std::string& path) const {
  NamedTensors ts;
  ts.emplace_back("meta.format", TensorF::from({1}, {1.0f}));
  ts.emplace_back(
      "meta.arch",
      TensorF::from({7}, {static_cast<float>(cfg_.arch.in_channels),
                          static_cast<float>(cfg_.arch.base_channels),
                          static_cast<float>(cfg_.arch.depth),
                          static_cast<float>(cfg_.arch.ds_scales),
                          static_cast<float>(cfg_.arch.input_size),
                          cfg_.arch.attention_enabled ? 1.0f : 0.0f,
                          cfg_.arch.residual_enabled ? 1.0f : 0.0f}));
  ts.emplace_back("meta.weights", TensorF::from({4}, {cfg_.weights.lambda1, cfg_.weights.lambda2,
                                                      cfg_.weights.lambda3, cfg_.weights.delta}));
  {
    std::vector<float> train;
    train.push_back(static_cast<float>(step_));
    train.push_back(static_cast<float>(cfg_.batch_size));
    train.push_back(static_cast<float>(static_cast<int>(cfg_.arm)));
    train.push_back(static_cast<float>(opt_g_.t));
    train.push_back(static_cast<float>(opt_d_.t));
    append_u64_chunks(train, cfg_.seed);
    append_u64_chunks(train, std::bit_cast<std::uint64_t>(cfg_.lr));
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    ts.emplace_back("meta.train", TensorF::from({n}, std::move(train)));
  }
  {
    std::vector<float> opt;
    append_u64_chunks(opt, std::bit_cast<std::uint64_t>(cfg_.beta1));
    append_u64_chunks(opt, std::bit_cast<std::uint64_t>(cfg_.beta2));
    append_u64_chunks(opt, std::bit_cast<std::uint64_t>(cfg_.eps));
    ts.emplace_back("meta.adam", TensorF::from({12}, std::move(opt)));
  }
  ts.emplace_back("meta.prescription",
                  TensorF::from({1}, {static_cast<float>(prescription_gy_)}));

  const auto& gp = gen_.params();
  for (const auto& p : gp) ts.emplace_back("g." + p.name, p.tensor);
  for (std::size_t i = 0; i < gp.size(); ++i) {
    ts.emplace_back("opt_g.m." + gp[i].name, opt_g_.m[i]);
    ts.emplace_back("opt_g.v." + gp[i].name, opt_g_.v[i]);
  }
  if (critic_) {
    const auto& dp = critic_->params();
    for (const auto& p : dp) ts.emplace_back("d." + p.name, p.tensor);
    for (std::size_t i = 0; i < dp.size(); ++i) {
      ts.emplace_back("opt_d.m." + dp[i].name, opt_d_.m[i]);
      ts.emplace_back("opt_d.v." + dp[i].name, opt_d_.v[i]);
    }
  }
  save_checkpoint(path, ts);
}

Trainer Trainer::resume(const std::string& path, SlicePool pool) {
  const NamedTensors ts = load_checkpoint(path);
  std::map<std::string, TensorF> by_name;
  for (const auto& [name, tensor] : ts) by_name.emplace(name, tensor);
  std::set<std::string> used;

  auto fetch = [&](const std::string& name, std::int64_t numel) -> TensorF {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw io_error("checkpoint: missing tensor '" + name + "'");
    if (numel >= 0 && it->second.numel() != numel) {
      throw io_error("checkpoint: tensor '" + name + "' has " +
                     std::to_string(it->second.numel()) + " values, expected " +
                     std::to_string(numel));
    }
    used.insert(name);
    return it->second;
  };

  if (meta_int(fetch("meta.format", 1).value(), "format tag") != 1) {
    throw io_error("checkpoint: unsupported layout");
  }
  const TensorF arch_t = fetch("meta.arch", 7);
  const TensorF weights_t = fetch("meta.weights", 4);
  const TensorF train_t = fetch("meta.train", 13);
  const TensorF adam_t = fetch("meta.adam", 12);
  const TensorF rx_t = fetch("meta.prescription", 1);

  TrainConfig cfg;
  {
    auto a = arch_t.data();
    cfg.arch.in_channels = meta_int(a[0], "channel count");
    cfg.arch.base_channels = meta_int(a[1], "base width");
    cfg.arch.depth = meta_int(a[2], "depth");
    cfg.arch.ds_scales = meta_int(a[3], "head count");
    cfg.arch.input_size = meta_int(a[4], "input size");
    cfg.arch.attention_enabled = a[5] != 0.0f;
    cfg.arch.residual_enabled = a[6] != 0.0f;
  }
  {
    auto wv = weights_t.data();
    cfg.weights = LossWeights{wv[0], wv[1], wv[2], wv[3]};
  }
  std::int64_t step = 0, t_g = 0, t_d = 0;
  {
    auto tv = train_t.data();
    step = meta_int(tv[0], "step counter");
    cfg.batch_size = static_cast<int>(meta_int(tv[1], "batch size"));
    const std::int64_t arm = meta_int(tv[2], "arm tag");
    if (arm < 0 || arm > 3) throw io_error("checkpoint: unknown arm tag");
    cfg.arm = static_cast<Arm>(arm);
    t_g = meta_int(tv[3], "optimizer counter");
    t_d = meta_int(tv[4], "optimizer counter");
    cfg.seed = read_u64_chunks(tv, 5);
    cfg.lr = read_f64_chunks(tv, 9);
  }
  {
    auto av = adam_t.data();
    cfg.beta1 = read_f64_chunks(av, 0);
    cfg.beta2 = read_f64_chunks(av, 4);
    cfg.eps = read_f64_chunks(av, 8);
  }
  cfg.steps = step;

  const ArmSwitches sw = ablation_arm(cfg.arm);
  if (cfg.weights.lambda2 != sw.lambda2 || cfg.weights.lambda3 != sw.lambda3) {
    throw io_error("checkpoint: loss weights disagree with the arm tag");
  }
  TrainConfig resolved = resolve_arm(cfg);
  try {
    resolved.validate();
  } catch (const std::invalid_argument& e) {
    throw io_error(std::string("checkpoint: invalid configuration: ") + e.what());
  }

  Trainer t(resolved, std::move(pool), true);
  t.step_ = step;
  t.opt_g_.t = t_g;
  t.opt_d_.t = t_d;
  t.prescription_gy_ = rx_t.value();

  auto restore = [&](const std::string& name, const TensorF& dst) {
    const TensorF src = fetch(name, dst.numel());
    auto s = src.data();
    auto d = dst.data();
    std::copy(s.begin(), s.end(), d.begin());
  };
  for (auto& p : t.gen_.params()) restore("g." + p.name, p.tensor);
  for (std::size_t i = 0; i < t.gen_.params().size(); ++i) {
    restore("opt_g.m." + t.gen_.params()[i].name, t.opt_g_.m[i]);
    restore("opt_g.v." + t.gen_.params()[i].name, t.opt_g_.v[i]);
  }
  if (t.critic_) {
    for (auto& p : t.critic_->params()) restore("d." + p.name, p.tensor);
    for (std::size_t i = 0; i < t.critic_->params().size(); ++i) {
      restore("opt_d.m." + t.critic_->params()[i].name, t.opt_d_.m[i]);
      restore("opt_d.v." + t.critic_->params()[i].name, t.opt_d_.v[i]);
    }
  }
  for (const auto& [name, tensor] : ts) {
    if (!used.count(name)) throw io_error("checkpoint: unexpected tensor '" + name + "'");
  }
  return t;
}

LoadedGenerator load_generator(const std::string& path) {
  const NamedTensors ts = load_checkpoint(path);
  std::map<std::string, const TensorF*> by_name;
  for (const auto& [name, tensor] : ts) by_name.emplace(name, &tensor);
  auto fetch = [&](const std::string& name, std::int64_t numel) -> const TensorF& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw io_error("checkpoint: missing tensor '" + name + "'");
    if (it->second->numel() != numel) {
      throw io_error("checkpoint: tensor '" + name + "' has " +
                     std::to_string(it->second->numel()) + " values, expected " +
                     std::to_string(numel));
    }
    return *it->second;
  };

  if (meta_int(fetch("meta.format", 1).value(), "format tag") != 1) {
    throw io_error("checkpoint: unsupported layout");
  }
  ArchConfig arch;
  {
    auto a = fetch("meta.arch", 7).data();
    arch.in_channels = meta_int(a[0], "channel count");
    arch.base_channels = meta_int(a[1], "base width");
    arch.depth = meta_int(a[2], "depth");
    arch.ds_scales = meta_int(a[3], "head count");
    arch.input_size = meta_int(a[4], "input size");
    arch.attention_enabled = a[5] != 0.0f;
    arch.residual_enabled = a[6] != 0.0f;
  }
  try {
    arch.validate();
  } catch (const std::invalid_argument& e) {
    throw io_error(std::string("checkpoint: invalid architecture: ") + e.what());
  }

  LoadedGenerator lg{arch, PreNet<float>(arch, 0), fetch("meta.prescription", 1).value()};
  for (auto& p : lg.net.params()) {
    const TensorF& src = fetch("g." + p.name, p.tensor.numel());
    auto s = src.data();
    auto d = p.tensor.data();
    std::copy(s.begin(), s.end(), d.begin());
  }
  return lg;
}

void write_loss_csv_header(std::ostream& out) {
  out << "step,total,l_g,l_final,l_ds,l_adv_g,l_adv_d\n";
}

void append_loss_csv(std::ostream& out, std::int64_t step, const LossReport& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                static_cast<long long>(step), static_cast<double>(r.total),
                static_cast<double>(r.l_g), static_cast<double>(r.l_final),
                static_cast<double>(r.l_ds), static_cast<double>(r.l_adv_g),
                static_cast<double>(r.l_adv_d));
  out << buf;
}

// ---------------------------------------------------------------------------
// evaluation

Volume predict_volume(const PreNet<float>& gen, const Volume& ct,
                      const std::vector<MaskVolume>& masks, double prescription_gy) {
  validate_volume(ct, false, "ct");
  if (!(prescription_gy > 0.0) || !std::isfinite(prescription_gy)) {
    throw std::invalid_argument("predict: prescription must be positive");
  }
  for (float x : ct.values) {
    if (x < 0.0f || x > 1.0f) {
      throw std::invalid_argument("predict: CT values must lie in [0,1]");
    }
  }
  for (const MaskVolume& m : masks) {
    validate_mask(m);
    require_same_grid(ct, m);
  }
  const std::int64_t D = ct.shape[0], H = ct.shape[1], W = ct.shape[2];
  const std::int64_t plane = H * W;
  const std::int64_t channels = 1 + static_cast<std::int64_t>(masks.size());

  Volume pred;
  pred.shape = ct.shape;
  pred.spacing_mm = ct.spacing_mm;
  pred.values.resize(static_cast<std::size_t>(D * plane));
  for (std::int64_t z = 0; z < D; ++z) {
    TensorF x({1, channels, H, W});
    auto xd = x.data();
    const std::size_t off = static_cast<std::size_t>(z * plane);
    for (std::int64_t i = 0; i < plane; ++i) {
      xd[static_cast<std::size_t>(i)] = ct.values[off + static_cast<std::size_t>(i)];
    }
    for (std::size_t c = 0; c < masks.size(); ++c) {
      const std::size_t base = (c + 1) * static_cast<std::size_t>(plane);
      for (std::int64_t i = 0; i < plane; ++i) {
        xd[base + static_cast<std::size_t>(i)] =
            static_cast<float>(masks[c].values[off + static_cast<std::size_t>(i)]);
      }
    }
    const TensorF out = gen.forward(x).final;
    auto od = out.data();
    for (std::int64_t i = 0; i < plane; ++i) {
      const double gy = static_cast<double>(od[static_cast<std::size_t>(i)]) * prescription_gy;
      pred.values[off + static_cast<std::size_t>(i)] =
          static_cast<float>(std::max(0.0, gy));
    }
  }
  return pred;
}

CohortEval evaluate_split(const PreNet<float>& gen, const Manifest& mf, const std::string& split,
                          double prescription_gy, double vx_gy) {
  std::vector<const SampleFiles*> picked;
  for (const SampleFiles& s : mf.samples) {
    if (s.split == split) picked.push_back(&s);
  }
  if (picked.empty()) throw std::invalid_argument("split '" + split + "' has no samples");

  CohortEval cohort;
  cohort.samples.resize(picked.size());
  std::mutex fail_mutex;
  std::exception_ptr failure;
  parallel_for(static_cast<std::int64_t>(picked.size()), worker_threads(), [&](std::int64_t i) {
    try {
      const SampleFiles& s = *picked[static_cast<std::size_t>(i)];
      const LoadedSample ls = load_sample(mf, s);
      const Volume pred = predict_volume(gen, ls.ct, ls.masks, prescription_gy);
      SampleEval ev;
      ev.id = s.id;
      for (std::size_t k = 0; k < ls.masks.size(); ++k) {
        const bool is_target = k == 0;
        StructurePair pair;
        pair.truth = compute_structure_metrics(ls.dose, ls.masks[k], is_target, prescription_gy,
                                               vx_gy);
        pair.pred = compute_structure_metrics(pred, ls.masks[k], is_target, prescription_gy,
                                              vx_gy);
        ev.structures.push_back(std::move(pair));
      }
      cohort.samples[static_cast<std::size_t>(i)] = std::move(ev);
    } catch (...) {
      std::lock_guard<std::mutex> lock(fail_mutex);
      if (!failure) failure = std::current_exception();
    }
  });
  if (failure) std::rethrow_exception(failure);

  std::vector<double> t95, p95, t50, p50, tm, pm;
  for (const SampleEval& ev : cohort.samples) {
    const StructurePair& target = ev.structures.front();
    t95.push_back(target.truth.d95);
    p95.push_back(target.pred.d95);
    t50.push_back(target.truth.d50);
    p50.push_back(target.pred.d50);
    tm.push_back(target.truth.d_mean);
    pm.push_back(target.pred.d_mean);
  }
  cohort.ape_d95 = ape(t95, p95);
  cohort.ape_d50 = ape(t50, p50);
  cohort.ape_dmean = ape(tm, pm);
  return cohort;
}

}  // namespace aranet
