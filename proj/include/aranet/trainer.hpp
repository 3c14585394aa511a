#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "aranet/dosimetry.hpp"
#include "aranet/losses.hpp"
#include "aranet/model.hpp"
#include "aranet/volume.hpp"

// Alternating adversarial training over 2D dose slices, plus the dataset
// plumbing around it: manifest parsing, slice extraction, Adam, checkpoint
// save/resume, and volume-level evaluation. Training is single threaded and
// every source of randomness derives from (seed, step), so a fixed seed
// reproduces checkpoints bit for bit and a resumed run continues the exact
// trajectory of an uninterrupted one.

namespace aranet {

enum class Arm { unet, aunet, raunet, full };

// Switch tuple implied by an ablation arm. Deep-supervision heads stay in the
// architecture for every arm; the raunet arm supervises the final scale only
// by zeroing lambda3, which provably zeroes the head gradients.
struct ArmSwitches {
  bool attention_enabled = true;
  bool residual_enabled = true;
  float lambda2 = 1.0f;
  float lambda3 = 0.5f;
};

ArmSwitches ablation_arm(Arm arm);
Arm parse_arm(const std::string& name);
const char* arm_name(Arm arm);

struct TrainConfig {
  ArchConfig arch;      // defaults: 7 input channels, base 16, depth 4, 64x64
  LossWeights weights;  // lambda2 and lambda3 are overwritten by the arm
  Arm arm = Arm::full;
  double lr = 1e-3;  // desk-scale default; the published setting is 1e-5
  int batch_size = 2;
  std::int64_t steps = 500;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

// Copy of cfg with the arm's switches applied to arch and weights.
TrainConfig resolve_arm(TrainConfig cfg);

// ---------------------------------------------------------------------------
// dataset plumbing

struct SampleFiles {
  std::string id;
  std::string split;  // train | val | test
  std::string ct;
  std::string dose;
  std::vector<std::string> masks;  // target first, paths relative to root
};

struct Manifest {
  std::string root;
  double prescription_gy = 0.0;
  std::vector<SampleFiles> samples;
};

// Parses <dir>/manifest.txt. Malformed lines raise io_error.
Manifest read_manifest(const std::string& dir);

// 2D training slices: x stacks [CT, target, organ masks] per z index, y is
// the dose slice divided by the prescription.
struct SlicePool {
  std::vector<TensorF> x;  // each [in_channels, H, W]
  std::vector<TensorF> y;  // each [1, H, W]
};

SlicePool load_slices(const Manifest& mf, const std::string& split);

// ---------------------------------------------------------------------------
// training

struct AdamSlots {
  std::vector<TensorF> m;
  std::vector<TensorF> v;
  std::int64_t t = 0;
};

// One decoupled Adam update; moments stored f32, arithmetic in f64.
void adam_step(std::vector<NamedParam<float>>& params, AdamSlots& slots, double lr, double beta1,
               double beta2, double eps);

class Trainer {
 public:
  // cfg.arm is resolved into arch switches and loss weights here
  Trainer(const TrainConfig& cfg, SlicePool pool);

  // One critic update on detached fakes followed by one generator update.
  // The unet arm (lambda2 = 0) skips the critic entirely. Throws
  // std::runtime_error with the step index and the last finite report when a
  // loss turns non-finite.
  LossReport step();

  std::int64_t completed_steps() const { return step_; }
  const std::vector<LossReport>& history() const { return history_; }
  const TrainConfig& config() const { return cfg_; }
  double prescription_gy() const { return prescription_gy_; }
  void set_prescription_gy(double p) { prescription_gy_ = p; }

  PreNet<float>& generator() { return gen_; }
  const PreNet<float>& generator() const { return gen_; }
  AdvNet<float>& critic();  // throws when the arm trains without one

  // Frozen checkpoint layout: meta.* tensors (format, arch, weights, train
  // counters with the seed and lr as exact bit chunks, prescription), then
  // g.* / d.* parameters and opt_g.* / opt_d.* moments, in registration
  // order. Resume restores every one of them.
  void save(const std::string& path) const;
  static Trainer resume(const std::string& path, SlicePool pool);

 private:
  Trainer(const TrainConfig& resolved_cfg, SlicePool pool, bool from_checkpoint);

  static void adam_step_init(AdamSlots& slots, const std::vector<NamedParam<float>>& params);
  void batch_for_step(std::int64_t step, TensorF& xb, TensorF& yb) const;
  LossReport step_body();

  TrainConfig cfg_;
  SlicePool pool_;
  PreNet<float> gen_;
  std::unique_ptr<AdvNet<float>> critic_;
  AdamSlots opt_g_;
  AdamSlots opt_d_;
  std::int64_t step_ = 0;
  std::vector<LossReport> history_;
  LossReport last_finite_{};
  bool has_finite_ = false;
  double prescription_gy_ = 0.0;
};

// step,total,l_g,l_final,l_ds,l_adv_g,l_adv_d
void write_loss_csv_header(std::ostream& out);
void append_loss_csv(std::ostream& out, std::int64_t step, const LossReport& r);

// Generator-only view of a checkpoint, for inference without a slice pool.
// Optimizer and critic tensors are ignored.
struct LoadedGenerator {
  ArchConfig arch;
  PreNet<float> net;
  double prescription_gy = 0.0;
};

LoadedGenerator load_generator(const std::string& path);

// ---------------------------------------------------------------------------
// evaluation

// Runs the generator slice by slice, multiplies by the prescription, and
// clamps negatives to zero.
Volume predict_volume(const PreNet<float>& gen, const Volume& ct,
                      const std::vector<MaskVolume>& masks, double prescription_gy);

struct StructurePair {
  StructureMetrics truth;
  StructureMetrics pred;
};

struct SampleEval {
  std::string id;
  std::vector<StructurePair> structures;  // target first, manifest order
};

struct CohortEval {
  std::vector<SampleEval> samples;
  // mean |truth - pred| / pred * 100 of the target metrics over the cohort
  double ape_d95 = 0.0;
  double ape_d50 = 0.0;
  double ape_dmean = 0.0;
};

// Evaluates every sample of the split; parallel over samples (ARANET_THREADS).
CohortEval evaluate_split(const PreNet<float>& gen, const Manifest& mf, const std::string& split,
                          double prescription_gy, double vx_gy = 50.0);

}  // namespace aranet
