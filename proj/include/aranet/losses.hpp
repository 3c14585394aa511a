#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aranet/ops.hpp"
#include "aranet/tensor.hpp"

// Training objective: a robust voxelwise term on the full-resolution output,
// squared-error terms on the coarse auxiliary heads against pooled targets,
// and least-squares adversarial terms over critic scores.

namespace aranet {

struct LossWeights {
  float lambda1 = 2.0f;  // weight of the reconstruction group
  float lambda2 = 1.0f;  // weight of the adversarial generator term
  float lambda3 = 0.5f;  // weight of the auxiliary-head group inside the reconstruction group
  float delta = 1.0f;    // quadratic-to-linear crossover of the robust term

  void validate() const {
    if (lambda1 < 0.0f || lambda2 < 0.0f || lambda3 < 0.0f) {
      throw std::invalid_argument("loss weights must be non-negative");
    }
    if (!(delta > 0.0f)) {
      throw std::invalid_argument("loss delta must be positive");
    }
  }
};

// Per-step scalar summary; total and l_g satisfy the weighting identities
// total = lambda1*l_g + lambda2*l_adv_g and l_g = l_final + lambda3*l_ds
// up to f32 rounding.
struct LossReport {
  float total = 0.0f;
  float l_g = 0.0f;
  float l_final = 0.0f;
  float l_ds = 0.0f;
  float l_adv_g = 0.0f;
  float l_adv_d = 0.0f;
};

template <typename T>
Tensor<T> mean_squared_error(const Tensor<T>& pred, const Tensor<T>& target) {
  return mean_all(mul(sub(pred, target), sub(pred, target)));
}

// Mean robust penalty of the voxelwise residual: quadratic inside the delta
// band, linear outside.
template <typename T>
Tensor<T> smooth_l1_loss(const Tensor<T>& pred, const Tensor<T>& target, T delta) {
  return mean_all(huber(sub(pred, target), delta));
}

// Ground truth rescaled to each auxiliary scale: element k is the input
// pooled k+1 times.
template <typename T>
std::vector<Tensor<T>> downscale_pyramid(const Tensor<T>& y, std::int64_t scales) {
  if (scales < 1) throw std::invalid_argument("downscale_pyramid: scales must be >= 1");
  std::vector<Tensor<T>> out;
  out.reserve(static_cast<std::size_t>(scales));
  Tensor<T> cur = y;
  for (std::int64_t k = 0; k < scales; ++k) {
    cur = avgpool2x(cur);
    out.push_back(cur);
  }
  return out;
}

// Sum over scales of the mean squared error between each auxiliary head and
// its same-shape rescaled target.
template <typename T>
Tensor<T> deep_supervision_loss(const std::vector<Tensor<T>>& heads, const std::vector<Tensor<T>>& targets) {
  if (heads.empty()) throw std::invalid_argument("deep_supervision_loss: no heads given");
  if (heads.size() != targets.size()) {
    throw std::invalid_argument("deep_supervision_loss: " + std::to_string(heads.size()) + " heads vs " +
                                std::to_string(targets.size()) + " targets");
  }
  Tensor<T> total;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    if (heads[k].shape() != targets[k].shape()) {
      throw std::invalid_argument("deep_supervision_loss: scale " + std::to_string(k + 1) + " has head " +
                                  shape_str(heads[k].shape()) + " vs target " +
                                  shape_str(targets[k].shape()));
    }
    Tensor<T> term = mean_squared_error(heads[k], targets[k]);
    total = k == 0 ? term : add(total, term);
  }
  return total;
}

// Least-squares critic objective: real scores pulled to 1, fake scores to 0.
template <typename T>
Tensor<T> adv_loss_d(const Tensor<T>& scores_real, const Tensor<T>& scores_fake) {
  Tensor<T> dr = add_scalar(scores_real, T(-1));
  return add(mean_all(mul(dr, dr)), mean_all(mul(scores_fake, scores_fake)));
}

// Generator side of the same objective: fake scores pulled to 1.
template <typename T>
Tensor<T> adv_loss_g(const Tensor<T>& scores_fake) {
  Tensor<T> df = add_scalar(scores_fake, T(-1));
  return mean_all(mul(df, df));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> adversarial_losses(const Tensor<T>& scores_real,
                                                   const Tensor<T>& scores_fake) {
  if (!scores_real.defined() || !scores_fake.defined() || scores_real.numel() == 0 ||
      scores_fake.numel() == 0) {
    throw std::invalid_argument("adversarial_losses: empty score batch");
  }
  return {adv_loss_d(scores_real, scores_fake), adv_loss_g(scores_fake)};
}

template <typename T>
Tensor<T> total_generator_loss(const Tensor<T>& l_final, const Tensor<T>& l_ds, const Tensor<T>& l_adv_g,
                               const LossWeights& w) {
  w.validate();
  Tensor<T> recon = add(l_final, scalar_mul(l_ds, static_cast<T>(w.lambda3)));
  return add(scalar_mul(recon, static_cast<T>(w.lambda1)), scalar_mul(l_adv_g, static_cast<T>(w.lambda2)));
}

}  // namespace aranet
