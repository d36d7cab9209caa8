#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "tfsdiff/rng.hpp"
#include "tfsdiff/tensor.hpp"

namespace tfsdiff {

enum class ScheduleKind { kLinear };

/// Forward-process coefficients. Indices run 1..T; gamma(0) == 1 is the
/// noise-free convention. gamma_t is the cumulative product of alpha_s for
/// s <= t, i.e. the surviving signal variance at step t.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> betas);

  std::size_t steps() const { return betas_.size(); }
  double beta(std::size_t t) const;
  double alpha(std::size_t t) const;
  double gamma(std::size_t t) const;
  /// beta_t (1 - gamma_{t-1}) / (1 - gamma_t); zero at t = 1.
  double posterior_variance(std::size_t t) const;

  std::span<const double> betas() const { return betas_; }
  std::span<const double> gammas() const { return gammas_; }

 private:
  void check_step(std::size_t t, std::size_t lo) const;

  std::vector<double> betas_;
  std::vector<double> gammas_;  // length T+1, gammas_[0] = 1
};

NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end,
                             ScheduleKind kind = ScheduleKind::kLinear);

/// Conditional noise predictor eps_theta plus its conditioning stage.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;

  /// Conditioning features z from an upsampled modality stack [N,3,H,W]
  /// in [-1, 1].
  virtual Tensor condition(const Tensor& modalities) const = 0;

  /// Predicted noise for the latent `noisy` [N,3,H,W] given z and each batch
  /// item's gamma_t.
  virtual Tensor predict_noise(const Tensor& z, const Tensor& noisy,
                               std::span<const double> gamma) const = 0;
};

struct DiffusionState {
  Tensor image;      // I_t, [N,3,H,W]
  std::size_t t = 0;
  Tensor condition;  // z, [N,3,H,W]
};

/// sqrt(gamma) * clean + sqrt(1 - gamma) * eps.
Tensor q_sample_at(const Tensor& clean, double gamma, const Tensor& eps);
/// q_sample at schedule step t in [0, T].
Tensor q_sample(const Tensor& clean, std::size_t t, const Tensor& eps,
                const NoiseSchedule& schedule);
/// Batched form: item n is corrupted to step steps[n].
Tensor q_sample(const Tensor& clean, std::span<const std::size_t> steps, const Tensor& eps,
                const NoiseSchedule& schedule);

/// Inverse of q_sample given a noise estimate, optionally clamped to [-1, 1].
Tensor predict_x0(const Tensor& noisy, const Tensor& eps_hat, double gamma, bool clamp = true);
Tensor predict_x0(const Tensor& noisy, const Tensor& eps_hat, std::span<const double> gamma,
                  bool clamp = true);

/// One ancestral step t -> t-1 with explicit injected noise (ignored at t = 1).
DiffusionState p_sample_step(const DiffusionState& state, const NoisePredictor& net,
                             const NoiseSchedule& schedule, const Tensor& noise);
/// One ancestral step drawing the injected noise from `rng` (nothing is drawn
/// at t = 1).
DiffusionState p_sample_step(const DiffusionState& state, const NoisePredictor& net,
                             const NoiseSchedule& schedule, Rng& rng);

struct SamplerOptions {
  std::size_t scale = 4;
  std::vector<std::size_t> allowed_scales{2, 4, 8};
  /// Called after every reverse step with the step index just completed.
  std::function<void(std::size_t t)> on_step;
};

/// Upsamples the low-resolution modalities x, y, s ([1,h,w] in [0,1]) by
/// options.scale, conditions, runs the reverse chain from T to 1 starting
/// at I_T ~ N(0, I) and returns the fused estimate [3,H,W] in [0,1].
Tensor sample_fusion(const Tensor& x, const Tensor& y, const Tensor& s,
                     const NoisePredictor& net, const NoiseSchedule& schedule, Rng& rng,
                     const SamplerOptions& options = {});

/// Upsampled, [-1,1]-normalized modality stack [1,3,H,W] used as the
/// conditioning input for a low-resolution triple.
Tensor conditioning_stack(const Tensor& x, const Tensor& y, const Tensor& s,
                          std::size_t out_h, std::size_t out_w);

/// Network-ready training pairs: modality stacks and targets, both
/// [B,3,H,W] in [-1,1].
struct TrainingBatch {
  Tensor modalities;
  Tensor target;
};

/// One draw of the noise-prediction objective. All fields come from a single
/// (t, eps) draw so auxiliary losses can reuse them.
struct ObjectiveDraw {
  std::vector<std::size_t> steps;
  std::vector<double> gamma;
  Tensor eps;
  Tensor noisy;
  Tensor eps_hat;
  Tensor loss;  // mean squared error between eps and eps_hat
};

/// Draws t ~ U{1..T} per item, then eps ~ N(0, I) (in that order), and
/// evaluates the noise-prediction loss.
ObjectiveDraw draw_objective(const NoisePredictor& net, const TrainingBatch& batch,
                             const NoiseSchedule& schedule, Rng& rng);

inline Tensor tfs_objective(const NoisePredictor& net, const TrainingBatch& batch,
                            const NoiseSchedule& schedule, Rng& rng) {
  return draw_objective(net, batch, schedule, rng).loss;
}

}  // namespace tfsdiff
