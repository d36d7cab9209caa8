#include "tfsdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "tfsdiff/image.hpp"
#include "tfsdiff/ops.hpp"

namespace tfsdiff {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  require(!betas_.empty(), ErrorCode::kInvalidArgument, "noise schedule needs at least one step");
  gammas_.resize(betas_.size() + 1);
  gammas_[0] = 1.0;
  for (std::size_t t = 1; t <= betas_.size(); ++t) {
    const double b = betas_[t - 1];
    require(b > 0.0 && b < 1.0, ErrorCode::kOutOfRange,
            "beta_" + std::to_string(t) + " = " + std::to_string(b) + " outside (0, 1)");
    gammas_[t] = gammas_[t - 1] * (1.0 - b);
  }
  require(gammas_.back() > 0.0, ErrorCode::kOutOfRange, "cumulative gamma underflowed to 0");
}

void NoiseSchedule::check_step(std::size_t t, std::size_t lo) const {
  require(t >= lo && t <= steps(), ErrorCode::kOutOfRange,
          "diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
              std::to_string(steps()) + "]");
}

double NoiseSchedule::beta(std::size_t t) const {
  check_step(t, 1);
  return betas_[t - 1];
}

double NoiseSchedule::alpha(std::size_t t) const { return 1.0 - beta(t); }

double NoiseSchedule::gamma(std::size_t t) const {
  check_step(t, 0);
  return gammas_[t];
}

double NoiseSchedule::posterior_variance(std::size_t t) const {
  check_step(t, 1);
  return betas_[t - 1] * (1.0 - gammas_[t - 1]) / (1.0 - gammas_[t]);
}

NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end,
                             ScheduleKind kind) {
  require(steps >= 1, ErrorCode::kOutOfRange, "schedule needs T >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorCode::kOutOfRange,
          "schedule requires 0 < beta_start <= beta_end < 1");
  require(kind == ScheduleKind::kLinear, ErrorCode::kInvalidArgument, "unknown schedule kind");
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[i] = beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule(std::move(betas));
}

Tensor q_sample_at(const Tensor& clean, double gamma, const Tensor& eps) {
  require(gamma >= 0.0 && gamma <= 1.0, ErrorCode::kOutOfRange, "q_sample: gamma outside [0, 1]");
  require(clean.shape() == eps.shape(), ErrorCode::kShape,
          "q_sample: noise shape " + shape_str(eps.shape()) + " differs from image shape " +
              shape_str(clean.shape()));
  return add(scale(clean, std::sqrt(gamma)), scale(eps, std::sqrt(1.0 - gamma)));
}

Tensor q_sample(const Tensor& clean, std::size_t t, const Tensor& eps,
                const NoiseSchedule& schedule) {
  return q_sample_at(clean, schedule.gamma(t), eps);
}

Tensor q_sample(const Tensor& clean, std::span<const std::size_t> steps, const Tensor& eps,
                const NoiseSchedule& schedule) {
  require(clean.shape() == eps.shape(), ErrorCode::kShape,
          "q_sample: noise shape " + shape_str(eps.shape()) + " differs from image shape " +
              shape_str(clean.shape()));
  std::vector<double> signal, noise;
  for (std::size_t t : steps) {
    const double g = schedule.gamma(t);
    signal.push_back(std::sqrt(g));
    noise.push_back(std::sqrt(1.0 - g));
  }
  return add(scale_per_sample(clean, signal), scale_per_sample(eps, noise));
}

Tensor predict_x0(const Tensor& noisy, const Tensor& eps_hat, double gamma, bool clamp_range) {
  require(gamma > 0.0 && gamma <= 1.0, ErrorCode::kOutOfRange,
          "predict_x0: gamma must lie in (0, 1], got " + std::to_string(gamma));
  require(noisy.shape() == eps_hat.shape(), ErrorCode::kShape, "predict_x0: shape mismatch");
  Tensor x0 = scale(sub(noisy, scale(eps_hat, std::sqrt(1.0 - gamma))), 1.0 / std::sqrt(gamma));
  return clamp_range ? clamp(x0, -1.0, 1.0) : x0;
}

Tensor predict_x0(const Tensor& noisy, const Tensor& eps_hat, std::span<const double> gamma,
                  bool clamp_range) {
  require(noisy.shape() == eps_hat.shape(), ErrorCode::kShape, "predict_x0: shape mismatch");
  std::vector<double> noise, inv_signal;
  for (double g : gamma) {
    require(g > 0.0 && g <= 1.0, ErrorCode::kOutOfRange,
            "predict_x0: gamma must lie in (0, 1], got " + std::to_string(g));
    noise.push_back(std::sqrt(1.0 - g));
    inv_signal.push_back(1.0 / std::sqrt(g));
  }
  Tensor x0 = scale_per_sample(sub(noisy, scale_per_sample(eps_hat, noise)), inv_signal);
  return clamp_range ? clamp(x0, -1.0, 1.0) : x0;
}

namespace {

DiffusionState reverse_step(const DiffusionState& state, const NoisePredictor& net,
                            const NoiseSchedule& schedule, const Tensor* noise) {
  const std::size_t t = state.t;
  require(t >= 1 && t <= schedule.steps(), ErrorCode::kOutOfRange,
          "p_sample_step: t = " + std::to_string(t) + " outside [1, " +
              std::to_string(schedule.steps()) + "]");
  const std::size_t batch = state.image.dim(0);
  const std::vector<double> gamma(batch, schedule.gamma(t));
  const Tensor eps_hat = net.predict_noise(state.condition, state.image, gamma);

  const double beta = schedule.beta(t);
  const double coef = beta / std::sqrt(1.0 - schedule.gamma(t));
  Tensor next = scale(sub(state.image, scale(eps_hat, coef)), 1.0 / std::sqrt(schedule.alpha(t)));
  if (t > 1) {
    require(noise != nullptr && noise->shape() == state.image.shape(), ErrorCode::kShape,
            "p_sample_step: injected noise must match the latent shape");
    next = add(next, scale(*noise, std::sqrt(schedule.posterior_variance(t))));
  }
  return {next, t - 1, state.condition};
}

Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from_data(shape, std::move(v));
}

}  // namespace

DiffusionState p_sample_step(const DiffusionState& state, const NoisePredictor& net,
                             const NoiseSchedule& schedule, const Tensor& noise) {
  return reverse_step(state, net, schedule, &noise);
}

DiffusionState p_sample_step(const DiffusionState& state, const NoisePredictor& net,
                             const NoiseSchedule& schedule, Rng& rng) {
  require(state.t >= 1, ErrorCode::kOutOfRange, "p_sample_step: t = 0 has no predecessor");
  if (state.t == 1) return reverse_step(state, net, schedule, nullptr);
  const Tensor noise = standard_normal(state.image.shape(), rng);
  return reverse_step(state, net, schedule, &noise);
}

Tensor conditioning_stack(const Tensor& x, const Tensor& y, const Tensor& s, std::size_t out_h,
                          std::size_t out_w) {
  std::vector<Tensor> planes;
  for (const Tensor* m : {&x, &y, &s}) {
    require(m->defined() && m->rank() == 3 && m->dim(0) == 1, ErrorCode::kShape,
            "modality images must be single-channel [1,H,W]");
    require(m->shape() == x.shape(), ErrorCode::kShape,
            "modality shapes differ: " + shape_str(m->shape()) + " vs " + shape_str(x.shape()));
    Tensor up = bicubic_resample(*m, out_h, out_w);
    planes.push_back(add_scalar(scale(up, 2.0), -1.0));
  }
  return reshape(concat(planes, 0), {1, 3, out_h, out_w});
}

Tensor sample_fusion(const Tensor& x, const Tensor& y, const Tensor& s,
                     const NoisePredictor& net, const NoiseSchedule& schedule, Rng& rng,
                     const SamplerOptions& options) {
  const auto& allowed = options.allowed_scales;
  require(std::find(allowed.begin(), allowed.end(), options.scale) != allowed.end(),
          ErrorCode::kInvalidArgument,
          "scale factor " + std::to_string(options.scale) + " is not in the allowed set");
  require(x.rank() == 3, ErrorCode::kShape, "sample_fusion: modalities must be [1,H,W]");
  const std::size_t H = x.dim(1) * options.scale, W = x.dim(2) * options.scale;

  NoGradGuard no_grad;
  DiffusionState state;
  state.condition = net.condition(conditioning_stack(x, y, s, H, W));
  state.image = standard_normal({1, 3, H, W}, rng);
  state.t = schedule.steps();
  while (state.t > 0) {
    state = p_sample_step(state, net, schedule, rng);
    if (options.on_step) options.on_step(state.t + 1);
  }
  Tensor unit = add_scalar(scale(state.image, 0.5), 0.5);
  return reshape(clamp(unit, 0.0, 1.0), {3, H, W});
}

ObjectiveDraw draw_objective(const NoisePredictor& net, const TrainingBatch& batch,
                             const NoiseSchedule& schedule, Rng& rng) {
  require(batch.modalities.defined(), ErrorCode::kMissingInput, "objective: missing modalities");
  require(batch.target.defined(), ErrorCode::kMissingInput, "objective: missing ground truth");
  require(batch.target.rank() == 4 && batch.modalities.rank() == 4 &&
              batch.target.dim(0) == batch.modalities.dim(0),
          ErrorCode::kShape, "objective: batch tensors must be [B,3,H,W]");
  const std::size_t B = batch.target.dim(0);

  ObjectiveDraw draw;
  for (std::size_t n = 0; n < B; ++n) {
    const std::size_t t = 1 + static_cast<std::size_t>(rng.below(schedule.steps()));
    draw.steps.push_back(t);
    draw.gamma.push_back(schedule.gamma(t));
  }
  draw.eps = standard_normal(batch.target.shape(), rng);
  draw.noisy = q_sample(batch.target, draw.steps, draw.eps, schedule);
  const Tensor z = net.condition(batch.modalities);
  draw.eps_hat = net.predict_noise(z, draw.noisy, draw.gamma);
  draw.loss = mean(square(sub(draw.eps, draw.eps_hat)));
  return draw;
}

}  // namespace tfsdiff
