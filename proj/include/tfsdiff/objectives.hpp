#pragma once

#include <cstddef>
#include <vector>

#include "tfsdiff/diffusion.hpp"
#include "tfsdiff/tensor.hpp"

namespace tfsdiff {

struct LossWeights {
  double lambda1 = 0.5;  // MSE term
  double lambda2 = 0.5;  // structural term
  bool psf_enabled = true;
  /// Weight on the noise-prediction objective.
  double diffusion_weight = 1.0;

  /// Throws kConfig unless lambda1, lambda2 lie in (0, 1].
  void validate() const;
};

struct SsimWindow {
  std::size_t size = 11;
  double sigma = 1.5;
};

/// Normalized size x size Gaussian window, row-major.
std::vector<double> gaussian_window(const SsimWindow& window);

Tensor mse_loss(const Tensor& prediction, const Tensor& target);

/// Mean SSIM over all valid window positions of every plane. Inputs are
/// [..., H, W] with H, W >= window size; c1 = (0.01 L)^2, c2 = (0.03 L)^2.
/// Differentiable in both arguments.
Tensor ssim_index(const Tensor& prediction, const Tensor& target, double dynamic_range,
                  const SsimWindow& window = {});

/// lambda1 * MSE + lambda2 * (1 - SSIM), with SSIM over dynamic range L.
Tensor psf_loss(const Tensor& prediction, const Tensor& target, const LossWeights& weights,
                double dynamic_range = 2.0);

struct TrainingLoss {
  Tensor total;
  double diffusion = 0.0;
  double psf = 0.0;
  std::vector<std::size_t> steps;
  std::vector<double> gamma;
};

/// Noise-prediction objective plus, when enabled, the PSF loss on the
/// reconstructed x0 estimate. Both terms share one (t, eps) draw.
TrainingLoss training_loss(const NoisePredictor& net, const TrainingBatch& batch,
                           const NoiseSchedule& schedule, const LossWeights& weights, Rng& rng);

}  // namespace tfsdiff
