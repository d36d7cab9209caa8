#include "tfsdiff/objectives.hpp"

#include <cmath>

#include "tfsdiff/ops.hpp"

namespace tfsdiff {

void LossWeights::validate() const {
  require(lambda1 > 0.0 && lambda1 <= 1.0, ErrorCode::kConfig,
          "lambda1 must lie in (0, 1], got " + std::to_string(lambda1));
  require(lambda2 > 0.0 && lambda2 <= 1.0, ErrorCode::kConfig,
          "lambda2 must lie in (0, 1], got " + std::to_string(lambda2));
  require(diffusion_weight >= 0.0, ErrorCode::kConfig, "diffusion weight must be >= 0");
}

std::vector<double> gaussian_window(const SsimWindow& window) {
  require(window.size >= 1 && window.size % 2 == 1, ErrorCode::kInvalidArgument,
          "SSIM window size must be odd");
  require(window.sigma > 0.0, ErrorCode::kInvalidArgument, "SSIM window sigma must be positive");
  const auto n = window.size;
  const double centre = static_cast<double>(n / 2);
  std::vector<double> w(n * n);
  double total = 0.0;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) - centre, dx = static_cast<double>(x) - centre;
      total += w[y * n + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * window.sigma * window.sigma));
    }
  }
  for (double& v : w) v /= total;
  return w;
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  require(prediction.shape() == target.shape(), ErrorCode::kShape,
          "mse_loss: shape mismatch " + shape_str(prediction.shape()) + " vs " +
              shape_str(target.shape()));
  return mean(square(sub(prediction, target)));
}

Tensor ssim_index(const Tensor& prediction, const Tensor& target, double dynamic_range,
                  const SsimWindow& window) {
  require(prediction.shape() == target.shape(), ErrorCode::kShape,
          "ssim: shape mismatch " + shape_str(prediction.shape()) + " vs " +
              shape_str(target.shape()));
  require(prediction.rank() >= 2, ErrorCode::kShape, "ssim: inputs need at least [H,W]");
  require(dynamic_range > 0.0, ErrorCode::kInvalidArgument, "ssim: dynamic range must be > 0");
  const Shape& s = prediction.shape();
  const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
  require(H >= window.size && W >= window.size, ErrorCode::kShape,
          "ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " smaller than the " +
              std::to_string(window.size) + "x" + std::to_string(window.size) + " window");
  const std::size_t planes = prediction.numel() / (H * W);

  const Tensor kernel = Tensor::from_data({1, 1, window.size, window.size}, gaussian_window(window));
  auto filter = [&](const Tensor& t) { return conv2d(t, kernel, 1, 0); };
  const Tensor p = reshape(prediction, {planes, 1, H, W});
  const Tensor t = reshape(target, {planes, 1, H, W});

  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  const Tensor mu_p = filter(p), mu_t = filter(t);
  const Tensor mu_pp = mul(mu_p, mu_p), mu_tt = mul(mu_t, mu_t), mu_pt = mul(mu_p, mu_t);
  const Tensor var_p = sub(filter(mul(p, p)), mu_pp);
  const Tensor var_t = sub(filter(mul(t, t)), mu_tt);
  const Tensor cov = sub(filter(mul(p, t)), mu_pt);

  const Tensor numerator = mul(add_scalar(scale(mu_pt, 2.0), c1), add_scalar(scale(cov, 2.0), c2));
  const Tensor denominator =
      mul(add_scalar(add(mu_pp, mu_tt), c1), add_scalar(add(var_p, var_t), c2));
  return mean(div(numerator, denominator));
}

Tensor psf_loss(const Tensor& prediction, const Tensor& target, const LossWeights& weights,
                double dynamic_range) {
  const Tensor pixel = mse_loss(prediction, target);
  const Tensor structural = add_scalar(scale(ssim_index(prediction, target, dynamic_range), -1.0), 1.0);
  return add(scale(pixel, weights.lambda1), scale(structural, weights.lambda2));
}

TrainingLoss training_loss(const NoisePredictor& net, const TrainingBatch& batch,
                           const NoiseSchedule& schedule, const LossWeights& weights, Rng& rng) {
  ObjectiveDraw draw = draw_objective(net, batch, schedule, rng);
  TrainingLoss out;
  out.steps = draw.steps;
  out.gamma = draw.gamma;
  out.diffusion = draw.loss.item();
  out.total = weights.diffusion_weight == 1.0 ? draw.loss : scale(draw.loss, weights.diffusion_weight);
  if (weights.psf_enabled) {
    const Tensor x0 = predict_x0(draw.noisy, draw.eps_hat, draw.gamma, true);
    const Tensor aux = psf_loss(x0, batch.target, weights);
    out.psf = aux.item();
    out.total = add(out.total, aux);
  }
  return out;
}

}  // namespace tfsdiff
