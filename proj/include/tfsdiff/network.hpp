#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tfsdiff/diffusion.hpp"
#include "tfsdiff/ops.hpp"

namespace tfsdiff {

struct NetworkConfig {
  /// Channel width of each U-Net resolution level, shallowest first.
  std::vector<std::size_t> widths{16, 32, 64, 64};
  /// TMFA bottleneck reduction; the hidden width is ceil(3 / reduction).
  std::size_t reduction = 16;
  bool tmfa_enabled = true;
  /// gamma_t is multiplied by this before the sinusoidal embedding.
  double embed_scale = 1000.0;
};

struct NamedParameter {
  std::string name;
  Tensor value;
};

/// Stacks three [1,H,W] modality images into [3,H,W] in the fixed order
/// (x, y, s).
Tensor concat_modalities(const Tensor& x, const Tensor& y, const Tensor& s);
std::array<Tensor, 3> split_modalities(const Tensor& stacked);

/// Squeeze-and-excitation channel attention over the concatenated
/// modalities: w = sigmoid(fc2(relu(fc1(GAP(C))))), output C * w.
class TmfaBlock {
 public:
  TmfaBlock(std::size_t channels, std::size_t reduction, Rng& rng);

  std::size_t channels() const { return channels_; }
  std::size_t hidden() const { return hidden_; }

  /// Per-channel gates [N,C], each strictly inside (0,1) for moderate inputs.
  Tensor attention_weights(const Tensor& input) const;
  Tensor forward(const Tensor& input) const;

  std::vector<NamedParameter> parameters() const;

  Tensor fc1_weight, fc1_bias, fc2_weight, fc2_bias;

 private:
  std::size_t channels_;
  std::size_t hidden_;
};

inline Tensor tmfa_forward(const Tensor& input, const TmfaBlock& block) {
  return block.forward(input);
}

/// Conditional denoiser: optional TMFA block feeding an SR3-style U-Net with
/// BigGAN-style residual blocks, gamma embedding, self-attention at the
/// lowest level and a single-convolution noise head.
///
/// Input latents must have H and W divisible by 2^(levels-1).
class FusionNet : public NoisePredictor {
 public:
  FusionNet(NetworkConfig config, std::uint64_t seed);
  ~FusionNet() override;
  FusionNet(FusionNet&&) noexcept;
  FusionNet& operator=(FusionNet&&) noexcept;

  const NetworkConfig& config() const;

  Tensor condition(const Tensor& modalities) const override;
  Tensor predict_noise(const Tensor& z, const Tensor& noisy,
                       std::span<const double> gamma) const override;

  /// All trainable tensors in a fixed, documented order.
  const std::vector<NamedParameter>& parameters() const;
  std::size_t count_parameters() const;

  const TmfaBlock* tmfa() const;
  /// Required divisor of the latent height and width.
  std::size_t size_multiple() const;

  void zero_grad();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Single-image convenience form: z and I_t are [3,H,W].
Tensor eps_theta(const Tensor& z, const Tensor& noisy, double gamma, const FusionNet& net);

inline std::size_t count_parameters(const FusionNet& net) { return net.count_parameters(); }

/// Number of GroupNorm groups used for `channels`: the largest divisor <= 8.
std::size_t norm_groups(std::size_t channels);

/// Sinusoidal embedding of per-item gamma values, shape [N, dim].
Tensor gamma_embedding(std::span<const double> gamma, std::size_t dim, double scale);

}  // namespace tfsdiff
