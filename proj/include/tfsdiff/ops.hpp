#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tfsdiff/rng.hpp"
#include "tfsdiff/tensor.hpp"

namespace tfsdiff {

// Elementwise arithmetic. Both operands must have identical shapes; there is
// no implicit broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor square(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

/// Multiplies every element of batch item n by factors[n]. The factors are
/// constants (no gradient).
Tensor scale_per_sample(const Tensor& x, std::span<const double> factors);

enum class Activation { kRelu, kSigmoid, kSwish };

Tensor activation(const Tensor& x, Activation kind);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::kRelu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::kSigmoid); }
inline Tensor swish(const Tensor& x) { return activation(x, Activation::kSwish); }

/// Elementwise clamp; gradient passes where lo < x < hi and is 0 elsewhere.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// Concatenates along `axis`; all other dimensions must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Sub-range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [B,M,K] x [B,K,N] -> [B,M,N]
Tensor bmm(const Tensor& a, const Tensor& b);
/// Swaps the last two axes of a rank-3 tensor.
Tensor transpose_last2(const Tensor& x);
/// Softmax over the last axis.
Tensor softmax_last(const Tensor& x);

/// Cross-correlation of [N,C_in,H,W] with [C_out,C_in,k,k]. `bias` may be an
/// undefined tensor; otherwise it has shape [C_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding);
inline Tensor conv2d(const Tensor& input, const Tensor& kernel,
                     std::size_t stride, std::size_t padding) {
  return conv2d(input, kernel, Tensor{}, stride, padding);
}

/// input [N,F_in] . weight[F_out,F_in]^T + bias[F_out]
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// [N,C,H,W] -> [N,C], mean over each plane.
Tensor global_avg_pool(const Tensor& input);

/// x[N,C,H,W] + v[N,C] broadcast over H,W.
Tensor add_channelwise(const Tensor& x, const Tensor& v);
/// x[N,C,H,W] * w[N,C] broadcast over H,W.
Tensor mul_channelwise(const Tensor& x, const Tensor& w);

/// Group normalization over [N,C,H,W] with per-channel affine gamma, beta.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-5);

/// Nearest-neighbour 2x spatial upsampling of [N,C,H,W].
Tensor upsample_nearest2x(const Tensor& x);

/// Parameters of single-head self-attention over C channels. Each
/// projection is a [C,C] weight with a [C] bias applied per token.
struct AttentionParams {
  Tensor q_weight, q_bias;
  Tensor k_weight, k_bias;
  Tensor v_weight, v_bias;
  Tensor out_weight, out_bias;
};

/// Scaled dot-product attention over the H*W token axis, plus residual.
Tensor self_attention(const Tensor& input, const AttentionParams& params);

/// i.i.d. N(0, 2/fan_in) draws.
Tensor kaiming_init(const Shape& shape, std::size_t fan_in, Rng& rng,
                    bool requires_grad = true);

}  // namespace tfsdiff
