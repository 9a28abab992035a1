#pragma once

#include <cstdint>
#include <span>

#include "normlab/tape.hpp"

namespace normlab {

struct LayerNormParams {
  Tensor gain;  // [d], starts at 1
  Tensor bias;  // [d], starts at 0

  static LayerNormParams init(std::size_t d);
};

/// Multi-head attention projections. Weights are [d_in x d_out]; y = x W + b.
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Two-layer position-wise network d -> d_ffn -> d.
struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

/// Batch layout of flattened [batch * len x d] activations for attention.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t q_len = 1;
  std::size_t kv_len = 1;
  std::size_t heads = 1;
};

inline constexpr double kLayerNormEps = 1e-5;

/// (x - mean) / sqrt(var + eps) * gain + bias over the last dimension.
Var layer_norm(Var x, LayerNormParams& p, double eps = kLayerNormEps);

/// x W + b with a trailing-dimension bias.
Var linear(Var x, Tensor& weight, Tensor& bias);

/// Scaled dot-product multi-head attention. `x_q` is [batch*q_len x d], `x_kv` is
/// [batch*kv_len x d]; `mask` is [batch x q_len x kv_len] with nonzero meaning "blocked",
/// or empty for no mask. When `probs` is given it receives the post-softmax
/// [batch*heads x q_len x kv_len] weights.
Var attention(Var x_q, Var x_kv, AttentionParams& p, const AttentionLayout& layout,
              std::span<const std::uint8_t> mask = {}, Var* probs = nullptr);

/// relu(x W1 + b1) W2 + b2. When `hidden` is given it receives the post-relu activations.
Var feed_forward(Var x, FeedForwardParams& p, Var* hidden = nullptr);

/// Uniform(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)) for a 2-D shape.
Tensor xavier_init(const Shape& shape, double gain, std::uint64_t seed);

/// Sinusoidal position table [max_len x d].
Tensor sinusoidal_positions(std::size_t max_len, std::size_t d);

AttentionParams init_attention(std::size_t d, double value_out_gain, std::uint64_t seed);
FeedForwardParams init_feed_forward(std::size_t d, std::size_t d_ffn, double gain,
                                    std::uint64_t seed);

}  // namespace normlab
