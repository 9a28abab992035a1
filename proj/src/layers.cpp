#include "normlab/layers.hpp"

#include <cmath>
#include <random>

#include "normlab/ops.hpp"
#include "normlab/rng.hpp"

namespace normlab {

LayerNormParams LayerNormParams::init(std::size_t d) {
  return {Tensor::filled({d}, 1.0, true), Tensor::zeros({d}, true)};
}

Var layer_norm(Var x, LayerNormParams& p, double eps) {
  const Shape& sh = x.shape();
  if (sh.empty() || p.gain.shape.size() != 1 || sh.back() != p.gain.shape[0] ||
      p.bias.shape != p.gain.shape) {
    throw DimensionError("layer_norm: input " + to_string(sh) + " does not match parameters " +
                         to_string(p.gain.shape));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  Tape& t = *x.tape();
  auto [mean, var] = mean_var(x, sh.size() - 1);
  Var z = standardize(x, mean, var, eps);
  return add(mul(z, t.parameter(p.gain)), t.parameter(p.bias));
}

Var linear(Var x, Tensor& weight, Tensor& bias) {
  Tape& t = *x.tape();
  return add(matmul(x, t.parameter(weight)), t.parameter(bias));
}

namespace {

// [batch*len x d] -> [batch*heads x len x d/heads]
Var split_heads(Var x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t d = x.shape()[1];
  Var r = reshape(x, {batch, len, heads, d / heads});
  Var p = permute(r, {0, 2, 1, 3});
  return reshape(p, {batch * heads, len, d / heads});
}

Var merge_heads(Var x, std::size_t batch, std::size_t len, std::size_t heads) {
  const std::size_t dh = x.shape()[2];
  Var r = reshape(x, {batch, heads, len, dh});
  Var p = permute(r, {0, 2, 1, 3});
  return reshape(p, {batch * len, heads * dh});
}

}  // namespace

Var attention(Var x_q, Var x_kv, AttentionParams& p, const AttentionLayout& layout,
              std::span<const std::uint8_t> mask, Var* probs) {
  const std::size_t d = p.wq.shape.at(0);
  const std::size_t h = layout.heads;
  if (h == 0 || d % h != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(h) + " heads");
  }
  if (x_q.shape() != Shape{layout.batch * layout.q_len, d} ||
      x_kv.shape() != Shape{layout.batch * layout.kv_len, d}) {
    throw DimensionError("attention: inputs " + to_string(x_q.shape()) + " / " +
                         to_string(x_kv.shape()) + " do not match the batch layout");
  }
  Var q = split_heads(linear(x_q, p.wq, p.bq), layout.batch, layout.q_len, h);
  Var k = split_heads(linear(x_kv, p.wk, p.bk), layout.batch, layout.kv_len, h);
  Var v = split_heads(linear(x_kv, p.wv, p.bv), layout.batch, layout.kv_len, h);
  Var scores = scale(batched_matmul(q, k, /*transpose_b=*/true),
                     1.0 / std::sqrt(static_cast<double>(d / h)));
  Var weights;
  if (mask.empty()) {
    weights = softmax(scores, 2);
  } else {
    weights = masked_softmax(scores, mask, h);
  }
  if (probs != nullptr) *probs = weights;
  Var context = merge_heads(batched_matmul(weights, v), layout.batch, layout.q_len, h);
  return linear(context, p.wo, p.bo);
}

Var feed_forward(Var x, FeedForwardParams& p, Var* hidden) {
  if (x.shape().size() != 2 || x.shape()[1] != p.w1.shape.at(0)) {
    throw DimensionError("feed_forward: input " + to_string(x.shape()) +
                         " does not match weight " + to_string(p.w1.shape));
  }
  Var a = relu(linear(x, p.w1, p.b1));
  if (hidden != nullptr) *hidden = a;
  return linear(a, p.w2, p.b2);
}

Tensor xavier_init(const Shape& shape, double gain, std::uint64_t seed) {
  if (shape.size() != 2) {
    throw ContractError("xavier_init: expected a 2-D shape, got " + to_string(shape));
  }
  if (gain < 0.0) throw ContractError("xavier_init: gain must be nonnegative");
  const double bound =
      gain * std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor out = Tensor::zeros(shape, true);
  for (auto& v : out.data) v = bound * dist(rng);
  return out;
}

Tensor sinusoidal_positions(std::size_t max_len, std::size_t d) {
  Tensor pe = Tensor::zeros({max_len, d});
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

AttentionParams init_attention(std::size_t d, double value_out_gain, std::uint64_t seed) {
  AttentionParams p;
  p.wq = xavier_init({d, d}, 1.0, derive_seed(seed, 0));
  p.wk = xavier_init({d, d}, 1.0, derive_seed(seed, 1));
  p.wv = xavier_init({d, d}, value_out_gain, derive_seed(seed, 2));
  p.wo = xavier_init({d, d}, value_out_gain, derive_seed(seed, 3));
  p.bq = Tensor::zeros({d}, true);
  p.bk = Tensor::zeros({d}, true);
  p.bv = Tensor::zeros({d}, true);
  p.bo = Tensor::zeros({d}, true);
  return p;
}

FeedForwardParams init_feed_forward(std::size_t d, std::size_t d_ffn, double gain,
                                    std::uint64_t seed) {
  FeedForwardParams p;
  p.w1 = xavier_init({d, d_ffn}, gain, derive_seed(seed, 0));
  p.w2 = xavier_init({d_ffn, d}, gain, derive_seed(seed, 1));
  p.b1 = Tensor::zeros({d_ffn}, true);
  p.b2 = Tensor::zeros({d}, true);
  return p;
}

}  // namespace normlab
