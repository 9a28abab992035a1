#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "normlab/layers.hpp"
#include "normlab/norm_strategy.hpp"

namespace normlab {

inline constexpr int kPadId = 0;

struct ModelConfig {
  int encoder_layers = 6;
  int decoder_layers = 6;
  std::size_t d_model = 512;
  std::size_t d_ffn = 2048;
  std::size_t heads = 8;
  std::size_t vocab_size = 16;
  std::size_t max_len = 256;
  NormStrategy strategy;
  double dropout = 0.1;
  std::uint64_t seed = 1;
  bool share_embeddings = true;
  bool tie_output = true;
  double ln_eps = kLayerNormEps;

  void validate() const;
  /// L = 2N + 3M.
  [[nodiscard]] std::size_t sublayer_count() const {
    return 2 * static_cast<std::size_t>(encoder_layers) +
           3 * static_cast<std::size_t>(decoder_layers);
  }
};

enum class SublayerKind { kSelfAttention, kCrossAttention, kFeedForward };
std::string_view to_string(SublayerKind kind);

struct Sublayer {
  Side side = Side::kEncoder;
  SublayerKind kind = SublayerKind::kSelfAttention;
  int layer = 0;  // index of the encoder/decoder layer this sublayer belongs to
  AttentionParams attn;  // attention kinds only
  FeedForwardParams ffn;  // feed-forward only
  LayerNormParams ln;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Padded seq2seq batch; every id array is [size x len] row-major.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> src;
  std::vector<int> tgt_in;   // decoder input
  std::vector<int> tgt_out;  // prediction targets, kPadId where ignored

  static Batch from_sequences(const std::vector<std::vector<int>>& src,
                              const std::vector<std::vector<int>>& tgt_in,
                              const std::vector<std::vector<int>>& tgt_out);
  [[nodiscard]] std::size_t target_tokens() const;
};

/// Encoder-decoder Transformer whose every sublayer follows one NormStrategy.
///
/// Sublayer order is encoder (self-attn, ffn) x N followed by decoder
/// (self-attn, cross-attn, ffn) x M.
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& cfg);

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] std::size_t sublayer_count() const { return sublayers_.size(); }
  [[nodiscard]] const std::vector<Sublayer>& sublayers() const { return sublayers_; }
  std::vector<Sublayer>& sublayers() { return sublayers_; }

  /// Every trainable tensor with a stable dotted name, in a fixed order.
  std::vector<NamedTensor> named_parameters();
  /// Trainable tensors owned by the sublayer function F of sublayer `l` (LayerNorm excluded).
  std::vector<Tensor*> branch_parameters(std::size_t l);
  std::size_t parameter_count();
  void zero_grad();

  /// Same parameters under a different combination rule.
  [[nodiscard]] Model with_strategy(const NormStrategy& strategy) const;

  Tensor& src_embedding() { return src_embedding_; }
  Tensor& tgt_embedding() { return cfg_.share_embeddings ? src_embedding_ : tgt_embedding_; }

 private:
  friend struct ForwardBuilder;

  ModelConfig cfg_;
  std::vector<Sublayer> sublayers_;
  Tensor src_embedding_;
  Tensor tgt_embedding_;     // only when embeddings are not shared
  Tensor output_projection_;  // [d x V], only when the output is not tied
  LayerNormParams final_ln_encoder_;  // Pre-LN only
  LayerNormParams final_ln_decoder_;  // Pre-LN only
  Tensor positions_;
};

Model build_model(const ModelConfig& cfg);

/// Everything recorded by one forward pass.
struct ForwardTrace {
  Var logits;  // [batch*tgt_len x vocab]
  /// Input x_l and output x_{l+1} of every sublayer, in sublayer order.
  std::vector<Var> sublayer_inputs;
  std::vector<Var> sublayer_outputs;
  /// Post-relu activations of each feed-forward sublayer, with its sublayer index.
  std::vector<Var> ffn_hidden;
  std::vector<std::size_t> ffn_sublayer;
  Var encoder_top;  // output of the last encoder sublayer
  Var decoder_top;  // output of the last decoder sublayer
  Var memory;       // what cross-attention reads (encoder_top, or its final LN for Pre-LN)
};

/// Forward pass at training step t. Dropout runs only when `train` is set and
/// `dropout_rng` is supplied.
ForwardTrace forward(Model& m, Tape& tape, const Batch& batch, std::int64_t t, bool train,
                     std::mt19937_64* dropout_rng = nullptr);

struct LossValue {
  Var objective;      // label-smoothed cross entropy (what is optimised)
  double nll = 0.0;   // plain negative log-likelihood of the targets
  std::size_t tokens = 0;
};

/// Label-smoothed cross entropy averaged over non-pad target positions.
LossValue loss(Var logits, std::span<const int> targets, double smoothing);

// Standalone evaluation of the pieces of sublayer l (dropout off). `memory` is
// the encoder output consumed by cross-attention and is ignored elsewhere.
Tensor sublayer_output(Model& m, std::size_t l, const Tensor& x, const Batch& batch,
                       const Tensor& memory, std::int64_t t);
Tensor sublayer_branch(Model& m, std::size_t l, const Tensor& x, const Batch& batch,
                       const Tensor& memory);
Tensor sublayer_norm(Model& m, std::size_t l, const Tensor& y);

/// Scaled token embeddings plus positions (dropout off), [batch*len x d].
Var embed_source(Model& m, Tape& tape, const Batch& batch);
Var embed_target(Model& m, Tape& tape, const Batch& batch);
/// Output logits from the decoder stack top (applies the Pre-LN final norm when present).
Var project_logits(Model& m, Tape& tape, Var decoder_top);

/// Loss as a function of the decoder stack top (final LN, projection, loss).
double loss_from_decoder_top(Model& m, const Tensor& top, const Batch& batch, double smoothing);
/// Loss as a function of the encoder stack top (the whole decoder runs on it).
double loss_from_encoder_top(Model& m, const Tensor& top, const Batch& batch, std::int64_t t,
                             double smoothing);

}  // namespace normlab
