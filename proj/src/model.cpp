#include "normlab/model.hpp"

#include <cmath>

#include "normlab/ops.hpp"
#include "normlab/rng.hpp"

namespace normlab {

std::string_view to_string(SublayerKind kind) {
  switch (kind) {
    case SublayerKind::kSelfAttention: return "self_attn";
    case SublayerKind::kCrossAttention: return "cross_attn";
    case SublayerKind::kFeedForward: return "ffn";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (encoder_layers < 1 || decoder_layers < 1) {
    throw ConfigError("model needs at least one encoder and one decoder layer");
  }
  if (d_model == 0 || d_ffn == 0 || heads == 0 || vocab_size == 0 || max_len == 0) {
    throw ConfigError("model widths, heads, vocabulary and max_len must be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
  strategy.validate();
}

Batch Batch::from_sequences(const std::vector<std::vector<int>>& src,
                            const std::vector<std::vector<int>>& tgt_in,
                            const std::vector<std::vector<int>>& tgt_out) {
  if (src.empty() || src.size() != tgt_in.size() || src.size() != tgt_out.size()) {
    throw InputError("batch needs the same positive number of source and target sequences");
  }
  Batch b;
  b.size = src.size();
  for (std::size_t i = 0; i < b.size; ++i) {
    if (src[i].empty() || tgt_in[i].empty()) throw InputError("empty sequence in batch");
    if (tgt_in[i].size() != tgt_out[i].size()) {
      throw InputError("decoder input and target lengths differ");
    }
    b.src_len = std::max(b.src_len, src[i].size());
    b.tgt_len = std::max(b.tgt_len, tgt_in[i].size());
  }
  b.src.assign(b.size * b.src_len, kPadId);
  b.tgt_in.assign(b.size * b.tgt_len, kPadId);
  b.tgt_out.assign(b.size * b.tgt_len, kPadId);
  for (std::size_t i = 0; i < b.size; ++i) {
    std::copy(src[i].begin(), src[i].end(), b.src.begin() + i * b.src_len);
    std::copy(tgt_in[i].begin(), tgt_in[i].end(), b.tgt_in.begin() + i * b.tgt_len);
    std::copy(tgt_out[i].begin(), tgt_out[i].end(), b.tgt_out.begin() + i * b.tgt_len);
  }
  return b;
}

std::size_t Batch::target_tokens() const {
  return static_cast<std::size_t>(
      std::count_if(tgt_out.begin(), tgt_out.end(), [](int v) { return v != kPadId; }));
}

namespace {

Tensor normal_init(const Shape& shape, double stddev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor out = Tensor::zeros(shape, true);
  for (auto& v : out.data) v = dist(rng);
  return out;
}

}  // namespace

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  const int n = cfg_.encoder_layers;
  const int m = cfg_.decoder_layers;
  const double gain_enc = cfg_.strategy.init_gain(Side::kEncoder, n, m);
  const double gain_dec = cfg_.strategy.init_gain(Side::kDecoder, n, m);

  std::uint64_t stream = 0;
  auto next_seed = [&] { return derive_seed(cfg_.seed, stream++); };
  auto add_sublayer = [&](Side side, SublayerKind kind, int layer) {
    Sublayer s;
    s.side = side;
    s.kind = kind;
    s.layer = layer;
    const double gain = side == Side::kEncoder ? gain_enc : gain_dec;
    if (kind == SublayerKind::kFeedForward) {
      s.ffn = init_feed_forward(d, cfg_.d_ffn, gain, next_seed());
    } else {
      s.attn = init_attention(d, gain, next_seed());
    }
    s.ln = LayerNormParams::init(d);
    sublayers_.push_back(std::move(s));
  };
  for (int i = 0; i < n; ++i) {
    add_sublayer(Side::kEncoder, SublayerKind::kSelfAttention, i);
    add_sublayer(Side::kEncoder, SublayerKind::kFeedForward, i);
  }
  for (int i = 0; i < m; ++i) {
    add_sublayer(Side::kDecoder, SublayerKind::kSelfAttention, i);
    add_sublayer(Side::kDecoder, SublayerKind::kCrossAttention, i);
    add_sublayer(Side::kDecoder, SublayerKind::kFeedForward, i);
  }

  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  src_embedding_ = normal_init({cfg_.vocab_size, d}, emb_std, derive_seed(cfg_.seed, 1u << 20));
  if (!cfg_.share_embeddings) {
    tgt_embedding_ = normal_init({cfg_.vocab_size, d}, emb_std, derive_seed(cfg_.seed, (1u << 20) + 1));
  }
  if (!cfg_.tie_output) {
    output_projection_ = xavier_init({d, cfg_.vocab_size}, 1.0, derive_seed(cfg_.seed, (1u << 20) + 2));
  }
  if (cfg_.strategy.kind == NormKind::kPreLN) {
    final_ln_encoder_ = LayerNormParams::init(d);
    final_ln_decoder_ = LayerNormParams::init(d);
  }
  positions_ = sinusoidal_positions(cfg_.max_len, d);
}

Model build_model(const ModelConfig& cfg) { return Model(cfg); }

std::vector<NamedTensor> Model::named_parameters() {
  std::vector<NamedTensor> out;
  out.push_back({"embed.src", &src_embedding_});
  if (!cfg_.share_embeddings) out.push_back({"embed.tgt", &tgt_embedding_});
  if (!cfg_.tie_output) out.push_back({"output.proj", &output_projection_});
  for (auto& s : sublayers_) {
    const std::string prefix = std::string(s.side == Side::kEncoder ? "enc." : "dec.") +
                               std::to_string(s.layer) + "." + std::string(to_string(s.kind)) + ".";
    if (s.kind == SublayerKind::kFeedForward) {
      out.push_back({prefix + "w1", &s.ffn.w1});
      out.push_back({prefix + "b1", &s.ffn.b1});
      out.push_back({prefix + "w2", &s.ffn.w2});
      out.push_back({prefix + "b2", &s.ffn.b2});
    } else {
      out.push_back({prefix + "wq", &s.attn.wq});
      out.push_back({prefix + "bq", &s.attn.bq});
      out.push_back({prefix + "wk", &s.attn.wk});
      out.push_back({prefix + "bk", &s.attn.bk});
      out.push_back({prefix + "wv", &s.attn.wv});
      out.push_back({prefix + "bv", &s.attn.bv});
      out.push_back({prefix + "wo", &s.attn.wo});
      out.push_back({prefix + "bo", &s.attn.bo});
    }
    out.push_back({prefix + "ln.gain", &s.ln.gain});
    out.push_back({prefix + "ln.bias", &s.ln.bias});
  }
  if (cfg_.strategy.kind == NormKind::kPreLN) {
    out.push_back({"enc.final_ln.gain", &final_ln_encoder_.gain});
    out.push_back({"enc.final_ln.bias", &final_ln_encoder_.bias});
    out.push_back({"dec.final_ln.gain", &final_ln_decoder_.gain});
    out.push_back({"dec.final_ln.bias", &final_ln_decoder_.bias});
  }
  return out;
}

std::vector<Tensor*> Model::branch_parameters(std::size_t l) {
  auto& s = sublayers_.at(l);
  if (s.kind == SublayerKind::kFeedForward) return {&s.ffn.w1, &s.ffn.b1, &s.ffn.w2, &s.ffn.b2};
  return {&s.attn.wq, &s.attn.bq, &s.attn.wk, &s.attn.bk,
          &s.attn.wv, &s.attn.bv, &s.attn.wo, &s.attn.bo};
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (auto& p : named_parameters()) n += p.tensor->size();
  return n;
}

void Model::zero_grad() {
  for (auto& p : named_parameters()) p.tensor->zero_grad();
}

Model Model::with_strategy(const NormStrategy& strategy) const {
  strategy.validate();
  Model copy = *this;
  const bool had_final = cfg_.strategy.kind == NormKind::kPreLN;
  const bool needs_final = strategy.kind == NormKind::kPreLN;
  copy.cfg_.strategy = strategy;
  if (needs_final && !had_final) {
    copy.final_ln_encoder_ = LayerNormParams::init(cfg_.d_model);
    copy.final_ln_decoder_ = LayerNormParams::init(cfg_.d_model);
  } else if (!needs_final) {
    copy.final_ln_encoder_ = {};
    copy.final_ln_decoder_ = {};
  }
  copy.zero_grad();
  return copy;
}

// Forward-pass machinery shared by the full model and the per-sublayer evaluators.
struct ForwardBuilder {
  Model& m;
  Tape& tape;
  const Batch& batch;
  std::int64_t t;
  bool train;
  std::mt19937_64* rng;
  std::vector<std::uint8_t> enc_mask, dec_mask, cross_mask;

  ForwardBuilder(Model& model, Tape& tp, const Batch& b, std::int64_t step, bool training,
                 std::mt19937_64* dropout_rng)
      : m(model), tape(tp), batch(b), t(step), train(training && dropout_rng != nullptr),
        rng(dropout_rng) {
    const std::size_t bs = b.size, s = b.src_len, q = b.tgt_len;
    enc_mask.assign(bs * s * s, 0);
    dec_mask.assign(bs * q * q, 0);
    cross_mask.assign(bs * q * s, 0);
    for (std::size_t i = 0; i < bs; ++i) {
      for (std::size_t r = 0; r < s; ++r) {
        for (std::size_t c = 0; c < s; ++c) enc_mask[(i * s + r) * s + c] = b.src[i * s + c] == kPadId;
      }
      for (std::size_t r = 0; r < q; ++r) {
        for (std::size_t c = 0; c < q; ++c) {
          dec_mask[(i * q + r) * q + c] = c > r || b.tgt_in[i * q + c] == kPadId;
        }
        for (std::size_t c = 0; c < s; ++c) cross_mask[(i * q + r) * s + c] = b.src[i * s + c] == kPadId;
      }
    }
  }

  Var maybe_dropout(Var x) {
    if (!train || m.cfg_.dropout == 0.0) return x;
    return dropout(x, m.cfg_.dropout, *rng);
  }

  Var embed(Tensor& table, const std::vector<int>& ids, std::size_t len) {
    const std::size_t d = m.cfg_.d_model;
    Var e = scale(embed_lookup(tape.parameter(table), ids), std::sqrt(static_cast<double>(d)));
    Tensor pe = Tensor::zeros({batch.size * len, d});
    for (std::size_t i = 0; i < batch.size; ++i) {
      std::copy_n(m.positions_.data.begin(), len * d, pe.data.begin() + i * len * d);
    }
    return maybe_dropout(add(e, tape.constant(std::move(pe))));
  }

  Var branch(std::size_t l, Var x, Var memory, Var* hidden) {
    Sublayer& s = m.sublayers_[l];
    const std::size_t h = m.cfg_.heads;
    switch (s.kind) {
      case SublayerKind::kFeedForward:
        return maybe_dropout(feed_forward(x, s.ffn, hidden));
      case SublayerKind::kSelfAttention:
        if (s.side == Side::kEncoder) {
          return maybe_dropout(attention(x, x, s.attn, {batch.size, batch.src_len, batch.src_len, h},
                                         enc_mask));
        }
        return maybe_dropout(
            attention(x, x, s.attn, {batch.size, batch.tgt_len, batch.tgt_len, h}, dec_mask));
      case SublayerKind::kCrossAttention:
        return maybe_dropout(attention(x, memory, s.attn,
                                       {batch.size, batch.tgt_len, batch.src_len, h}, cross_mask));
    }
    throw ConfigError("unknown sublayer kind");
  }

  Var apply(std::size_t l, Var x, Var memory, Var* hidden) {
    Sublayer& s = m.sublayers_[l];
    return sublayer_apply(
        m.cfg_.strategy, s.side, x, [&](Var in) { return branch(l, in, memory, hidden); }, s.ln,
        t, m.cfg_.ln_eps);
  }

  Var memory_from(Var encoder_top) {
    if (m.cfg_.strategy.kind == NormKind::kPreLN) {
      return layer_norm(encoder_top, m.final_ln_encoder_, m.cfg_.ln_eps);
    }
    return encoder_top;
  }

  Var logits_from(Var decoder_top) {
    Var h = decoder_top;
    if (m.cfg_.strategy.kind == NormKind::kPreLN) {
      h = layer_norm(h, m.final_ln_decoder_, m.cfg_.ln_eps);
    }
    if (m.cfg_.tie_output) return matmul(h, tape.parameter(m.tgt_embedding()), true);
    return matmul(h, tape.parameter(m.output_projection_));
  }

  Var run_encoder(ForwardTrace* trace) {
    const std::size_t n_enc = 2 * static_cast<std::size_t>(m.cfg_.encoder_layers);
    Var x = embed(m.src_embedding_, batch.src, batch.src_len);
    for (std::size_t l = 0; l < n_enc; ++l) {
      Var hidden;
      Var y = apply(l, x, Var{}, &hidden);
      if (trace != nullptr) record(*trace, l, x, y, hidden);
      x = y;
    }
    return x;
  }

  Var run_decoder(Var memory, ForwardTrace* trace) {
    const std::size_t n_enc = 2 * static_cast<std::size_t>(m.cfg_.encoder_layers);
    Var x = embed(m.tgt_embedding(), batch.tgt_in, batch.tgt_len);
    for (std::size_t l = n_enc; l < m.sublayers_.size(); ++l) {
      Var hidden;
      Var y = apply(l, x, memory, &hidden);
      if (trace != nullptr) record(*trace, l, x, y, hidden);
      x = y;
    }
    return x;
  }

  void record(ForwardTrace& trace, std::size_t l, Var x, Var y, Var hidden) {
    trace.sublayer_inputs.push_back(x);
    trace.sublayer_outputs.push_back(y);
    if (m.sublayers_[l].kind == SublayerKind::kFeedForward) {
      trace.ffn_hidden.push_back(hidden);
      trace.ffn_sublayer.push_back(l);
    }
  }
};

namespace {

void check_batch(const Model& m, const Batch& b) {
  const auto& cfg = m.config();
  if (b.size == 0 || b.src_len == 0 || b.tgt_len == 0) throw InputError("empty batch");
  if (b.src.size() != b.size * b.src_len || b.tgt_in.size() != b.size * b.tgt_len ||
      b.tgt_out.size() != b.size * b.tgt_len) {
    throw InputError("batch arrays do not match the declared layout");
  }
  if (b.src_len > cfg.max_len || b.tgt_len > cfg.max_len) {
    throw InputError("sequence length " + std::to_string(std::max(b.src_len, b.tgt_len)) +
                     " exceeds max_len " + std::to_string(cfg.max_len));
  }
  auto check_ids = [&](const std::vector<int>& ids, const char* what) {
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
        throw InputError(std::string(what) + " id " + std::to_string(id) +
                         " outside vocabulary of " + std::to_string(cfg.vocab_size));
      }
    }
  };
  check_ids(b.src, "source");
  check_ids(b.tgt_in, "target");
  check_ids(b.tgt_out, "target");
}

}  // namespace

ForwardTrace forward(Model& m, Tape& tape, const Batch& batch, std::int64_t t, bool train,
                     std::mt19937_64* dropout_rng) {
  check_batch(m, batch);
  if (t < 0) throw ContractError("forward: step must be nonnegative");
  ForwardBuilder fb(m, tape, batch, t, train, dropout_rng);
  ForwardTrace trace;
  trace.encoder_top = fb.run_encoder(&trace);
  trace.memory = fb.memory_from(trace.encoder_top);
  trace.decoder_top = fb.run_decoder(trace.memory, &trace);
  trace.logits = fb.logits_from(trace.decoder_top);
  return trace;
}

LossValue loss(Var logits, std::span<const int> targets, double smoothing) {
  if (smoothing < 0.0 || smoothing >= 1.0) throw ContractError("smoothing must lie in [0, 1)");
  const std::size_t vocab = logits.shape().at(1);
  for (int y : targets) {
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw InputError("target id " + std::to_string(y) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  Var lp = log_softmax(logits);
  LossValue out;
  out.objective = label_smoothed_nll(lp, targets, smoothing, kPadId);
  auto lpv = lp.value();
  double nll = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == kPadId) continue;
    nll -= lpv[i * vocab + static_cast<std::size_t>(targets[i])];
    ++out.tokens;
  }
  out.nll = nll / static_cast<double>(out.tokens);
  return out;
}

Tensor sublayer_output(Model& m, std::size_t l, const Tensor& x, const Batch& batch,
                       const Tensor& memory, std::int64_t t) {
  Tape tape;
  ForwardBuilder fb(m, tape, batch, t, false, nullptr);
  Var mem = memory.size() > 0 ? tape.constant(memory) : Var{};
  return fb.apply(l, tape.constant(x), mem, nullptr).to_tensor();
}

Tensor sublayer_branch(Model& m, std::size_t l, const Tensor& x, const Batch& batch,
                       const Tensor& memory) {
  Tape tape;
  ForwardBuilder fb(m, tape, batch, 0, false, nullptr);
  Var mem = memory.size() > 0 ? tape.constant(memory) : Var{};
  return fb.branch(l, tape.constant(x), mem, nullptr).to_tensor();
}

Tensor sublayer_norm(Model& m, std::size_t l, const Tensor& y) {
  Tape tape;
  return layer_norm(tape.constant(y), m.sublayers().at(l).ln, m.config().ln_eps).to_tensor();
}

Var embed_source(Model& m, Tape& tape, const Batch& batch) {
  check_batch(m, batch);
  ForwardBuilder fb(m, tape, batch, 0, false, nullptr);
  return fb.embed(m.src_embedding(), batch.src, batch.src_len);
}

Var embed_target(Model& m, Tape& tape, const Batch& batch) {
  check_batch(m, batch);
  ForwardBuilder fb(m, tape, batch, 0, false, nullptr);
  return fb.embed(m.tgt_embedding(), batch.tgt_in, batch.tgt_len);
}

Var project_logits(Model& m, Tape& tape, Var decoder_top) {
  Batch dummy;
  ForwardBuilder fb(m, tape, dummy, 0, false, nullptr);
  return fb.logits_from(decoder_top);
}

double loss_from_decoder_top(Model& m, const Tensor& top, const Batch& batch, double smoothing) {
  Tape tape;
  ForwardBuilder fb(m, tape, batch, 0, false, nullptr);
  Var logits = fb.logits_from(tape.constant(top));
  return loss(logits, batch.tgt_out, smoothing).objective.item();
}

double loss_from_encoder_top(Model& m, const Tensor& top, const Batch& batch, std::int64_t t,
                             double smoothing) {
  Tape tape;
  ForwardBuilder fb(m, tape, batch, t, false, nullptr);
  Var memory = fb.memory_from(tape.constant(top));
  Var logits = fb.logits_from(fb.run_decoder(memory, nullptr));
  return loss(logits, batch.tgt_out, smoothing).objective.item();
}

}  // namespace normlab
