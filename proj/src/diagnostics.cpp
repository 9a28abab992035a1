#include "normlab/diagnostics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "normlab/finite_diff.hpp"
#include "normlab/ops.hpp"

namespace normlab {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;

std::vector<double> grad_or_zeros(const Var& v) {
  auto g = v.grad();
  if (g.empty()) return std::vector<double>(v.value().size(), 0.0);
  return {g.begin(), g.end()};
}

double tensor_grad_norm(const Tensor& t) {
  return t.grad ? l2_norm(*t.grad) : 0.0;
}

RowVec as_row(std::span<const double> v) {
  return Eigen::Map<const RowVec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Mat as_mat(const Tensor& t) {
  return Eigen::Map<const Mat>(t.data.data(), static_cast<Eigen::Index>(t.shape.at(0)),
                               static_cast<Eigen::Index>(t.shape.at(1)));
}

double rel(const RowVec& a, const RowVec& b) {
  return relative_error({a.data(), static_cast<std::size_t>(a.size())},
                        {b.data(), static_cast<std::size_t>(b.size())});
}

std::size_t encoder_sublayers(const Model& m) {
  return 2 * static_cast<std::size_t>(m.config().encoder_layers);
}

std::vector<std::uint8_t> keep_rows(const std::vector<int>& ids) {
  std::vector<std::uint8_t> keep(ids.size());
  std::transform(ids.begin(), ids.end(), keep.begin(), [](int id) { return id != kPadId; });
  return keep;
}

double objective_at(Model& m, const Batch& batch, std::int64_t t, double smoothing) {
  Tape tape;
  auto tr = forward(m, tape, batch, t, false);
  return loss(tr.logits, batch.tgt_out, smoothing).objective.item();
}

}  // namespace

ProbeReport grad_probe(Model& m, const Batch& batch, std::int64_t t, double smoothing) {
  m.zero_grad();
  Tape tape;
  ForwardTrace tr = forward(m, tape, batch, t, false);
  LossValue lv = loss(tr.logits, batch.tgt_out, smoothing);

  ProbeReport r;
  r.step = t;
  r.strategy = std::string(to_string(m.config().strategy.kind));
  r.loss = lv.objective.item();
  r.nll = lv.nll;
  const std::size_t n = m.sublayer_count();

  for (std::size_t l = 0; l < n; ++l) {
    if (!all_finite(tr.sublayer_outputs[l].value())) {
      r.diverged = true;
      r.diverged_sublayer = static_cast<int>(l);
      break;
    }
  }
  if (!std::isfinite(r.loss)) r.diverged = true;

  tape.backward(lv.objective);
  for (std::size_t l = 0; l < n; ++l) {
    r.input_grad_norms.push_back(l2_norm(grad_or_zeros(tr.sublayer_inputs[l])));
    double sq = 0.0;
    for (Tensor* p : m.branch_parameters(l)) sq += std::pow(tensor_grad_norm(*p), 2);
    r.param_grad_norms.push_back(std::sqrt(sq));
    auto& ln = m.sublayers()[l].ln;
    r.ln_grad_norms.push_back(std::hypot(tensor_grad_norm(ln.gain), tensor_grad_norm(ln.bias)));
  }
  double sq = 0.0;
  for (auto& [name, p] : m.named_parameters()) sq += std::pow(tensor_grad_norm(*p), 2);
  r.global_grad_norm = std::sqrt(sq);

  if (!r.diverged && !std::isfinite(r.global_grad_norm)) r.diverged = true;
  if (r.diverged && r.diverged_sublayer < 0) {
    for (std::size_t l = 0; l < n; ++l) {
      if (!std::isfinite(r.input_grad_norms[l]) || !std::isfinite(r.param_grad_norms[l])) {
        r.diverged_sublayer = static_cast<int>(l);
        break;
      }
    }
  }
  return r;
}

std::vector<double> layer_norm_chain_grad_norms(Model& m, const Batch& batch, double smoothing) {
  Tape tape;
  const auto& cfg = m.config();
  const bool pre = cfg.strategy.kind == NormKind::kPreLN;
  const std::size_t n_enc = encoder_sublayers(m);
  std::vector<Var> inputs;
  auto run = [&](Var x, std::size_t from, std::size_t to) {
    for (std::size_t l = from; l < to; ++l) {
      inputs.push_back(x);
      if (!pre) x = layer_norm(x, m.sublayers()[l].ln, cfg.ln_eps);
    }
    return x;
  };
  run(embed_source(m, tape, batch), 0, n_enc);
  Var top = run(embed_target(m, tape, batch), n_enc, m.sublayer_count());
  Var objective = loss(project_logits(m, tape, top), batch.tgt_out, smoothing).objective;
  tape.backward(objective);
  m.zero_grad();
  std::vector<double> norms;
  for (const Var& x : inputs) norms.push_back(l2_norm(grad_or_zeros(x)));
  return norms;
}

ChainOracleReport jacobian_chain_oracle(Model& m, const Batch& batch, std::int64_t t,
                                        double smoothing, double h) {
  const auto& cfg = m.config();
  if (cfg.d_model > kOracleMaxWidth || m.sublayer_count() > kOracleMaxSublayers ||
      batch.src_len > kOracleMaxLength || batch.tgt_len > kOracleMaxLength) {
    throw ContractError("jacobian_chain_oracle: instance too large for dense Jacobians (d=" +
                        std::to_string(cfg.d_model) + ", L=" +
                        std::to_string(m.sublayer_count()) + ", lengths " +
                        std::to_string(batch.src_len) + "/" + std::to_string(batch.tgt_len) +
                        "; limits d<=8, L<=6, length<=3)");
  }

  Tape tape;
  ForwardTrace tr = forward(m, tape, batch, t, false);
  tape.backward(loss(tr.logits, batch.tgt_out, smoothing).objective);
  m.zero_grad();

  const Tensor memory = tr.memory.to_tensor();
  const std::size_t n_enc = encoder_sublayers(m);
  const NormStrategy& st = cfg.strategy;
  ChainOracleReport out;
  out.relative_errors.resize(m.sublayer_count());
  out.factored_errors.resize(m.sublayer_count());

  auto chain_stack = [&](std::size_t from, std::size_t to, const RowVec& top_grad) {
    RowVec g = top_grad;
    RowVec gf = top_grad;
    Mat residual_product;
    for (std::size_t l = to; l-- > from;) {
      const Tensor x = tr.sublayer_inputs[l].to_tensor();
      const std::size_t n = x.size();
      const Mat j = as_mat(finite_diff_jacobian(
          [&](const Tensor& xi) { return sublayer_output(m, l, xi, batch, memory, t).data; }, x,
          h));

      // Factored form: LN term times residual term.
      const Mat eye = Mat::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
      Mat jf_total;
      Mat r;
      if (st.kind == NormKind::kPreLN) {
        const Tensor z = sublayer_norm(m, l, x);
        const Mat jln = as_mat(finite_diff_jacobian(
            [&](const Tensor& xi) { return sublayer_norm(m, l, xi).data; }, x, h));
        const Mat jf = as_mat(finite_diff_jacobian(
            [&](const Tensor& zi) { return sublayer_branch(m, l, zi, batch, memory).data; }, z,
            h));
        r = eye + jf * jln;
        jf_total = r;
      } else {
        const Tensor fx = sublayer_branch(m, l, x, batch, memory);
        const double cr = st.residual_scale(m.sublayers()[l].side);
        const double cb = st.branch_scale(t);
        Tensor y = x;
        for (std::size_t i = 0; i < n; ++i) y.data[i] = cr * x.data[i] + cb * fx.data[i];
        const Mat jln = as_mat(finite_diff_jacobian(
            [&](const Tensor& yi) { return sublayer_norm(m, l, yi).data; }, y, h));
        const Mat jf = as_mat(finite_diff_jacobian(
            [&](const Tensor& xi) { return sublayer_branch(m, l, xi, batch, memory).data; }, x,
            h));
        r = cr * eye + cb * jf;
        jf_total = jln * r;
      }
      residual_product = residual_product.size() == 0 ? r : Mat(r * residual_product);

      g = g * j;
      gf = gf * jf_total;
      const RowVec truth = as_row(grad_or_zeros(tr.sublayer_inputs[l]));
      out.relative_errors[l] = rel(g, truth);
      out.factored_errors[l] = rel(gf, truth);
    }
    const Mat eye = Mat::Identity(residual_product.rows(), residual_product.cols());
    out.residual_identity_error =
        std::max(out.residual_identity_error, (residual_product - eye).cwiseAbs().maxCoeff());
  };

  const Tensor enc_top = tr.encoder_top.to_tensor();
  const Tensor dec_top = tr.decoder_top.to_tensor();
  const Tensor g_enc = finite_diff(
      [&](const Tensor& v) { return loss_from_encoder_top(m, v, batch, t, smoothing); }, enc_top,
      h);
  const Tensor g_dec = finite_diff(
      [&](const Tensor& v) { return loss_from_decoder_top(m, v, batch, smoothing); }, dec_top, h);
  chain_stack(0, n_enc, as_row(g_enc.data));
  chain_stack(n_enc, m.sublayer_count(), as_row(g_dec.data));

  out.max_relative_error = *std::max_element(out.relative_errors.begin(), out.relative_errors.end());
  out.max_factored_error = *std::max_element(out.factored_errors.begin(), out.factored_errors.end());
  return out;
}

LnChainGapReport ln_chain_approximation_gap(Model& m, const Batch& batch, double smoothing,
                                            double h) {
  Tape tape;
  ForwardTrace tr = forward(m, tape, batch, 0, false);
  tape.backward(loss(tr.logits, batch.tgt_out, smoothing).objective);
  m.zero_grad();

  const std::size_t n_enc = encoder_sublayers(m);
  LnChainGapReport out;
  out.relative_gaps.resize(m.sublayer_count());
  out.norm_gaps.resize(m.sublayer_count());
  auto chain_stack = [&](std::size_t from, std::size_t to, const Var& top) {
    RowVec g = as_row(grad_or_zeros(top));
    for (std::size_t l = to; l-- > from;) {
      const Tensor x = tr.sublayer_inputs[l].to_tensor();
      g = g * as_mat(finite_diff_jacobian(
                  [&](const Tensor& xi) { return sublayer_norm(m, l, xi).data; }, x, h));
      const RowVec truth = as_row(grad_or_zeros(tr.sublayer_inputs[l]));
      const double tn = truth.norm();
      out.relative_gaps[l] = (truth - g).norm() / tn;
      out.norm_gaps[l] = std::abs(tn - g.norm()) / tn;
    }
  };
  chain_stack(0, n_enc, tr.encoder_top);
  chain_stack(n_enc, m.sublayer_count(), tr.decoder_top);
  out.max_relative_gap = *std::max_element(out.relative_gaps.begin(), out.relative_gaps.end());
  out.max_norm_gap = *std::max_element(out.norm_gaps.begin(), out.norm_gaps.end());
  return out;
}

GradientCheckReport model_gradient_check(Model& m, const Batch& batch, std::int64_t t,
                                         double smoothing, double h) {
  m.zero_grad();
  {
    Tape tape;
    auto tr = forward(m, tape, batch, t, false);
    tape.backward(loss(tr.logits, batch.tgt_out, smoothing).objective);
  }
  GradientCheckReport out;
  std::vector<double> all_ad;
  std::vector<double> all_fd;
  for (auto& [name, p] : m.named_parameters()) {
    const std::vector<double> ad = p->grad_or_zeros();
    std::vector<double> fd(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double keep = p->data[i];
      p->data[i] = keep + h;
      const double up = objective_at(m, batch, t, smoothing);
      p->data[i] = keep - h;
      const double down = objective_at(m, batch, t, smoothing);
      p->data[i] = keep;
      fd[i] = (up - down) / (2.0 * h);
    }
    const double err = relative_error(ad, fd);
    if (out.worst_tensor.empty() || err > out.max_tensor_error) {
      out.max_tensor_error = err;
      out.worst_tensor = name;
    }
    all_ad.insert(all_ad.end(), ad.begin(), ad.end());
    all_fd.insert(all_fd.end(), fd.begin(), fd.end());
    out.parameters += p->size();
  }
  out.global_relative_error = relative_error(all_ad, all_fd);
  m.zero_grad();
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw UndefinedSimilarityError("cosine of a zero vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

MeanCosine mean_row_cosine(std::span<const double> a, std::span<const double> b,
                           std::size_t width, std::span<const std::uint8_t> keep) {
  if (width == 0 || a.size() != b.size() || a.size() % width != 0) {
    throw DimensionError("mean_row_cosine: arrays of " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " entries do not form rows of width " +
                         std::to_string(width));
  }
  const std::size_t rows = a.size() / width;
  if (!keep.empty() && keep.size() != rows) throw DimensionError("mean_row_cosine: mask length");
  MeanCosine out;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!keep.empty() && keep[r] == 0) continue;
    auto ra = a.subspan(r * width, width);
    auto rb = b.subspan(r * width, width);
    if (l2_norm(ra) == 0.0 || l2_norm(rb) == 0.0) {
      ++out.skipped;
      continue;
    }
    total += cosine_similarity(ra, rb);
    ++out.used;
  }
  if (out.used == 0) {
    throw UndefinedSimilarityError("every position has a zero representation (" +
                                   std::to_string(out.skipped) + " skipped)");
  }
  out.mean = total / static_cast<double>(out.used);
  return out;
}

double relu_sparsity(std::span<const double> activations) {
  if (activations.empty()) return 0.0;
  const auto positive = std::count_if(activations.begin(), activations.end(),
                                      [](double v) { return v > 0.0; });
  return static_cast<double>(positive) / static_cast<double>(activations.size());
}

namespace {

AnalysisReport run_analysis(Model& m, const Batch& batch, std::int64_t t, bool similarity,
                            bool sparsity) {
  Tape tape;
  ForwardTrace tr = forward(m, tape, batch, t, false);
  const auto& cfg = m.config();
  const std::size_t d = cfg.d_model;
  const std::size_t n_enc = encoder_sublayers(m);
  const auto enc_keep = keep_rows(batch.src);
  const auto dec_keep = keep_rows(batch.tgt_in);
  AnalysisReport out;

  if (similarity) {
    auto pairs = [&](const std::vector<std::size_t>& taps, const std::vector<std::uint8_t>& keep,
                     std::vector<double>& dst) {
      for (std::size_t i = 0; i + 1 < taps.size(); ++i) {
        auto c = mean_row_cosine(tr.sublayer_outputs[taps[i]].value(),
                                 tr.sublayer_outputs[taps[i + 1]].value(), d, keep);
        dst.push_back(c.mean);
        out.skipped_positions += c.skipped;
      }
    };
    std::vector<std::size_t> enc_layers, dec_layers, enc_sub, dec_sub;
    for (int i = 0; i < cfg.encoder_layers; ++i) enc_layers.push_back(2 * i + 1);
    for (int i = 0; i < cfg.decoder_layers; ++i) dec_layers.push_back(n_enc + 3 * i + 2);
    for (std::size_t l = 0; l < n_enc; ++l) enc_sub.push_back(l);
    for (std::size_t l = n_enc; l < m.sublayer_count(); ++l) dec_sub.push_back(l);
    pairs(enc_layers, enc_keep, out.encoder_cosines);
    pairs(dec_layers, dec_keep, out.decoder_cosines);
    pairs(enc_sub, enc_keep, out.encoder_sublayer_cosines);
    pairs(dec_sub, dec_keep, out.decoder_sublayer_cosines);
  }

  if (sparsity) {
    for (std::size_t k = 0; k < tr.ffn_hidden.size(); ++k) {
      const auto& keep = tr.ffn_sublayer[k] < n_enc ? enc_keep : dec_keep;
      auto hidden = tr.ffn_hidden[k].value();
      const std::size_t width = hidden.size() / keep.size();
      std::size_t positive = 0;
      std::size_t counted = 0;
      const bool any = std::any_of(keep.begin(), keep.end(), [](auto v) { return v != 0; });
      for (std::size_t r = 0; r < keep.size(); ++r) {
        if (any && keep[r] == 0) continue;
        for (std::size_t c = 0; c < width; ++c) positive += hidden[r * width + c] > 0.0;
        counted += width;
      }
      out.sparsity.push_back(static_cast<double>(positive) / static_cast<double>(counted));
    }
  }
  return out;
}

}  // namespace

AnalysisReport repr_similarity(Model& m, const Batch& batch, std::int64_t t) {
  return run_analysis(m, batch, t, true, false);
}

AnalysisReport activation_sparsity(Model& m, const Batch& batch, std::int64_t t) {
  return run_analysis(m, batch, t, false, true);
}

AnalysisReport analyze(Model& m, const Batch& batch, std::int64_t t) {
  return run_analysis(m, batch, t, true, true);
}

}  // namespace normlab
