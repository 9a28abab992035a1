#include "normlab/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <thread>

#include "normlab/hash.hpp"
#include "normlab/rng.hpp"

namespace normlab {

namespace {

constexpr std::uint64_t kDropoutStream = 0xD0;
constexpr std::uint64_t kPoolStream = 0x9001;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::vector<int> random_sequence(const TaskSpec& task, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(task.min_len, task.max_len);
  std::uniform_int_distribution<int> tok(kReservedTokens, static_cast<int>(task.vocab_size) - 1);
  std::vector<int> s(len(rng));
  for (int& v : s) v = tok(rng);
  return s;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  require(lr > 0 && std::isfinite(lr), "lr must be positive");
  require(warmup_updates >= 0, "warmup_updates must be nonnegative");
  require(warmup_init_lr >= 0, "warmup_init_lr must be nonnegative");
  require(adam_beta1 >= 0 && adam_beta1 < 1, "adam_beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0 && adam_beta2 < 1, "adam_beta2 must lie in [0, 1)");
  require(adam_eps > 0, "adam_eps must be positive");
  require(label_smoothing >= 0 && label_smoothing < 1, "label_smoothing must lie in [0, 1)");
  require(weight_decay >= 0, "weight_decay must be nonnegative");
  require(grad_clip >= 0, "grad_clip must be nonnegative");
  require(max_updates >= 1, "max_updates must be at least 1");
  require(batch_size_tokens >= 1, "batch_size_tokens must be at least 1");
  require(divergence.loss_blowup_factor > 0, "loss_blowup_factor must be positive");
  require(divergence.grace_steps >= 0, "grace_steps must be nonnegative");
  require(final_window >= 1, "final_window must be at least 1");
}

std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::kCopy ? "copy" : "reverse";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected copy or reverse)");
}

void TaskSpec::validate() const {
  require(vocab_size > static_cast<std::size_t>(kReservedTokens),
          "task vocab_size must exceed the 3 reserved tokens");
  require(min_len >= 1 && min_len <= max_len, "task lengths need 1 <= min_len <= max_len");
}

Batch sample_batch(const TaskSpec& task, std::int64_t step, std::size_t tokens) {
  task.validate();
  std::vector<std::vector<int>> pool;
  if (task.samples > 0) {
    std::mt19937_64 prng(derive_seed(task.seed, kPoolStream));
    for (std::size_t i = 0; i < task.samples; ++i) pool.push_back(random_sequence(task, prng));
  }
  std::mt19937_64 rng(derive_seed(task.seed, static_cast<std::uint64_t>(step)));
  std::vector<std::vector<int>> src, tgt_in, tgt_out;
  std::size_t count = 0;
  while (count < tokens) {
    std::vector<int> s;
    if (pool.empty()) {
      s = random_sequence(task, rng);
    } else {
      s = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    }
    std::vector<int> y = s;
    if (task.kind == TaskKind::kReverse) std::reverse(y.begin(), y.end());
    std::vector<int> in{kBosId};
    in.insert(in.end(), y.begin(), y.end());
    y.push_back(kEosId);
    count += y.size();
    src.push_back(std::move(s));
    tgt_in.push_back(std::move(in));
    tgt_out.push_back(std::move(y));
  }
  return Batch::from_sequences(src, tgt_in, tgt_out);
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 1) throw ContractError("lr_at: step must be at least 1");
  const auto w = cfg.warmup_updates;
  if (w == 0) return cfg.lr;
  if (step <= w) {
    return cfg.warmup_init_lr +
           (cfg.lr - cfg.warmup_init_lr) * static_cast<double>(step) / static_cast<double>(w);
  }
  return cfg.lr * std::sqrt(static_cast<double>(w) / static_cast<double>(step));
}

void adam_step(const std::vector<Tensor*>& params, AdamState& state, double lr,
               const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (Tensor* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: state holds " + std::to_string(state.m.size()) +
                        " tensors, got " + std::to_string(params.size()));
  }
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size() || v.size() != p.size() || (p.grad && p.grad->size() != p.size())) {
      throw ContractError("adam_step: moment or gradient shape differs from parameter " +
                          std::to_string(i) + " " + to_string(p.shape));
    }
    const double decay = p.rank() == 2 ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double g = p.grad ? (*p.grad)[k] : 0.0;
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      p.data[k] = p.data[k] * decay - lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
    }
  }
}

double grad_norm(const std::vector<Tensor*>& params) {
  double sq = 0.0;
  for (const Tensor* p : params) {
    if (!p->grad) continue;
    for (double g : *p->grad) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0 && norm > max_norm && std::isfinite(norm)) {
    const double c = max_norm / norm;
    for (Tensor* p : params) {
      if (!p->grad) continue;
      for (double& g : *p->grad) g *= c;
    }
  }
  return norm;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const TaskSpec& task, const RecordSink& sink) {
  model_cfg.validate();
  train_cfg.validate();
  task.validate();
  if (task.vocab_size > model_cfg.vocab_size) {
    throw ConfigError("task vocab_size " + std::to_string(task.vocab_size) +
                      " exceeds model vocab_size " + std::to_string(model_cfg.vocab_size));
  }
  if (task.max_len + 1 > model_cfg.max_len) {
    throw ConfigError("task sequences of length " + std::to_string(task.max_len + 1) +
                      " exceed model max_len " + std::to_string(model_cfg.max_len));
  }

  TrainResult out{Model(model_cfg), {}, false, 0, 0.0, 0.0};
  Model& m = out.model;
  std::vector<Tensor*> params;
  for (auto& [name, p] : m.named_parameters()) params.push_back(p);
  AdamState state;
  std::mt19937_64 dropout_rng(derive_seed(train_cfg.seed, kDropoutStream));
  const auto& pol = train_cfg.divergence;

  for (std::int64_t step = 1; step <= train_cfg.max_updates; ++step) {
    Batch batch = sample_batch(task, step, train_cfg.batch_size_tokens);
    m.zero_grad();
    TrainRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, train_cfg);
    rec.alpha = model_cfg.strategy.kind == NormKind::kBranchNorm
                    ? model_cfg.strategy.branch_scale(step)
                    : 1.0;
    {
      Tape tape;
      ForwardTrace tr = forward(m, tape, batch, step, true, &dropout_rng);
      LossValue lv = loss(tr.logits, batch.tgt_out, train_cfg.label_smoothing);
      rec.loss = lv.nll;
      rec.objective = lv.objective.item();
      tape.backward(lv.objective);
    }
    rec.grad_norm = clip_grad_norm(params, train_cfg.grad_clip);
    if (step == 1) out.initial_loss = rec.loss;

    bool bad = false;
    if (pol.nan_is_divergence && (!std::isfinite(rec.loss) || !std::isfinite(rec.grad_norm))) {
      bad = true;
    }
    if (step > pol.grace_steps && rec.loss > pol.loss_blowup_factor * out.initial_loss) bad = true;
    if (!bad) {
      adam_step(params, state, rec.lr, train_cfg);
      if (pol.nan_is_divergence) {
        bad = std::any_of(params.begin(), params.end(), [](const Tensor* p) { return !p->all_finite(); });
      }
    }
    rec.diverged = bad;
    out.records.push_back(rec);
    out.steps = step;
    if (sink) sink(rec);
    if (bad) {
      out.diverged = true;
      break;
    }
  }

  double total = 0.0;
  std::int64_t counted = 0;
  for (auto it = out.records.rbegin(); it != out.records.rend() && counted < train_cfg.final_window;
       ++it) {
    if (!std::isfinite(it->loss)) continue;
    total += it->loss;
    ++counted;
  }
  out.final_loss = counted > 0 ? total / static_cast<double>(counted) : NAN;
  return out;
}

std::string parameter_checksum(Model& m) {
  std::uint64_t h = kFnvOffset;
  for (auto& [name, p] : m.named_parameters()) {
    h = fnv1a({reinterpret_cast<const char*>(p->data.data()), p->data.size() * sizeof(double)}, h);
  }
  return hex64(h);
}

std::vector<SweepCell> expand_grid(const SweepGrid& grid, const ModelConfig& base_model,
                                   const TrainConfig& base_train) {
  auto strategies = grid.strategies;
  if (strategies.empty()) {
    strategies = {NormKind::kPostLN, NormKind::kPreLN, NormKind::kDeepNorm, NormKind::kBranchNorm};
  }
  auto depths = grid.depths;
  if (depths.empty()) depths = {base_model.encoder_layers};
  auto ts = grid.max_norm_steps;
  if (ts.empty()) ts = {base_model.strategy.max_norm_step};
  auto warmups = grid.warmups;
  if (warmups.empty()) warmups = {base_train.warmup_updates};
  auto lrs = grid.lrs;
  if (lrs.empty()) lrs = {base_train.lr};

  std::vector<SweepCell> cells;
  for (auto s : strategies)
    for (int d : depths)
      for (auto t : ts)
        for (auto w : warmups)
          for (double lr : lrs) cells.push_back({s, d, t, w, lr});
  return cells;
}

std::pair<ModelConfig, TrainConfig> cell_configs(const SweepCell& cell, const ModelConfig& base_model,
                                                 const TrainConfig& base_train) {
  ModelConfig mc = base_model;
  TrainConfig tc = base_train;
  mc.encoder_layers = mc.decoder_layers = cell.depth;
  NormStrategy s = base_model.strategy;
  s.kind = cell.strategy;
  s.max_norm_step = cell.max_norm_step;
  if (cell.strategy == NormKind::kDeepNorm) s.deepnorm = deepnorm_coeffs(cell.depth, cell.depth);
  mc.strategy = s;
  tc.warmup_updates = cell.warmup;
  tc.lr = cell.lr;
  return {mc, tc};
}

std::vector<SweepRow> sweep(const SweepGrid& grid, const ModelConfig& base_model,
                            const TrainConfig& base_train, const TaskSpec& task,
                            std::size_t workers) {
  const auto cells = expand_grid(grid, base_model, base_train);
  if (cells.empty()) throw ConfigError("sweep grid is empty");
  std::vector<SweepRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      SweepRow& row = rows[i];
      row.cell = cells[i];
      try {
        auto [mc, tc] = cell_configs(cells[i], base_model, base_train);
        TrainResult r = train(mc, tc, task);
        row.final_loss = r.final_loss;
        row.diverged = r.diverged;
        row.steps = r.steps;
        row.records = std::move(r.records);
      } catch (const std::exception& e) {
        row.error = e.what();
        row.final_loss = NAN;
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "strategy,depth,T,warmup,lr,final_loss,diverged,steps,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << to_string(r.cell.strategy) << ',' << r.cell.depth << ',' << r.cell.max_norm_step << ','
       << r.cell.warmup << ',' << fmt(r.cell.lr) << ',' << fmt(r.final_loss) << ','
       << (r.diverged ? 1 : 0) << ',' << r.steps << ',' << err << '\n';
  }
  return os.str();
}

}  // namespace normlab
