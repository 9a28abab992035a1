#include "normlab/io.hpp"

#include <unistd.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace normlab {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

// Strict view of one JSON object: every key read is remembered and any key
// left over at finish() is an error.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    dst = convert<T>(*it, where(key));
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + where(it.key()) + "'");
    }
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + " must be a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + " must be a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + " must be a number");
      return v.get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError(where + " must be a nonnegative integer");
      }
      return static_cast<T>(v.get<std::uint64_t>());
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where + " must be an integer");
      return static_cast<T>(v.get<std::int64_t>());
    } else {
      // sequences
      if (!v.is_array()) throw ConfigError(where + " must be an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

double number_or_nan(const json& v) { return v.is_null() ? NAN : v.get<double>(); }

std::vector<double> numbers_or_nan(const json& v) {
  std::vector<double> out;
  for (const auto& x : v) out.push_back(number_or_nan(x));
  return out;
}

// Little-endian byte buffer.
class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <class T>
  void pod(T v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Cursor {
 public:
  explicit Cursor(std::string_view b) : b_(b) {}
  void raw(void* p, std::size_t n) {
    if (n > b_.size() - pos_) throw CheckpointError("checkpoint is truncated");
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  template <class T>
  T pod() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    auto n = pod<std::uint32_t>();
    if (n > b_.size() - pos_) throw CheckpointError("checkpoint is truncated");
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[8] = {'N', 'L', 'C', 'K', 'P', 'T', '\0', '\0'};

}  // namespace

void RunConfig::resolve() {
  model.seed = params_seed;
  train.seed = params_seed;
  task.seed = data_seed;
  if (model.strategy.kind == NormKind::kDeepNorm) {
    model.strategy.deepnorm = deepnorm_override.value_or(
        deepnorm_coeffs(model.encoder_layers, model.decoder_layers));
  }
}

void RunConfig::validate() const {
  if (version != kConfigVersion) {
    throw ConfigError("config version " + std::to_string(version) +
                      " is not supported (this build reads version " +
                      std::to_string(kConfigVersion) + ")");
  }
  model.validate();
  train.validate();
  task.validate();
  if (task.vocab_size > model.vocab_size) {
    throw ConfigError("task.vocab_size exceeds model.vocab_size");
  }
  if (task.max_len + 1 > model.max_len) throw ConfigError("task.max_len + 1 exceeds model.max_len");
  if (probe_step < 0) throw ConfigError("probe.step must be nonnegative");
  if (workers < 1) throw ConfigError("sweep.workers must be at least 1");
  for (int d : grid.depths) {
    if (d < 1) throw ConfigError("sweep.depths entries must be positive");
  }
  for (auto t : grid.max_norm_steps) {
    if (t < 1) throw ConfigError("sweep.max_norm_steps entries must be positive");
  }
  for (auto w : grid.warmups) {
    if (w < 0) throw ConfigError("sweep.warmups entries must be nonnegative");
  }
  for (double lr : grid.lrs) {
    if (!(lr > 0)) throw ConfigError("sweep.lrs entries must be positive");
  }
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  ObjectReader top(j, "");
  top.get("version", c.version);
  if (c.version != kConfigVersion) c.validate();  // reports the version mismatch
  top.get("output_dir", c.output_dir);

  if (const json* s = top.sub("seeds")) {
    ObjectReader r(*s, "seeds");
    r.get("params", c.params_seed);
    r.get("data", c.data_seed);
    r.finish();
  }

  if (const json* t = top.sub("task")) {
    ObjectReader r(*t, "task");
    std::string kind = std::string(to_string(c.task.kind));
    r.get("kind", kind);
    c.task.kind = parse_task_kind(kind);
    r.get("vocab_size", c.task.vocab_size);
    r.get("min_len", c.task.min_len);
    r.get("max_len", c.task.max_len);
    r.get("samples", c.task.samples);
    r.finish();
  }

  c.model.vocab_size = c.task.vocab_size;
  if (const json* m = top.sub("model")) {
    ObjectReader r(*m, "model");
    r.get("encoder_layers", c.model.encoder_layers);
    r.get("decoder_layers", c.model.decoder_layers);
    r.get("d_model", c.model.d_model);
    r.get("d_ffn", c.model.d_ffn);
    r.get("heads", c.model.heads);
    r.get("vocab_size", c.model.vocab_size);
    r.get("max_len", c.model.max_len);
    r.get("dropout", c.model.dropout);
    r.get("share_embeddings", c.model.share_embeddings);
    r.get("tie_output", c.model.tie_output);
    r.get("ln_eps", c.model.ln_eps);
    r.finish();
  }

  if (const json* s = top.sub("strategy")) {
    ObjectReader r(*s, "strategy");
    auto& st = c.model.strategy;
    std::string kind = std::string(to_string(st.kind));
    r.get("kind", kind);
    st.kind = parse_norm_kind(kind);
    r.get("max_norm_step", st.max_norm_step);
    std::string schedule = std::string(to_string(st.schedule.variant));
    r.get("schedule", schedule);
    st.schedule.variant = parse_schedule_variant(schedule);
    r.get("exp_k", st.schedule.exp_k);
    r.get("sigmoid_s", st.schedule.sigmoid_s);
    r.get("beta_init", st.beta_init);
    if (const json* d = r.sub("deepnorm")) {
      ObjectReader dr(*d, "strategy.deepnorm");
      DeepNormCoeffs k;
      dr.get("alpha_encoder", k.alpha_encoder);
      dr.get("beta_encoder", k.beta_encoder);
      dr.get("alpha_decoder", k.alpha_decoder);
      dr.get("beta_decoder", k.beta_decoder);
      dr.finish();
      c.deepnorm_override = k;
    }
    r.finish();
  }

  if (const json* t = top.sub("train")) {
    ObjectReader r(*t, "train");
    auto& tc = c.train;
    r.get("lr", tc.lr);
    r.get("warmup_updates", tc.warmup_updates);
    r.get("warmup_init_lr", tc.warmup_init_lr);
    r.get("adam_beta1", tc.adam_beta1);
    r.get("adam_beta2", tc.adam_beta2);
    r.get("adam_eps", tc.adam_eps);
    r.get("label_smoothing", tc.label_smoothing);
    r.get("weight_decay", tc.weight_decay);
    r.get("grad_clip", tc.grad_clip);
    r.get("max_updates", tc.max_updates);
    r.get("batch_size_tokens", tc.batch_size_tokens);
    r.get("final_window", tc.final_window);
    if (const json* d = r.sub("divergence")) {
      ObjectReader dr(*d, "train.divergence");
      dr.get("nan_is_divergence", tc.divergence.nan_is_divergence);
      dr.get("loss_blowup_factor", tc.divergence.loss_blowup_factor);
      dr.get("grace_steps", tc.divergence.grace_steps);
      dr.finish();
    }
    r.finish();
  }

  if (const json* p = top.sub("probe")) {
    ObjectReader r(*p, "probe");
    r.get("step", c.probe_step);
    r.finish();
  }

  if (const json* s = top.sub("sweep")) {
    ObjectReader r(*s, "sweep");
    std::vector<std::string> names;
    r.get("strategies", names);
    for (const auto& n : names) c.grid.strategies.push_back(parse_norm_kind(n));
    r.get("depths", c.grid.depths);
    r.get("max_norm_steps", c.grid.max_norm_steps);
    r.get("warmups", c.grid.warmups);
    r.get("lrs", c.grid.lrs);
    r.get("workers", c.workers);
    r.finish();
  }
  top.finish();

  c.resolve();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse config '" + path + "': " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& st = m.strategy;
  const auto& t = c.train;
  json strategy = {{"kind", to_string(st.kind)},
                   {"max_norm_step", st.max_norm_step},
                   {"schedule", to_string(st.schedule.variant)},
                   {"exp_k", st.schedule.exp_k},
                   {"sigmoid_s", st.schedule.sigmoid_s},
                   {"beta_init", st.beta_init}};
  if (c.deepnorm_override) {
    const auto& d = *c.deepnorm_override;
    strategy["deepnorm"] = {{"alpha_encoder", d.alpha_encoder},
                            {"beta_encoder", d.beta_encoder},
                            {"alpha_decoder", d.alpha_decoder},
                            {"beta_decoder", d.beta_decoder}};
  }
  std::vector<std::string> strategies;
  for (auto k : c.grid.strategies) strategies.emplace_back(to_string(k));
  return json{
      {"version", c.version},
      {"output_dir", c.output_dir},
      {"seeds", {{"params", c.params_seed}, {"data", c.data_seed}}},
      {"model",
       {{"encoder_layers", m.encoder_layers},
        {"decoder_layers", m.decoder_layers},
        {"d_model", m.d_model},
        {"d_ffn", m.d_ffn},
        {"heads", m.heads},
        {"vocab_size", m.vocab_size},
        {"max_len", m.max_len},
        {"dropout", m.dropout},
        {"share_embeddings", m.share_embeddings},
        {"tie_output", m.tie_output},
        {"ln_eps", m.ln_eps}}},
      {"strategy", strategy},
      {"train",
       {{"lr", t.lr},
        {"warmup_updates", t.warmup_updates},
        {"warmup_init_lr", t.warmup_init_lr},
        {"adam_beta1", t.adam_beta1},
        {"adam_beta2", t.adam_beta2},
        {"adam_eps", t.adam_eps},
        {"label_smoothing", t.label_smoothing},
        {"weight_decay", t.weight_decay},
        {"grad_clip", t.grad_clip},
        {"max_updates", t.max_updates},
        {"batch_size_tokens", t.batch_size_tokens},
        {"final_window", t.final_window},
        {"divergence",
         {{"nan_is_divergence", t.divergence.nan_is_divergence},
          {"loss_blowup_factor", t.divergence.loss_blowup_factor},
          {"grace_steps", t.divergence.grace_steps}}}}},
      {"task",
       {{"kind", to_string(c.task.kind)},
        {"vocab_size", c.task.vocab_size},
        {"min_len", c.task.min_len},
        {"max_len", c.task.max_len},
        {"samples", c.task.samples}}},
      {"probe", {{"step", c.probe_step}}},
      {"sweep",
       {{"strategies", strategies},
        {"depths", c.grid.depths},
        {"max_norm_steps", c.grid.max_norm_steps},
        {"warmups", c.grid.warmups},
        {"lrs", c.grid.lrs},
        {"workers", c.workers}}}};
}

std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a(to_json(cfg).dump())); }

json to_json(const TrainRecord& r) {
  return {{"step", r.step},           {"lr", r.lr},
          {"loss", r.loss},           {"objective", r.objective},
          {"alpha", r.alpha},         {"grad_norm", r.grad_norm},
          {"diverged", r.diverged}};
}

TrainRecord train_record_from_json(const json& j) {
  TrainRecord r;
  r.step = j.at("step").get<std::int64_t>();
  r.lr = number_or_nan(j.at("lr"));
  r.loss = number_or_nan(j.at("loss"));
  r.objective = number_or_nan(j.at("objective"));
  r.alpha = number_or_nan(j.at("alpha"));
  r.grad_norm = number_or_nan(j.at("grad_norm"));
  r.diverged = j.at("diverged").get<bool>();
  return r;
}

json to_json(const ProbeReport& r) {
  return {{"step", r.step},
          {"strategy", r.strategy},
          {"loss", r.loss},
          {"nll", r.nll},
          {"global_grad_norm", r.global_grad_norm},
          {"input_grad_norms", r.input_grad_norms},
          {"param_grad_norms", r.param_grad_norms},
          {"ln_grad_norms", r.ln_grad_norms},
          {"diverged", r.diverged},
          {"diverged_sublayer", r.diverged_sublayer}};
}

ProbeReport probe_report_from_json(const json& j) {
  ProbeReport r;
  r.step = j.at("step").get<std::int64_t>();
  r.strategy = j.at("strategy").get<std::string>();
  r.loss = number_or_nan(j.at("loss"));
  r.nll = number_or_nan(j.at("nll"));
  r.global_grad_norm = number_or_nan(j.at("global_grad_norm"));
  r.input_grad_norms = numbers_or_nan(j.at("input_grad_norms"));
  r.param_grad_norms = numbers_or_nan(j.at("param_grad_norms"));
  r.ln_grad_norms = numbers_or_nan(j.at("ln_grad_norms"));
  r.diverged = j.at("diverged").get<bool>();
  r.diverged_sublayer = j.at("diverged_sublayer").get<int>();
  return r;
}

json to_json(const AnalysisReport& r) {
  return {{"encoder_cosines", r.encoder_cosines},
          {"decoder_cosines", r.decoder_cosines},
          {"encoder_sublayer_cosines", r.encoder_sublayer_cosines},
          {"decoder_sublayer_cosines", r.decoder_sublayer_cosines},
          {"skipped_positions", r.skipped_positions},
          {"sparsity", r.sparsity}};
}

AnalysisReport analysis_report_from_json(const json& j) {
  AnalysisReport r;
  r.encoder_cosines = numbers_or_nan(j.at("encoder_cosines"));
  r.decoder_cosines = numbers_or_nan(j.at("decoder_cosines"));
  r.encoder_sublayer_cosines = numbers_or_nan(j.at("encoder_sublayer_cosines"));
  r.decoder_sublayer_cosines = numbers_or_nan(j.at("decoder_sublayer_cosines"));
  r.skipped_positions = j.at("skipped_positions").get<std::size_t>();
  r.sparsity = numbers_or_nan(j.at("sparsity"));
  return r;
}

std::string to_jsonl(const std::vector<json>& docs) {
  std::string out;
  for (const auto& d : docs) {
    out += d.dump();
    out += '\n';
  }
  return out;
}

void write_file_atomic(const std::string& path, std::string_view content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    f.flush();
    if (!f) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw std::runtime_error("short write to '" + tmp.string() + "'");
    }
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string encode_checkpoint(Model& m, const RunConfig& cfg, std::int64_t step) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.str(to_json(cfg).dump());
  w.pod<std::int64_t>(step);
  auto params = m.named_parameters();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (auto& [name, t] : params) {
    w.str(name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t->shape.size()));
    for (auto d : t->shape) w.pod<std::uint64_t>(d);
    w.raw(t->data.data(), t->data.size() * sizeof(double));
  }
  w.pod<std::uint64_t>(fnv1a(w.bytes()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kMagic + 4 + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a normlab checkpoint (bad magic)");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  const std::string_view body = bytes.substr(0, bytes.size() - 8);

  Cursor c(body);
  char magic[sizeof kMagic];
  c.raw(magic, sizeof magic);
  const auto version = c.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " is not supported (this build reads version " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  if (fnv1a(body) != stored) throw CheckpointError("checkpoint checksum mismatch (file corrupted)");

  Checkpoint out;
  try {
    out.config = parse_run_config(json::parse(c.str()));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint config is unreadable: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  out.step = c.pod<std::int64_t>();
  out.model = Model(out.config.model);
  auto params = out.model.named_parameters();
  const auto count = c.pod<std::uint32_t>();
  if (count != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const std::string got = c.str();
    if (got != name) throw CheckpointError("checkpoint tensor '" + got + "' where '" + name + "' expected");
    Shape shape(c.pod<std::uint32_t>());
    for (auto& d : shape) d = c.pod<std::uint64_t>();
    if (shape != t->shape) {
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + to_string(shape) +
                            ", model expects " + to_string(t->shape));
    }
    c.raw(t->data.data(), t->data.size() * sizeof(double));
  }
  if (c.pos() != body.size()) throw CheckpointError("trailing bytes in checkpoint");
  return out;
}

void save_checkpoint(const std::string& path, Model& m, const RunConfig& cfg, std::int64_t step) {
  write_file_atomic(path, encode_checkpoint(m, cfg, step));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace normlab
