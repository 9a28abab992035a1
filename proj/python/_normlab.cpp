#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "normlab/diagnostics.hpp"
#include "normlab/io.hpp"
#include "normlab/trainer.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace normlab;

namespace {

RunConfig config_from(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

RunConfig with_strategy(RunConfig cfg, const std::optional<std::string>& strategy) {
  if (strategy) {
    cfg.model.strategy.kind = parse_norm_kind(*strategy);
    cfg.resolve();
    cfg.validate();
  }
  return cfg;
}

Batch first_batch(const RunConfig& cfg) { return sample_batch(cfg.task, 1, cfg.train.batch_size_tokens); }

std::string resolved_config(const std::string& text) { return to_json(config_from(text)).dump(); }

std::string probe(const std::string& text, const std::optional<std::string>& strategy,
                  const std::vector<std::int64_t>& steps) {
  const RunConfig cfg = with_strategy(config_from(text), strategy);
  Model model(cfg.model);
  const Batch batch = first_batch(cfg);
  std::vector<json> lines;
  {
    py::gil_scoped_release release;
    for (auto t : steps) lines.push_back(to_json(grad_probe(model, batch, t, cfg.train.label_smoothing)));
  }
  return to_jsonl(lines);
}

std::string run_train(const std::string& text) {
  const RunConfig cfg = config_from(text);
  std::optional<TrainResult> r;
  {
    py::gil_scoped_release release;
    r.emplace(train(cfg.model, cfg.train, cfg.task));
  }
  json records = json::array();
  for (const auto& rec : r->records) records.push_back(to_json(rec));
  return json{{"steps", r->steps},
              {"diverged", r->diverged},
              {"initial_loss", r->initial_loss},
              {"final_loss", r->final_loss},
              {"parameter_checksum", parameter_checksum(r->model)},
              {"records", records}}
      .dump();
}

std::string run_sweep(const std::string& text, std::optional<std::size_t> workers) {
  const RunConfig cfg = config_from(text);
  py::gil_scoped_release release;
  return sweep_csv(sweep(cfg.grid, cfg.model, cfg.train, cfg.task, workers.value_or(cfg.workers)));
}

std::string run_analyze(const std::string& text, std::int64_t t) {
  const RunConfig cfg = config_from(text);
  Model model(cfg.model);
  py::gil_scoped_release release;
  return to_json(analyze(model, first_batch(cfg), t)).dump();
}

py::dict oracle(const std::string& text, const std::optional<std::string>& strategy, std::int64_t t) {
  const RunConfig cfg = with_strategy(config_from(text), strategy);
  Model model(cfg.model);
  const ChainOracleReport r = jacobian_chain_oracle(model, first_batch(cfg), t, cfg.train.label_smoothing);
  py::dict d;
  d["relative_errors"] = r.relative_errors;
  d["factored_errors"] = r.factored_errors;
  d["max_relative_error"] = r.max_relative_error;
  d["max_factored_error"] = r.max_factored_error;
  d["residual_identity_error"] = r.residual_identity_error;
  return d;
}

}  // namespace

PYBIND11_MODULE(_normlab, m) {
  m.doc() = "Bindings for the normlab C++ core. Configs and reports travel as JSON text.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<UndefinedSimilarityError>(m, "UndefinedSimilarityError", PyExc_ValueError);

  m.def(
      "deepnorm_coeffs",
      [](int n, int mm) {
        const DeepNormCoeffs k = deepnorm_coeffs(n, mm);
        return py::make_tuple(k.alpha_encoder, k.beta_encoder, k.alpha_decoder, k.beta_decoder);
      },
      py::arg("encoder_layers"), py::arg("decoder_layers"),
      "(alpha_enc, beta_enc, alpha_dec, beta_dec) for an N-layer encoder and M-layer decoder.");
  m.def(
      "branchnorm_alpha",
      [](std::int64_t t, std::int64_t max_norm_step, const std::string& schedule, double exp_k,
         double sigmoid_s) {
        return branchnorm_alpha(t, max_norm_step, {parse_schedule_variant(schedule), exp_k, sigmoid_s});
      },
      py::arg("t"), py::arg("max_norm_step"), py::arg("schedule") = "linear", py::arg("exp_k") = 5.0,
      py::arg("sigmoid_s") = 12.0);
  m.def(
      "cosine_similarity",
      [](const std::vector<double>& a, const std::vector<double>& b) { return cosine_similarity(a, b); },
      py::arg("a"), py::arg("b"));
  m.def(
      "relu_sparsity", [](const std::vector<double>& x) { return relu_sparsity(x); }, py::arg("activations"));

  m.def("resolved_config", &resolved_config, py::arg("config_json"),
        "Parse, default and validate a run config; returns canonical JSON.");
  m.def(
      "config_hash", [](const std::string& text) { return config_hash(config_from(text)); },
      py::arg("config_json"));
  m.def("probe", &probe, py::arg("config_json"), py::arg("strategy") = std::nullopt,
        py::arg("steps") = std::vector<std::int64_t>{0}, "ProbeReport JSON lines, one per step.");
  m.def("train", &run_train, py::arg("config_json"), "Train; returns a JSON summary with all records.");
  m.def("sweep", &run_sweep, py::arg("config_json"), py::arg("workers") = std::nullopt,
        "Run the configured grid; returns the CSV table.");
  m.def("analyze", &run_analyze, py::arg("config_json"), py::arg("t") = 0,
        "AnalysisReport JSON for a freshly initialised model.");
  m.def("oracle", &oracle, py::arg("config_json"), py::arg("strategy") = std::nullopt, py::arg("t") = 0);

  m.attr("__version__") = NORMLAB_VERSION;
}
