#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "normlab/diagnostics.hpp"
#include "normlab/hash.hpp"
#include "normlab/trainer.hpp"

namespace normlab {

inline constexpr int kConfigVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything one CLI invocation needs. See docs/config.md for the schema.
struct RunConfig {
  int version = kConfigVersion;
  std::string output_dir = "normlab-out";
  std::uint64_t params_seed = 1;  // parameters and dropout
  std::uint64_t data_seed = 1;    // task stream
  ModelConfig model;
  TrainConfig train;
  TaskSpec task;
  /// Replaces the closed-form DeepNorm coefficients when set.
  std::optional<DeepNormCoeffs> deepnorm_override;
  std::int64_t probe_step = 0;
  SweepGrid grid;
  std::size_t workers = 1;

  /// Pushes the two seeds and the override into the nested configs and
  /// recomputes depth-dependent DeepNorm coefficients.
  void resolve();
  void validate() const;
};

/// Strict parse: unknown keys and wrong types are ConfigError. Missing keys
/// take their defaults. The result is resolved and validated.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& cfg);
/// FNV-1a of the canonical (fully defaulted) JSON dump, 16 hex digits.
std::string config_hash(const RunConfig& cfg);

nlohmann::json to_json(const TrainRecord& r);
TrainRecord train_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ProbeReport& r);
ProbeReport probe_report_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AnalysisReport& r);
AnalysisReport analysis_report_from_json(const nlohmann::json& j);

/// One compact JSON document per line.
std::string to_jsonl(const std::vector<nlohmann::json>& docs);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::string& path, std::string_view content);
std::string read_file(const std::string& path);

struct Checkpoint {
  RunConfig config;
  std::int64_t step = 0;
  Model model;
};

/// "NLCKPT" magic, format version, config JSON, step, named tensors (little-endian
/// f64), then an FNV-1a checksum of everything before it.
std::string encode_checkpoint(Model& m, const RunConfig& cfg, std::int64_t step);
/// Throws CheckpointError on bad magic, version, checksum or tensor mismatch.
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, Model& m, const RunConfig& cfg, std::int64_t step);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace normlab
