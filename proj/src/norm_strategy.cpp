#include "normlab/norm_strategy.hpp"

#include <algorithm>
#include <cmath>

#include "normlab/ops.hpp"

namespace normlab {

std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::kPostLN: return "postln";
    case NormKind::kPreLN: return "preln";
    case NormKind::kDeepNorm: return "deepnorm";
    case NormKind::kBranchNorm: return "branchnorm";
  }
  throw ConfigError("unknown normalization kind");
}

std::string_view to_string(ScheduleVariant variant) {
  switch (variant) {
    case ScheduleVariant::kLinear: return "linear";
    case ScheduleVariant::kExp: return "exp";
    case ScheduleVariant::kSigmoid: return "sigmoid";
  }
  throw ConfigError("unknown schedule variant");
}

std::string_view to_string(Side side) {
  return side == Side::kEncoder ? "encoder" : "decoder";
}

NormKind parse_norm_kind(std::string_view name) {
  if (name == "postln") return NormKind::kPostLN;
  if (name == "preln") return NormKind::kPreLN;
  if (name == "deepnorm") return NormKind::kDeepNorm;
  if (name == "branchnorm") return NormKind::kBranchNorm;
  throw ConfigError("unknown normalization strategy '" + std::string(name) +
                    "' (expected postln, preln, deepnorm or branchnorm)");
}

ScheduleVariant parse_schedule_variant(std::string_view name) {
  if (name == "linear") return ScheduleVariant::kLinear;
  if (name == "exp") return ScheduleVariant::kExp;
  if (name == "sigmoid") return ScheduleVariant::kSigmoid;
  throw ConfigError("unknown schedule '" + std::string(name) +
                    "' (expected linear, exp or sigmoid)");
}

DeepNormCoeffs deepnorm_coeffs(int encoder_layers, int decoder_layers) {
  if (encoder_layers < 1 || decoder_layers < 1) {
    throw ContractError("deepnorm_coeffs: layer counts must be positive, got N=" +
                        std::to_string(encoder_layers) + " M=" + std::to_string(decoder_layers));
  }
  const double n = encoder_layers;
  const double m = decoder_layers;
  const double enc_base = std::pow(n, 4.0) * m;
  DeepNormCoeffs c;
  c.alpha_encoder = 0.81 * std::pow(enc_base, 1.0 / 16.0);
  c.beta_encoder = 0.87 * std::pow(enc_base, -1.0 / 16.0);
  c.alpha_decoder = std::pow(3.0 * m, 0.25);
  c.beta_decoder = std::pow(12.0 * m, -0.25);
  return c;
}

double branchnorm_alpha(std::int64_t t, std::int64_t max_norm_step, const ScheduleKind& schedule) {
  if (t < 0) throw ContractError("branchnorm_alpha: step must be nonnegative");
  if (max_norm_step < 1) throw ContractError("branchnorm_alpha: T must be at least 1");
  if (t >= max_norm_step) return 1.0;
  const double u = static_cast<double>(t) / static_cast<double>(max_norm_step);
  double a = 0.0;
  switch (schedule.variant) {
    case ScheduleVariant::kLinear:
      a = u;
      break;
    case ScheduleVariant::kExp:
      a = std::expm1(schedule.exp_k * u) / std::expm1(schedule.exp_k);
      break;
    case ScheduleVariant::kSigmoid: {
      auto sig = [&](double v) { return 1.0 / (1.0 + std::exp(-schedule.sigmoid_s * (v - 0.5))); };
      const double lo = sig(0.0);
      a = (sig(u) - lo) / (sig(1.0) - lo);
      break;
    }
  }
  return std::clamp(a, 0.0, 1.0);
}

NormStrategy NormStrategy::post_ln() { return NormStrategy{}; }

NormStrategy NormStrategy::pre_ln() {
  NormStrategy s;
  s.kind = NormKind::kPreLN;
  return s;
}

NormStrategy NormStrategy::deep_norm(int encoder_layers, int decoder_layers) {
  return deep_norm(deepnorm_coeffs(encoder_layers, decoder_layers));
}

NormStrategy NormStrategy::deep_norm(const DeepNormCoeffs& coeffs) {
  NormStrategy s;
  s.kind = NormKind::kDeepNorm;
  s.deepnorm = coeffs;
  return s;
}

NormStrategy NormStrategy::branch_norm(std::int64_t max_norm_step, ScheduleKind schedule,
                                       bool beta_init) {
  NormStrategy s;
  s.kind = NormKind::kBranchNorm;
  s.max_norm_step = max_norm_step;
  s.schedule = schedule;
  s.beta_init = beta_init;
  return s;
}

void NormStrategy::validate() const {
  if (kind == NormKind::kDeepNorm) {
    const auto& c = deepnorm;
    if (!(c.alpha_encoder > 0 && c.alpha_decoder > 0 && c.beta_encoder > 0 && c.beta_decoder > 0)) {
      throw ConfigError("DeepNorm coefficients must be positive");
    }
  }
  if (kind == NormKind::kBranchNorm) {
    if (max_norm_step < 1) throw ConfigError("BranchNorm T must be at least 1");
    if (schedule.variant == ScheduleVariant::kExp && !(schedule.exp_k > 0)) {
      throw ConfigError("exp schedule constant must be positive");
    }
    if (schedule.variant == ScheduleVariant::kSigmoid && !(schedule.sigmoid_s > 0)) {
      throw ConfigError("sigmoid schedule steepness must be positive");
    }
  }
}

double NormStrategy::residual_scale(Side side) const {
  if (kind != NormKind::kDeepNorm) return 1.0;
  return side == Side::kEncoder ? deepnorm.alpha_encoder : deepnorm.alpha_decoder;
}

double NormStrategy::branch_scale(std::int64_t t) const {
  if (kind != NormKind::kBranchNorm) return 1.0;
  return branchnorm_alpha(t, max_norm_step, schedule);
}

double NormStrategy::init_gain(Side side, int encoder_layers, int decoder_layers) const {
  switch (kind) {
    case NormKind::kDeepNorm:
      return side == Side::kEncoder ? deepnorm.beta_encoder : deepnorm.beta_decoder;
    case NormKind::kBranchNorm: {
      if (!beta_init) return 1.0;
      auto c = deepnorm_coeffs(encoder_layers, decoder_layers);
      return side == Side::kEncoder ? c.beta_encoder : c.beta_decoder;
    }
    default:
      return 1.0;
  }
}

Var sublayer_apply(const NormStrategy& strategy, Side side, Var x, const SublayerFn& f,
                   LayerNormParams& ln, std::int64_t t, double eps) {
  if (t < 0) throw ContractError("sublayer_apply: step must be nonnegative");
  switch (strategy.kind) {
    case NormKind::kPostLN:
      return layer_norm(add(x, f(x)), ln, eps);
    case NormKind::kPreLN:
      return add(x, f(layer_norm(x, ln, eps)));
    case NormKind::kDeepNorm:
      return layer_norm(add(scale(x, strategy.residual_scale(side)), f(x)), ln, eps);
    case NormKind::kBranchNorm:
      return layer_norm(add(x, scale(f(x), strategy.branch_scale(t))), ln, eps);
  }
  throw ConfigError("sublayer_apply: unknown normalization kind");
}

}  // namespace normlab
