#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

#include "normlab/layers.hpp"

namespace normlab {

enum class NormKind { kPostLN, kPreLN, kDeepNorm, kBranchNorm };
enum class Side { kEncoder, kDecoder };
enum class ScheduleVariant { kLinear, kExp, kSigmoid };

std::string_view to_string(NormKind kind);
std::string_view to_string(ScheduleVariant variant);
std::string_view to_string(Side side);
/// Accepts "postln", "preln", "deepnorm", "branchnorm".
NormKind parse_norm_kind(std::string_view name);
/// Accepts "linear", "exp", "sigmoid".
ScheduleVariant parse_schedule_variant(std::string_view name);

/// Growth curve of the BranchNorm branch factor.
struct ScheduleKind {
  ScheduleVariant variant = ScheduleVariant::kLinear;
  double exp_k = 5.0;       // curvature of the exp variant
  double sigmoid_s = 12.0;  // steepness of the sigmoid variant
};

struct DeepNormCoeffs {
  double alpha_encoder = 1.0;
  double beta_encoder = 1.0;
  double alpha_decoder = 1.0;
  double beta_decoder = 1.0;
};

/// Closed-form DeepNorm residual weights and init gains for an N-layer encoder
/// and M-layer decoder:
///   alpha_enc = 0.81 (N^4 M)^(1/16),  beta_enc = 0.87 (N^4 M)^(-1/16)
///   alpha_dec = (3M)^(1/4),           beta_dec = (12M)^(-1/4)
DeepNormCoeffs deepnorm_coeffs(int encoder_layers, int decoder_layers);

/// Branch factor at step t with maximum norm step T, in [0, 1] and exactly 1 for t >= T.
///   linear:  min(1, t/T)
///   exp:     (e^{k t/T} - 1) / (e^k - 1)
///   sigmoid: sigma(s (t/T - 1/2)) rescaled so the curve runs from 0 at t=0 to 1 at t=T
double branchnorm_alpha(std::int64_t t, std::int64_t max_norm_step,
                        const ScheduleKind& schedule = {});

/// Sublayer combination rule and its scalars.
struct NormStrategy {
  NormKind kind = NormKind::kPostLN;
  DeepNormCoeffs deepnorm;  // DeepNorm only
  ScheduleKind schedule;    // BranchNorm only
  std::int64_t max_norm_step = 4000;
  /// BranchNorm only: initialise with the DeepNorm beta gains.
  bool beta_init = true;

  static NormStrategy post_ln();
  static NormStrategy pre_ln();
  static NormStrategy deep_norm(int encoder_layers, int decoder_layers);
  static NormStrategy deep_norm(const DeepNormCoeffs& coeffs);
  static NormStrategy branch_norm(std::int64_t max_norm_step, ScheduleKind schedule = {},
                                  bool beta_init = true);

  void validate() const;

  /// Weight on the residual path x_l (DeepNorm alpha, otherwise 1).
  [[nodiscard]] double residual_scale(Side side) const;
  /// Weight on the sublayer path F(x_l) at step t (BranchNorm alpha_t, otherwise 1).
  [[nodiscard]] double branch_scale(std::int64_t t) const;
  /// Xavier gain for beta-scaled matrices on the given side of an N/M model.
  [[nodiscard]] double init_gain(Side side, int encoder_layers, int decoder_layers) const;
};

using SublayerFn = std::function<Var(Var)>;

/// One residual sublayer:
///   PostLN     LN(x + F(x))
///   PreLN      x + F(LN(x))
///   DeepNorm   LN(alpha_side x + F(x))
///   BranchNorm LN(x + alpha_t F(x))
Var sublayer_apply(const NormStrategy& strategy, Side side, Var x, const SublayerFn& f,
                   LayerNormParams& ln, std::int64_t t, double eps = kLayerNormEps);

}  // namespace normlab
