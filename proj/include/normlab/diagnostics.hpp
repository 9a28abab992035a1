#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "normlab/model.hpp"

namespace normlab {

/// Every position of a similarity computation had a zero vector.
class UndefinedSimilarityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Gradient norms of one forward/backward pass.
struct ProbeReport {
  std::int64_t step = 0;
  std::string strategy;
  double loss = 0.0;  // label-smoothed objective
  double nll = 0.0;
  double global_grad_norm = 0.0;
  /// ||dE/dx_l|| for every sublayer input, in sublayer order.
  std::vector<double> input_grad_norms;
  /// Norm of the gradient of the sublayer function's own parameters.
  std::vector<double> param_grad_norms;
  /// Norm of the gradient of each sublayer's LayerNorm gain and bias.
  std::vector<double> ln_grad_norms;
  bool diverged = false;
  int diverged_sublayer = -1;  // -1 when not diverged or not attributable
};

/// One forward and backward pass with dropout off. Parameter gradients are left
/// in the model's tensors.
ProbeReport grad_probe(Model& m, const Batch& batch, std::int64_t t, double smoothing = 0.1);

/// ||dE/dx_l|| for the model with every sublayer function removed, so each
/// sublayer reduces to its LayerNorm (and Pre-LN to the identity).
std::vector<double> layer_norm_chain_grad_norms(Model& m, const Batch& batch,
                                                double smoothing = 0.1);

struct ChainOracleReport {
  /// Product of per-sublayer Jacobians vs autodiff dE/dx_l.
  std::vector<double> relative_errors;
  /// Same chain with every Jacobian rebuilt as (LN term) x (residual term).
  std::vector<double> factored_errors;
  double max_relative_error = 0.0;
  double max_factored_error = 0.0;
  /// max |prod_k R_k - I| over both stacks, R_k the residual term of sublayer k.
  double residual_identity_error = 0.0;
};

inline constexpr std::size_t kOracleMaxWidth = 8;
inline constexpr std::size_t kOracleMaxSublayers = 6;
inline constexpr std::size_t kOracleMaxLength = 3;

/// Verifies the chain-rule decomposition of dE/dx_l with dense Jacobians built
/// by central differences. Each stack is chained to its own top; the top
/// gradient itself comes from finite differences of the loss.
ChainOracleReport jacobian_chain_oracle(Model& m, const Batch& batch, std::int64_t t,
                                        double smoothing = 0.1, double h = 1e-5);

struct LnChainGapReport {
  /// ||g - g_approx|| / ||g|| per sublayer, g the autodiff input gradient and
  /// g_approx = dE/dx_L prod_k J_LN(x_k).
  std::vector<double> relative_gaps;
  /// | ||g|| - ||g_approx|| | / ||g|| per sublayer.
  std::vector<double> norm_gaps;
  double max_relative_gap = 0.0;
  double max_norm_gap = 0.0;
};

LnChainGapReport ln_chain_approximation_gap(Model& m, const Batch& batch, double smoothing = 0.1,
                                            double h = 1e-5);

struct GradientCheckReport {
  double global_relative_error = 0.0;
  double max_tensor_error = 0.0;
  std::string worst_tensor;
  std::size_t parameters = 0;
};

/// Autodiff vs central differences over every model parameter.
GradientCheckReport model_gradient_check(Model& m, const Batch& batch, std::int64_t t,
                                         double smoothing = 0.1, double h = 1e-5);

/// cos(a, b), clamped to [-1, 1]. Throws UndefinedSimilarityError on a zero vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct MeanCosine {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

/// Row-wise cosine of two [rows x width] arrays averaged over the rows with
/// keep[r] set (all rows when keep is empty). Zero rows are skipped and counted.
MeanCosine mean_row_cosine(std::span<const double> a, std::span<const double> b,
                           std::size_t width, std::span<const std::uint8_t> keep = {});

/// Fraction of strictly positive entries.
double relu_sparsity(std::span<const double> activations);

struct AnalysisReport {
  /// Adjacent-layer cosines (layer output taps), N-1 and M-1 entries.
  std::vector<double> encoder_cosines;
  std::vector<double> decoder_cosines;
  /// Adjacent-sublayer cosines, 2N-1 and 3M-1 entries.
  std::vector<double> encoder_sublayer_cosines;
  std::vector<double> decoder_sublayer_cosines;
  std::size_t skipped_positions = 0;
  /// Nonzero fraction after the relu of each feed-forward sublayer, N+M entries.
  std::vector<double> sparsity;
};

AnalysisReport repr_similarity(Model& m, const Batch& batch, std::int64_t t);
AnalysisReport activation_sparsity(Model& m, const Batch& batch, std::int64_t t);
/// Both analyses from a single forward pass.
AnalysisReport analyze(Model& m, const Batch& batch, std::int64_t t);

}  // namespace normlab
