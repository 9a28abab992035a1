#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "normlab/tape.hpp"

namespace normlab {

// Differentiable primitives. Each records one node on the tape of its inputs.
//
// Broadcasting is limited to one case: in add() and mul() the right operand may
// be a vector matching the trailing dimension of the left operand.

/// [m x k] . [k x n], or [m x k] . [n x k]^T when `transpose_b`.
Var matmul(Var a, Var b, bool transpose_b = false);
/// Per-group matmul over [g x m x k] and [g x k x n] (or [g x n x k] with `transpose_b`).
Var batched_matmul(Var a, Var b, bool transpose_b = false);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var relu(Var a);
Var sum(Var a);

Var softmax(Var a, std::size_t axis);
/// Softmax over the last axis of [g x q x k] scores. `mask` has shape
/// [g/groups x q x k]; nonzero entries are excluded (logit treated as -inf).
/// Rows with every key masked produce zeros.
Var masked_softmax(Var scores, std::span<const std::uint8_t> mask, std::size_t groups);
Var log_softmax(Var a);

/// Population mean and variance along `axis`; the axis is removed from the result shape.
std::pair<Var, Var> mean_var(Var a, std::size_t axis);
/// (x - mean) / sqrt(var + eps) over the last axis of x; mean/var carry x's leading shape.
Var standardize(Var x, Var mean, Var var, double eps);

Var transpose(Var a);
Var permute(Var a, const std::vector<std::size_t>& axes);
Var reshape(Var a, Shape shape);

/// Rows of a [vocab x d] table selected by `ids`; result is [ids.size() x d].
Var embed_lookup(Var table, std::span<const int> ids);

/// Inverted dropout: keeps each entry with probability 1-p and rescales by 1/(1-p).
Var dropout(Var a, double p, std::mt19937_64& rng);

/// Label-smoothed negative log-likelihood over rows of [n x V] log-probabilities,
/// averaged over rows whose target differs from `ignore_index`. The target class
/// receives mass 1-smoothing, every other class smoothing/(V-1).
Var label_smoothed_nll(Var log_probs, std::span<const int> targets, double smoothing,
                       int ignore_index);

}  // namespace normlab
