#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "normlab/tensor.hpp"

namespace normlab {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

  [[nodiscard]] const Shape& shape() const;
  [[nodiscard]] std::span<const double> value() const;
  /// Gradient of the last backward root wrt this value; empty if none flowed here.
  [[nodiscard]] std::span<const double> grad() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] double item() const;
  [[nodiscard]] Tensor to_tensor() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only, define-by-run record of primitive operations.
///
/// Every node stores its forward value, the ids of its inputs and a backward
/// rule. Inputs always precede their consumers, so a single reverse sweep over
/// the node list visits each node once after all of its consumers.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var constant(Tensor t);
  /// Owned leaf that receives a gradient (readable through Var::grad()).
  Var variable(Tensor t);
  /// Leaf bound to an external tensor. Recording the same tensor twice returns
  /// the same node; after backward() its gradient is added into `t.grad` when
  /// `t.requires_grad` is set.
  Var parameter(Tensor& t);

  /// Populate gradients of every node reachable from a scalar root.
  void backward(Var root);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] bool backward_done() const { return backward_done_; }

  // Interface used by primitive implementations.
  Var record(std::string_view op, Shape shape, std::vector<double> value,
             std::vector<std::size_t> inputs, BackwardFn backward);
  [[nodiscard]] const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  [[nodiscard]] std::span<const double> value(std::size_t id) const { return nodes_[id].value; }
  [[nodiscard]] std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] std::string_view op(std::size_t id) const { return nodes_[id].op; }
  [[nodiscard]] const std::vector<std::size_t>& inputs(std::size_t id) const {
    return nodes_[id].inputs;
  }
  /// Mutable gradient buffer of `id`, zero-initialised on first use. Empty span
  /// when the node does not require a gradient.
  std::span<double> grad_sink(std::size_t id);
  /// Validates that `v` belongs to this tape.
  void check_owned(const Var& v) const;

 private:
  struct Node {
    std::string_view op;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Tensor* bound = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> parameter_ids_;
  bool backward_done_ = false;
};

}  // namespace normlab
