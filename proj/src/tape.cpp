#include "normlab/tape.hpp"

#include <algorithm>

namespace normlab {

const Shape& Var::shape() const { return tape_->shape(id_); }
std::span<const double> Var::value() const { return tape_->value(id_); }
std::span<const double> Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw ContractError("item() on non-scalar of shape " + to_string(shape()));
  return v[0];
}

Tensor Var::to_tensor() const {
  auto v = value();
  return Tensor(shape(), std::vector<double>(v.begin(), v.end()));
}

Var Tape::constant(Tensor t) {
  return record("constant", std::move(t.shape), std::move(t.data), {}, nullptr);
}

Var Tape::variable(Tensor t) {
  Var v = record("variable", std::move(t.shape), std::move(t.data), {}, nullptr);
  nodes_[v.id_].requires_grad = true;
  return v;
}

Var Tape::parameter(Tensor& t) {
  if (auto it = parameter_ids_.find(&t); it != parameter_ids_.end()) return Var(this, it->second);
  Var v = record("parameter", t.shape, t.data, {}, nullptr);
  nodes_[v.id_].requires_grad = t.requires_grad;
  nodes_[v.id_].bound = &t;
  parameter_ids_.emplace(&t, v.id_);
  return v;
}

void Tape::check_owned(const Var& v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw ContractError("variable does not belong to this tape");
  }
}

Var Tape::record(std::string_view op, Shape shape, std::vector<double> value,
                 std::vector<std::size_t> inputs, BackwardFn backward) {
  if (backward_done_) throw ContractError("cannot record on a tape after backward()");
  if (numel(shape) != value.size()) {
    throw DimensionError(std::string(op) + ": value length does not match shape " +
                         to_string(shape));
  }
  bool needs_grad = false;
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw ContractError(std::string(op) + ": input id is not on tape");
    needs_grad = needs_grad || nodes_[in].requires_grad;
  }
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.requires_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_sink(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var root) {
  if (nodes_.empty()) throw ContractError("backward() on an empty tape");
  check_owned(root);
  if (nodes_[root.id_].value.size() != 1) {
    throw ContractError("backward() root must be a scalar, got shape " +
                        to_string(nodes_[root.id_].shape));
  }
  if (backward_done_) throw ContractError("backward() already ran on this tape");
  backward_done_ = true;
  if (!nodes_[root.id_].requires_grad) return;

  grad_sink(root.id_)[0] = 1.0;
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.bound != nullptr && n.bound->requires_grad) {
      auto& g = n.bound->grad;
      if (!g) g.emplace(n.grad.size(), 0.0);
      for (std::size_t k = 0; k < n.grad.size(); ++k) (*g)[k] += n.grad[k];
    }
  }
}

}  // namespace normlab
