#include "normlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace normlab {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape s, std::vector<double> values, bool rg)
    : shape(std::move(s)), data(std::move(values)), requires_grad(rg) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor shape " + to_string(shape) + " has a zero extent");
  }
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape s, bool rg) { return filled(std::move(s), 0.0, rg); }

Tensor Tensor::filled(Shape s, double value, bool rg) {
  auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, value), rg);
}

Tensor Tensor::scalar(double value, bool rg) { return Tensor({1}, {value}, rg); }

Tensor Tensor::vector(std::initializer_list<double> values, bool rg) {
  return Tensor({values.size()}, std::vector<double>(values), rg);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values,
                      bool rg) {
  return Tensor({rows, cols}, std::vector<double>(values), rg);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of bounds for shape " +
                         to_string(shape));
  }
  return shape[axis];
}

bool Tensor::all_finite() const { return normlab::all_finite(data); }

std::vector<double> Tensor::grad_or_zeros() const {
  if (grad) return *grad;
  return std::vector<double>(data.size(), 0.0);
}

double l2_norm(std::span<const double> values) {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  diff = std::sqrt(diff);
  double scale = std::max(l2_norm(a), l2_norm(b));
  if (scale < floor) return diff;
  return diff / scale;
}

}  // namespace normlab
