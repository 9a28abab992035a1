#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace normlab {

using Shape = std::vector<std::size_t>;

/// Shape or axis disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token id or element index outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Caller violated a precondition of an operation.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid model, strategy or training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad data handed to the model (ids, lengths, targets).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major float64 array with an optional gradient slot.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape s, bool requires_grad = false);
  static Tensor filled(Shape s, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values,
                       bool requires_grad = false);

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t rank() const { return shape.size(); }
  [[nodiscard]] std::size_t dim(std::size_t axis) const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  [[nodiscard]] bool all_finite() const;
  void zero_grad() { grad.reset(); }
  /// grad if present, zeros otherwise.
  [[nodiscard]] std::vector<double> grad_or_zeros() const;
};

double l2_norm(std::span<const double> values);
bool all_finite(std::span<const double> values);
double max_abs_diff(std::span<const double> a, std::span<const double> b);

/// ||a-b|| / max(||a||, ||b||); absolute ||a-b|| when both norms are below `floor`.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6);

}  // namespace normlab
