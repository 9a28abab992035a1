#pragma once

#include <functional>

#include "normlab/tensor.hpp"

namespace normlab {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / 2h, one coordinate at a time.
Tensor finite_diff(const ScalarFn& f, const Tensor& x, double h = 1e-5);

/// Central-difference Jacobian of a vector-valued function; row i is d out_i / d x.
/// Returned as [out x in].
using VectorFn = std::function<std::vector<double>(const Tensor&)>;
Tensor finite_diff_jacobian(const VectorFn& f, const Tensor& x, double h = 1e-5);

}  // namespace normlab
