#include "normlab/finite_diff.hpp"

namespace normlab {

Tensor finite_diff(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff: step must be positive");
  Tensor probe = x;
  Tensor out = Tensor::zeros(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

Tensor finite_diff_jacobian(const VectorFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_jacobian: step must be positive");
  Tensor probe = x;
  const std::size_t in = x.size();
  std::vector<std::vector<double>> columns(in);
  std::size_t out = 0;
  for (std::size_t i = 0; i < in; ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    auto up = f(probe);
    probe[i] = orig - h;
    auto down = f(probe);
    probe[i] = orig;
    if (up.size() != down.size() || (i > 0 && up.size() != out)) {
      throw DimensionError("finite_diff_jacobian: output length changed between evaluations");
    }
    out = up.size();
    columns[i].resize(out);
    for (std::size_t r = 0; r < out; ++r) columns[i][r] = (up[r] - down[r]) / (2.0 * h);
  }
  Tensor jac = Tensor::zeros({out, in});
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t r = 0; r < out; ++r) jac[r * in + i] = columns[i][r];
  }
  return jac;
}

}  // namespace normlab
