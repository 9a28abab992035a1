#include "normlab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace normlab {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound variable");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  t.check_owned(b);
  return t;
}

std::size_t checked_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of bounds for shape " + to_string(s));
  }
  return axis;
}

// outer x axis x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

enum class Broadcast { kSame, kTrailing };

Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kSame;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Broadcast::kTrailing;
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                       to_string(b));
}

// Calls f(i, j) for every element i of the left operand, j indexing the right one.
template <class F>
void each_pair(std::size_t n, std::size_t nb, Broadcast kind, F&& f) {
  if (kind == Broadcast::kSame) {
    for (std::size_t i = 0; i < n; ++i) f(i, i);
    return;
  }
  for (std::size_t r = 0; r < n; r += nb) {
    for (std::size_t c = 0; c < nb; ++c) f(r + c, c);
  }
}

}  // namespace

Var matmul(Var a, Var b, bool transpose_b) {
  Tape& t = tape_of(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) {
    throw DimensionError("matmul: expected 2-D operands, got " + to_string(sa) + " and " +
                         to_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1];
  const std::size_t kb = transpose_b ? sb[1] : sb[0];
  const std::size_t n = transpose_b ? sb[0] : sb[1];
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree for " + to_string(sa) + " and " +
                         to_string(sb) + (transpose_b ? "^T" : ""));
  }
  std::vector<double> out(m * n);
  ConstMap am(a.value().data(), m, k);
  ConstMap bm(b.value().data(), sb[0], sb[1]);
  MutMap om(out.data(), m, n);
  if (transpose_b) {
    om.noalias() = am * bm.transpose();
  } else {
    om.noalias() = am * bm;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", {m, n}, std::move(out), {ia, ib},
                  [=](Tape& tp, std::size_t self) {
                    ConstMap g(tp.grad(self).data(), m, n);
                    ConstMap av(tp.value(ia).data(), m, k);
                    ConstMap bv(tp.value(ib).data(), transpose_b ? n : k, transpose_b ? k : n);
                    if (auto ga = tp.grad_sink(ia); !ga.empty()) {
                      MutMap gam(ga.data(), m, k);
                      if (transpose_b) {
                        gam.noalias() += g * bv;
                      } else {
                        gam.noalias() += g * bv.transpose();
                      }
                    }
                    if (auto gb = tp.grad_sink(ib); !gb.empty()) {
                      if (transpose_b) {
                        MutMap gbm(gb.data(), n, k);
                        gbm.noalias() += g.transpose() * av;
                      } else {
                        MutMap gbm(gb.data(), k, n);
                        gbm.noalias() += av.transpose() * g;
                      }
                    }
                  });
}

Var batched_matmul(Var a, Var b, bool transpose_b) {
  Tape& t = tape_of(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) {
    throw DimensionError("batched_matmul: incompatible shapes " + to_string(sa) + " and " +
                         to_string(sb));
  }
  const std::size_t groups = sa[0], m = sa[1], k = sa[2];
  const std::size_t kb = transpose_b ? sb[2] : sb[1];
  const std::size_t n = transpose_b ? sb[1] : sb[2];
  if (k != kb) {
    throw DimensionError("batched_matmul: inner dimensions disagree for " + to_string(sa) +
                         " and " + to_string(sb));
  }
  const std::size_t br = sb[1], bc = sb[2];
  std::vector<double> out(groups * m * n);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    ConstMap am(a.value().data() + gi * m * k, m, k);
    ConstMap bm(b.value().data() + gi * br * bc, br, bc);
    MutMap om(out.data() + gi * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * bm.transpose();
    } else {
      om.noalias() = am * bm;
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(
      "batched_matmul", {groups, m, n}, std::move(out), {ia, ib},
      [=](Tape& tp, std::size_t self) {
        auto ga = tp.grad_sink(ia);
        auto gb = tp.grad_sink(ib);
        for (std::size_t gi = 0; gi < groups; ++gi) {
          ConstMap g(tp.grad(self).data() + gi * m * n, m, n);
          ConstMap av(tp.value(ia).data() + gi * m * k, m, k);
          ConstMap bv(tp.value(ib).data() + gi * br * bc, br, bc);
          if (!ga.empty()) {
            MutMap gam(ga.data() + gi * m * k, m, k);
            if (transpose_b) {
              gam.noalias() += g * bv;
            } else {
              gam.noalias() += g * bv.transpose();
            }
          }
          if (!gb.empty()) {
            MutMap gbm(gb.data() + gi * br * bc, br, bc);
            if (transpose_b) {
              gbm.noalias() += g.transpose() * av;
            } else {
              gbm.noalias() += av.transpose() * g;
            }
          }
        }
      });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Broadcast kind = broadcast_kind(a.shape(), b.shape(), "add");
  auto av = a.value();
  auto bv = b.value();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  each_pair(av.size(), nb, kind, [&](std::size_t i, std::size_t j) { out[i] = av[i] + bv[j]; });
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", a.shape(), std::move(out), {ia, ib},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    if (auto ga = tp.grad_sink(ia); !ga.empty()) {
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (auto gb = tp.grad_sink(ib); !gb.empty()) {
                      each_pair(g.size(), nb, kind, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
                    }
                  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Broadcast kind = broadcast_kind(a.shape(), b.shape(), "mul");
  auto av = a.value();
  auto bv = b.value();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  each_pair(av.size(), nb, kind, [&](std::size_t i, std::size_t j) { out[i] = av[i] * bv[j]; });
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", a.shape(), std::move(out), {ia, ib},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto avv = tp.value(ia);
                    auto bvv = tp.value(ib);
                    if (auto ga = tp.grad_sink(ia); !ga.empty()) {
                      each_pair(g.size(), nb, kind,
                                [&](std::size_t i, std::size_t j) { ga[i] += g[i] * bvv[j]; });
                    }
                    if (auto gb = tp.grad_sink(ib); !gb.empty()) {
                      each_pair(g.size(), nb, kind,
                                [&](std::size_t i, std::size_t j) { gb[j] += g[i] * avv[i]; });
                    }
                  });
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  const std::size_t ia = a.id();
  return t.record("scale", a.shape(), std::move(out), {ia},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  const std::size_t ia = a.id();
  return t.record("relu", a.shape(), std::move(out), {ia},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto x = tp.value(ia);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      if (x[i] > 0.0) ga[i] += g[i];
                    }
                  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  auto av = a.value();
  double s = 0.0;
  for (double v : av) s += v;
  const std::size_t ia = a.id();
  return t.record("sum", {1}, {s}, {ia}, [=](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (auto& x : tp.grad_sink(ia)) x += g;
  });
}

Var softmax(Var a, std::size_t axis) {
  Tape& t = tape_of(a);
  checked_axis(a.shape(), axis, "softmax");
  const AxisSplit s = split_axis(a.shape(), axis);
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, av[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        out[base + j * s.inner] = std::exp(av[base + j * s.inner] - mx);
        z += out[base + j * s.inner];
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= z;
    }
  }
  const std::size_t ia = a.id();
  return t.record("softmax", a.shape(), std::move(out), {ia},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto y = tp.value(self);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t o = 0; o < s.outer; ++o) {
                      for (std::size_t in = 0; in < s.inner; ++in) {
                        const std::size_t base = o * s.extent * s.inner + in;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < s.extent; ++j) {
                          dot += g[base + j * s.inner] * y[base + j * s.inner];
                        }
                        for (std::size_t j = 0; j < s.extent; ++j) {
                          const std::size_t idx = base + j * s.inner;
                          ga[idx] += y[idx] * (g[idx] - dot);
                        }
                      }
                    }
                  });
}

Var masked_softmax(Var scores, std::span<const std::uint8_t> mask, std::size_t groups) {
  Tape& t = tape_of(scores);
  const Shape& sh = scores.shape();
  if (sh.size() != 3 || groups == 0 || sh[0] % groups != 0) {
    throw DimensionError("masked_softmax: scores " + to_string(sh) + " incompatible with " +
                         std::to_string(groups) + " groups");
  }
  const std::size_t g_count = sh[0], q = sh[1], k = sh[2];
  if (mask.size() != (g_count / groups) * q * k) {
    throw DimensionError("masked_softmax: mask length " + std::to_string(mask.size()) +
                         " does not match scores " + to_string(sh));
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  auto av = scores.value();
  std::vector<double> out(av.size(), 0.0);
  for (std::size_t gi = 0; gi < g_count; ++gi) {
    const std::size_t mb = (gi / groups) * q * k;
    for (std::size_t r = 0; r < q; ++r) {
      const std::size_t row = (gi * q + r) * k;
      const std::size_t mrow = mb + r * k;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        if (!m[mrow + j]) mx = std::max(mx, av[row + j]);
      }
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        if (!m[mrow + j]) {
          out[row + j] = std::exp(av[row + j] - mx);
          z += out[row + j];
        }
      }
      for (std::size_t j = 0; j < k; ++j) out[row + j] /= z;
    }
  }
  const std::size_t ia = scores.id();
  const std::size_t rows = g_count * q;
  return t.record("masked_softmax", sh, std::move(out), {ia},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto y = tp.value(self);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double dot = 0.0;
                      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
                      for (std::size_t j = 0; j < k; ++j) {
                        ga[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
                      }
                    }
                  });
}

Var log_softmax(Var a) {
  Tape& t = tape_of(a);
  const Shape& sh = a.shape();
  const std::size_t k = sh.back();
  const std::size_t rows = a.value().size() / k;
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * k;
    const double mx = *std::max_element(x, x + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[j] - lse;
  }
  const std::size_t ia = a.id();
  return t.record("log_softmax", sh, std::move(out), {ia},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto y = tp.value(self);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double gs = 0.0;
                      for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
                      for (std::size_t j = 0; j < k; ++j) {
                        ga[r * k + j] += g[r * k + j] - std::exp(y[r * k + j]) * gs;
                      }
                    }
                  });
}

std::pair<Var, Var> mean_var(Var a, std::size_t axis) {
  Tape& t = tape_of(a);
  checked_axis(a.shape(), axis, "mean_var");
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < a.shape().size(); ++i) {
    if (i != axis) out_shape.push_back(a.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  auto av = a.value();
  const double n = static_cast<double>(s.extent);
  std::vector<double> mean(s.outer * s.inner), var(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mu = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) mu += av[base + j * s.inner];
      mu /= n;
      double v = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double d = av[base + j * s.inner] - mu;
        v += d * d;
      }
      mean[o * s.inner + in] = mu;
      var[o * s.inner + in] = v / n;
    }
  }
  const std::size_t ia = a.id();
  Var mv = t.record("mean", out_shape, std::move(mean), {ia}, [=](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto ga = tp.grad_sink(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const double gi = g[o * s.inner + in] / n;
        const std::size_t base = o * s.extent * s.inner + in;
        for (std::size_t j = 0; j < s.extent; ++j) ga[base + j * s.inner] += gi;
      }
    }
  });
  const std::size_t im = mv.id();
  Var vv = t.record("var", out_shape, std::move(var), {ia}, [=](Tape& tp, std::size_t self) {
    auto g = tp.grad(self);
    auto x = tp.value(ia);
    auto mu = tp.value(im);
    auto ga = tp.grad_sink(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const double gi = 2.0 * g[o * s.inner + in] / n;
        const double m = mu[o * s.inner + in];
        const std::size_t base = o * s.extent * s.inner + in;
        for (std::size_t j = 0; j < s.extent; ++j) {
          ga[base + j * s.inner] += gi * (x[base + j * s.inner] - m);
        }
      }
    }
  });
  return {mv, vv};
}

Var standardize(Var x, Var mean, Var var, double eps) {
  Tape& t = tape_of(x, mean);
  t.check_owned(var);
  if (!(eps > 0.0)) throw ContractError("standardize: eps must be positive");
  const Shape& sx = x.shape();
  const std::size_t d = sx.back();
  const std::size_t rows = x.value().size() / d;
  if (mean.value().size() != rows || var.value().size() != rows) {
    throw DimensionError("standardize: statistics do not match rows of " + to_string(sx));
  }
  auto xv = x.value();
  auto mv = mean.value();
  auto vv = var.value();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double inv = 1.0 / std::sqrt(vv[r] + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xv[r * d + j] - mv[r]) * inv;
  }
  const std::size_t ix = x.id(), im = mean.id(), iv = var.id();
  return t.record("standardize", sx, std::move(out), {ix, im, iv},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto xs = tp.value(ix);
                    auto ms = tp.value(im);
                    auto vs = tp.value(iv);
                    auto gx = tp.grad_sink(ix);
                    auto gm = tp.grad_sink(im);
                    auto gv = tp.grad_sink(iv);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double inv = 1.0 / std::sqrt(vs[r] + eps);
                      double sg = 0.0, sgc = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double gj = g[r * d + j];
                        if (!gx.empty()) gx[r * d + j] += gj * inv;
                        sg += gj;
                        sgc += gj * (xs[r * d + j] - ms[r]);
                      }
                      if (!gm.empty()) gm[r] -= sg * inv;
                      if (!gv.empty()) gv[r] += -0.5 * sgc * inv * inv * inv;
                    }
                  });
}

Var transpose(Var a) {
  if (a.shape().size() != 2) {
    throw DimensionError("transpose: expected a 2-D tensor, got " + to_string(a.shape()));
  }
  return permute(a, {1, 0});
}

Var permute(Var a, const std::vector<std::size_t>& axes) {
  Tape& t = tape_of(a);
  const Shape& sh = a.shape();
  const std::size_t r = sh.size();
  if (axes.size() != r) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for shape " +
                         to_string(sh));
  }
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw DimensionError("permute: invalid axis permutation");
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = sh[axes[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * sh[i + 1];
  // source offset for each output linear index
  const std::size_t n = a.value().size();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    src[lin] = off;
    for (std::size_t i = r; i-- > 0;) {
      const std::size_t step = in_strides[axes[i]];
      if (++idx[i] < out_shape[i]) {
        off += step;
        break;
      }
      off -= (out_shape[i] - 1) * step;
      idx[i] = 0;
    }
  }
  auto av = a.value();
  std::vector<double> out(n);
  for (std::size_t lin = 0; lin < n; ++lin) out[lin] = av[src[lin]];
  const std::size_t ia = a.id();
  return t.record("permute", std::move(out_shape), std::move(out), {ia},
                  [ia, src = std::move(src)](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t lin = 0; lin < g.size(); ++lin) ga[src[lin]] += g[lin];
                  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a);
  if (numel(shape) != a.value().size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " +
                         to_string(shape));
  }
  auto av = a.value();
  const std::size_t ia = a.id();
  return t.record("reshape", std::move(shape), std::vector<double>(av.begin(), av.end()), {ia},
                  [=](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                  });
}

Var embed_lookup(Var table, std::span<const int> ids) {
  Tape& t = tape_of(table);
  const Shape& sh = table.shape();
  if (sh.size() != 2) throw DimensionError("embed_lookup: table must be 2-D, got " + to_string(sh));
  if (ids.empty()) throw DimensionError("embed_lookup: empty id list");
  const std::size_t vocab = sh[0], d = sh[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embed_lookup: id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  auto tv = table.value();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const std::size_t it = table.id();
  std::vector<int> rows(ids.begin(), ids.end());
  return t.record("embed_lookup", {ids.size(), d}, std::move(out), {it},
                  [it, d, rows = std::move(rows)](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto gt = tp.grad_sink(it);
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                      double* dst = gt.data() + static_cast<std::size_t>(rows[i]) * d;
                      for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                    }
                  });
}

Var dropout(Var a, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: rate must lie in [0, 1)");
  if (p == 0.0) return a;
  Tape& t = tape_of(a);
  std::bernoulli_distribution keep(1.0 - p);
  const double kscale = 1.0 / (1.0 - p);
  auto av = a.value();
  std::vector<double> factor(av.size());
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    factor[i] = keep(rng) ? kscale : 0.0;
    out[i] = av[i] * factor[i];
  }
  const std::size_t ia = a.id();
  return t.record("dropout", a.shape(), std::move(out), {ia},
                  [ia, factor = std::move(factor)](Tape& tp, std::size_t self) {
                    auto g = tp.grad(self);
                    auto ga = tp.grad_sink(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor[i];
                  });
}

Var label_smoothed_nll(Var log_probs, std::span<const int> targets, double smoothing,
                       int ignore_index) {
  Tape& t = tape_of(log_probs);
  const Shape& sh = log_probs.shape();
  if (sh.size() != 2) {
    throw DimensionError("label_smoothed_nll: expected [n x V], got " + to_string(sh));
  }
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw ContractError("label_smoothed_nll: smoothing must lie in [0, 1)");
  }
  const std::size_t n = sh[0], vocab = sh[1];
  if (targets.size() != n) {
    throw DimensionError("label_smoothed_nll: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
  }
  std::size_t count = 0;
  for (int y : targets) {
    if (y == ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw InputError("target id " + std::to_string(y) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    ++count;
  }
  if (count == 0) throw InputError("label_smoothed_nll: every target is padding");
  const double on = 1.0 - smoothing;
  const double off = vocab > 1 ? smoothing / static_cast<double>(vocab - 1) : 0.0;
  auto lp = log_probs.value();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_index) continue;
    double row = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const double q = static_cast<int>(v) == targets[i] ? on : off;
      if (q != 0.0) row -= q * lp[i * vocab + v];
    }
    total += row;
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  const std::size_t il = log_probs.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return t.record("label_smoothed_nll", {1}, {total * inv_count}, {il},
                  [=, tg = std::move(tg)](Tape& tp, std::size_t self) {
                    const double g = tp.grad(self)[0] * inv_count;
                    auto gl = tp.grad_sink(il);
                    for (std::size_t i = 0; i < n; ++i) {
                      if (tg[i] == ignore_index) continue;
                      for (std::size_t v = 0; v < vocab; ++v) {
                        const double q = static_cast<int>(v) == tg[i] ? on : off;
                        gl[i * vocab + v] -= g * q;
                      }
                    }
                  });
}

}  // namespace normlab
