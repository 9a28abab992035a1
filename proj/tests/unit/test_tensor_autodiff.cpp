#include <gtest/gtest.h>

#include <cmath>

#include "normlab/ops.hpp"
#include "test_support.hpp"

namespace normlab {
namespace {

using testing::gradient_check;
using testing::random_tensor;

std::vector<double> values(Var v) { return {v.value().begin(), v.value().end()}; }
std::vector<double> grads(Var v) { return {v.grad().begin(), v.grad().end()}; }

TEST(Matmul, IdentityAndHandArithmetic) {
  Tape t;
  Var i2 = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var b = t.constant(Tensor::matrix(2, 2, {2, 3, 4, 5}));
  EXPECT_EQ(values(matmul(i2, b)), (std::vector<double>{2, 3, 4, 5}));

  Var r = t.constant(Tensor::matrix(1, 2, {1, 2}));
  Var c = t.constant(Tensor::matrix(2, 1, {3, 4}));
  Var p = matmul(r, c);
  EXPECT_EQ(p.shape(), (Shape{1, 1}));
  EXPECT_EQ(p.item(), 11.0);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  // d/da sum(a.b) at a=[[1,2]], b=[[3],[4]] is [[3,4]].
  Tape t;
  Var a = t.variable(Tensor::matrix(1, 2, {1, 2}));
  Var b = t.constant(Tensor::matrix(2, 1, {3, 4}));
  t.backward(sum(matmul(a, b)));
  EXPECT_EQ(grads(a), (std::vector<double>{3, 4}));

  Tensor fd = finite_diff(
      [](const Tensor& x) {
        Tape t2;
        return sum(matmul(t2.constant(x), t2.constant(Tensor::matrix(2, 1, {3, 4})))).item();
      },
      Tensor::matrix(1, 2, {1, 2}), 1e-5);
  EXPECT_NEAR(fd[0], 3.0, 1e-9);
  EXPECT_NEAR(fd[1], 4.0, 1e-9);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  Var a = t.constant(Tensor::zeros({2, 3}));
  Var b = t.constant(Tensor::zeros({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
  }
}

TEST(Primitives, ElementwiseExamples) {
  Tape t;
  EXPECT_EQ(values(relu(t.constant(Tensor::vector({-1, 0, 2})))), (std::vector<double>{0, 0, 2}));
  auto sm = values(softmax(t.constant(Tensor::vector({0, 0, 0})), 0));
  for (double v : sm) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto [mean, var] = mean_var(t.constant(Tensor::vector({1, 2, 3})), 0);
  EXPECT_DOUBLE_EQ(mean.item(), 2.0);
  EXPECT_NEAR(var.item(), 2.0 / 3.0, 1e-15);
}

TEST(Primitives, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(7);
  Tape t;
  Var s = softmax(t.constant(random_tensor({4, 5, 3}, rng, -20, 20)), 1);
  auto v = s.value();
  for (std::size_t o = 0; o < 4; ++o) {
    for (std::size_t in = 0; in < 3; ++in) {
      double z = 0;
      for (std::size_t j = 0; j < 5; ++j) z += v[(o * 5 + j) * 3 + in];
      EXPECT_NEAR(z, 1.0, 1e-12);
    }
  }
}

TEST(Primitives, ErrorPaths) {
  Tape t;
  Var table = t.constant(Tensor::zeros({4, 2}));
  std::vector<int> bad{0, 4};
  EXPECT_THROW(embed_lookup(table, bad), IndexError);
  EXPECT_THROW(softmax(table, 2), DimensionError);
  EXPECT_THROW(mean_var(table, 5), DimensionError);
  EXPECT_THROW(reshape(table, {3, 3}), DimensionError);
  EXPECT_THROW(add(table, t.constant(Tensor::zeros({3}))), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Backward, SumAndSquare) {
  Tape t;
  Var x = t.variable(Tensor::vector({0.5, -1, 3}));
  t.backward(sum(x));
  EXPECT_EQ(grads(x), (std::vector<double>{1, 1, 1}));

  Tape t2;
  Var y = t2.variable(Tensor::vector({1, 2}));
  t2.backward(sum(mul(y, y)));
  EXPECT_EQ(grads(y), (std::vector<double>{2, 4}));
}

TEST(Backward, ContractErrors) {
  Tape empty;
  Tape t;
  Var x = t.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(t.backward(x), ContractError);
  Var s = sum(x);
  t.backward(s);
  EXPECT_THROW(t.backward(s), ContractError);
  EXPECT_THROW(empty.backward(s), ContractError);
}

TEST(Backward, FanOutAccumulates) {
  Tape t;
  Var x = t.variable(Tensor::vector({1.5, -2}));
  Var y = add(scale(x, 3.0), x);
  t.backward(sum(y));
  EXPECT_EQ(grads(x), (std::vector<double>{4, 4}));
}

TEST(Backward, BoundParameterReceivesGradient) {
  Tensor w = Tensor::vector({1, 2}, true);
  Tape t;
  Var a = t.parameter(w);
  Var b = t.parameter(w);
  EXPECT_EQ(a.id(), b.id());
  t.backward(sum(mul(a, b)));
  ASSERT_TRUE(w.grad.has_value());
  EXPECT_EQ(*w.grad, (std::vector<double>{2, 4}));
}

TEST(FiniteDiff, Examples) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({5}, rng);
  Tensor g = finite_diff([](const Tensor& v) {
    double s = 0;
    for (double e : v.data) s += e;
    return s;
  }, x, 1e-5);
  for (double e : g.data) EXPECT_NEAR(e, 1.0, 1e-9);

  Tensor sq = finite_diff([](const Tensor& v) { return v[0] * v[0]; }, Tensor::vector({3}), 1e-5);
  EXPECT_NEAR(sq[0], 6.0, 1e-7);
  EXPECT_THROW(finite_diff([](const Tensor&) { return 0.0; }, x, 0.0), ContractError);
}

// Every primitive against the finite-difference oracle at 10 random points in [-1, 1].
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(1000 + GetParam());
  std::vector<std::uint8_t> mask{0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0};
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    testing::ScalarBuilder build;
  };
  // Weighted sums make the root sensitive to every output coordinate.
  auto wsum = [](Var v) {
    Tape& t = *v.tape();
    Tensor w = Tensor::zeros(v.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
    return sum(mul(v, t.constant(w)));
  };
  std::vector<Case> cases = {
      {"matmul", {{3, 4}, {4, 2}}, [&](Tape&, const auto& v) { return wsum(matmul(v[0], v[1])); }},
      {"matmul_nt", {{3, 4}, {2, 4}}, [&](Tape&, const auto& v) { return wsum(matmul(v[0], v[1], true)); }},
      {"batched", {{2, 3, 4}, {2, 4, 2}}, [&](Tape&, const auto& v) { return wsum(batched_matmul(v[0], v[1])); }},
      {"batched_nt", {{2, 3, 4}, {2, 2, 4}}, [&](Tape&, const auto& v) { return wsum(batched_matmul(v[0], v[1], true)); }},
      {"add_bias", {{3, 4}, {4}}, [&](Tape&, const auto& v) { return wsum(add(v[0], v[1])); }},
      {"mul_bias", {{3, 4}, {4}}, [&](Tape&, const auto& v) { return wsum(mul(v[0], v[1])); }},
      {"mul", {{3, 4}, {3, 4}}, [&](Tape&, const auto& v) { return wsum(mul(v[0], v[1])); }},
      {"scale", {{5}}, [&](Tape&, const auto& v) { return wsum(scale(v[0], -1.7)); }},
      {"relu", {{6}}, [&](Tape&, const auto& v) { return wsum(relu(v[0])); }},
      {"softmax0", {{3, 4}}, [&](Tape&, const auto& v) { return wsum(softmax(v[0], 0)); }},
      {"softmax1", {{3, 4}}, [&](Tape&, const auto& v) { return wsum(softmax(v[0], 1)); }},
      {"masked_softmax", {{2, 2, 3}}, [&](Tape&, const auto& v) { return wsum(masked_softmax(v[0], mask, 1)); }},
      {"log_softmax", {{3, 4}}, [&](Tape&, const auto& v) { return wsum(log_softmax(v[0])); }},
      {"mean", {{3, 4}}, [&](Tape&, const auto& v) { return wsum(mean_var(v[0], 1).first); }},
      {"var", {{3, 4}}, [&](Tape&, const auto& v) { return wsum(mean_var(v[0], 0).second); }},
      {"standardize", {{3, 4}, {3}, {3}}, [&](Tape&, const auto& v) {
         return wsum(standardize(v[0], v[1], add(mul(v[2], v[2]), v[2].tape()->constant(Tensor::filled({3}, 0.5))), 1e-5));
       }},
      {"permute", {{2, 3, 4}}, [&](Tape&, const auto& v) { return wsum(permute(v[0], {2, 0, 1})); }},
      {"transpose", {{2, 3}}, [&](Tape&, const auto& v) { return wsum(transpose(v[0])); }},
      {"reshape", {{2, 3}}, [&](Tape&, const auto& v) { return wsum(reshape(v[0], {3, 2})); }},
      {"embed", {{4, 3}}, [&](Tape&, const auto& v) {
         std::vector<int> ids{2, 0, 2, 3};
         return wsum(embed_lookup(v[0], ids));
       }},
      {"smoothed_nll", {{3, 5}}, [&](Tape&, const auto& v) {
         std::vector<int> tg{1, 0, 4};
         return label_smoothed_nll(log_softmax(v[0]), tg, 0.1, 0);
       }},
  };
  for (const auto& c : cases) {
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng));
    EXPECT_LT(gradient_check(c.build, inputs), 1e-4) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(RandomPoints, PrimitiveGradient, ::testing::Range(0, 10));

TEST(Properties, GradientIsLinear) {
  std::mt19937_64 rng(11);
  Tensor x0 = random_tensor({3, 4}, rng);
  Tensor w0 = random_tensor({4, 2}, rng);
  auto f = [&](Tape& t, Var x) { return sum(relu(matmul(x, t.constant(w0)))); };
  auto g = [&](Tape&, Var x) { return sum(softmax(x, 1)); };
  auto grad_of = [&](int which) {
    Tape t;
    Var x = t.variable(x0);
    Var root = which == 0 ? f(t, x) : which == 1 ? g(t, x) : add(f(t, x), g(t, x));
    t.backward(root);
    return grads(x);
  };
  auto gf = grad_of(0), gg = grad_of(1), gs = grad_of(2);
  for (std::size_t i = 0; i < gs.size(); ++i) EXPECT_NEAR(gs[i], gf[i] + gg[i], 1e-12);
}

TEST(Properties, ReplayIsBitIdentical) {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({4, 6}, rng);
  Tensor b = random_tensor({6, 3}, rng);
  auto run = [&] {
    Tape t;
    Var x = t.variable(a);
    Var y = t.variable(b);
    Var out = sum(log_softmax(matmul(x, y)));
    t.backward(out);
    auto r = grads(x);
    r.push_back(out.item());
    auto gy = grads(y);
    r.insert(r.end(), gy.begin(), gy.end());
    return r;
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
  Tape t;
  Var x = t.variable(Tensor::vector({1, 2}));
  Var y = scale(x, 2.0);
  Var z = add(y, x);
  for (std::size_t id = 0; id < t.size(); ++id) {
    for (auto in : t.inputs(id)) EXPECT_LT(in, id);
  }
  EXPECT_EQ(z.id(), t.size() - 1);
}

}  // namespace
}  // namespace normlab
