#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "varformer/errors.hpp"
#include "varformer/ops.hpp"
#include "varformer/tensor.hpp"

namespace varformer {
namespace {

Tensor random_param(Shape shape, std::mt19937_64& gen, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = u(gen);
  return Tensor::parameter(std::move(shape), std::move(v));
}

TEST(Tensor, ShapeAndDataAgree) {
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, GradientMatchesDataShape) {
  const Tensor w = Tensor::parameter({2, 2}, {1, 2, 3, 4});
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::mul(w, w));
  }
  tape.backward(loss);
  ASSERT_TRUE(w.has_grad());
  EXPECT_EQ(w.grad().size(), w.size());
}

TEST(Matmul, HandExample) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {1, 1});
  const Tensor c = ops::matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 7.0);
}

TEST(Matmul, IdentityLeavesInputUnchanged) {
  std::mt19937_64 gen(3);
  const Tensor a = random_param({3, 4}, gen).detach();
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  const Tensor c = ops::matmul(a, Tensor({4, 4}, eye));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    ops::matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, EqualInputsGiveUniform) {
  const Tensor s = ops::softmax(Tensor({5}, 0.7), 0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(s[i], 0.2);
}

TEST(Softmax, Saturates) {
  const Tensor s = ops::softmax(Tensor({2}, {0.0, 60.0}), 0);
  EXPECT_LT(s[0], 1e-20);
  EXPECT_NEAR(s[1], 1.0, 1e-20);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_param({4, 7}, gen, -30.0, 30.0).detach();
    const Tensor s = ops::softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) total += s.at(r, c);
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Elementwise, AnalyticValues) {
  EXPECT_NEAR(ops::softplus(Tensor({1}, 0.0))[0], std::log(2.0), 1e-15);
  const Tensor r = ops::relu(Tensor({2}, {-1.0, 2.0}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 2.0);
  EXPECT_NEAR(ops::softplus(Tensor({1}, 800.0))[0], 800.0, 1e-12);
  EXPECT_TRUE(std::isfinite(ops::softplus(Tensor({1}, -800.0))[0]));
}

TEST(Elementwise, DomainErrorsNameTheOp) {
  try {
    ops::log(Tensor({2}, {1.0, -1.0}));
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
  try {
    ops::sqrt(Tensor({1}, -0.5));
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("sqrt"), std::string::npos);
  }
}

TEST(Elementwise, MismatchedShapesAreErrors) {
  EXPECT_THROW(ops::add(Tensor({2, 2}), Tensor({4})), ShapeError);
  EXPECT_THROW(ops::mul(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
  EXPECT_THROW(ops::add_row_bias(Tensor({2, 3}), Tensor({2})), ShapeError);
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  const Tensor y = ops::layer_norm(Tensor({1, 4}, 3.0), Tensor({4}, 1.0), Tensor({4}, 0.0));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(LayerNorm, RowMeanEqualsBiasMean) {
  std::mt19937_64 gen(5);
  const Tensor x = random_param({3, 6}, gen).detach();
  const Tensor y = ops::layer_norm(x, Tensor({6}, 1.0), Tensor({6}, 0.25));
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mean += y.at(r, c);
    EXPECT_NEAR(mean / 6.0, 0.25, 1e-10);
  }
}

TEST(Backward, SumGivesOnes) {
  const Tensor w = Tensor::parameter({2, 3}, {1, -2, 3, 0.5, 4, -1});
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(w);
  }
  tape.backward(loss);
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceW) {
  const Tensor w = Tensor::parameter({3}, {1.5, -2.0, 0.25});
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::mul(w, w));
  }
  tape.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(w.grad()[i], 2.0 * w[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
  const Tensor w = Tensor::parameter({2}, {1, 2});
  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = ops::scale(w, 2.0);
  }
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, RecordsAreTopologicallyOrdered) {
  std::mt19937_64 gen(2);
  const Tensor a = random_param({3, 3}, gen);
  const Tensor b = random_param({3, 3}, gen);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = ops::sum(ops::softmax(ops::add(ops::matmul(a, b), a), 1));
  }
  std::vector<std::uint64_t> produced{a.id(), b.id()};
  for (const auto& rec : tape.records()) {
    for (const auto& in : rec.inputs) {
      if (!in.requires_grad()) continue;
      EXPECT_NE(std::find(produced.begin(), produced.end(), in.id()), produced.end()) << rec.op;
    }
    produced.push_back(rec.output.id());
  }
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_param({3, 4}, gen);
    const Tensor b = random_param({4, 2}, gen);
    const Tensor c = random_param({3, 2}, gen);
    auto loss = [&] { return ops::sum(ops::mul(ops::exp(ops::scale(ops::matmul(a, b), 0.3)), c)); };
    const auto check = oracles::check_gradients(loss, {{"a", a}, {"b", b}, {"c", c}});
    EXPECT_LT(check.max_rel_error, 1e-5) << check.worst_at;
  }
}

TEST(Backward, MatmulAndSoftmaxGradients) {
  std::mt19937_64 gen(23);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_param({2, 3}, gen);
    const Tensor b = random_param({3, 4}, gen);
    const Tensor w = random_param({2, 4}, gen).detach();
    const auto mm = oracles::check_gradients([&] { return ops::sum(ops::mul(ops::matmul(a, b), w)); },
                                             {{"a", a}, {"b", b}});
    EXPECT_LT(mm.max_rel_error, 1e-5) << mm.worst_at;
    const Tensor x = random_param({2, 4}, gen);
    const auto sm = oracles::check_gradients([&] { return ops::sum(ops::mul(ops::softmax(x, 1), w)); }, {{"x", x}});
    EXPECT_LT(sm.max_rel_error, 1e-5) << sm.worst_at;
  }
}

TEST(Backward, EveryOpPassesTheGradientOracle) {
  const auto report = oracles::gradient_ops(101, 100);
  EXPECT_TRUE(report.passed) << report.line();
  EXPECT_GE(report.trials, 100u);
}

TEST(Forward, DeterministicOnIdenticalInputs) {
  std::mt19937_64 g1(9), g2(9);
  const Tensor a = random_param({4, 4}, g1).detach();
  const Tensor b = random_param({4, 4}, g2).detach();
  const Tensor ya = ops::layer_norm(ops::softmax(ops::matmul(a, a), 1), Tensor({4}, 1.0), Tensor({4}, 0.0));
  const Tensor yb = ops::layer_norm(ops::softmax(ops::matmul(b, b), 1), Tensor({4}, 1.0), Tensor({4}, 0.0));
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_EQ(ya[i], yb[i]);
}

TEST(Forward, NoRecordingWithoutGradients) {
  Tape tape;
  TapeScope scope(tape);
  ops::matmul(Tensor({2, 2}, 1.0), Tensor({2, 2}, 1.0));
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Forward, FirstNonFiniteIsReported) {
  const Tensor w = Tensor::parameter({1}, {1000.0});
  Tape tape;
  {
    TapeScope scope(tape);
    ops::exp(w);
  }
  const auto found = tape.first_nonfinite();
  ASSERT_TRUE(found.has_value());
  EXPECT_NE(found->find("exp"), std::string::npos);
}

}  // namespace
}  // namespace varformer
