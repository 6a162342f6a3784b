#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "clora/autodiff.hpp"
#include "clora/optim.hpp"
#include "test_util.hpp"

using namespace clora;
using clora::test::check_gradients;
using clora::test::naive_matmul;
using clora::test::naive_transpose;
using clora::test::random_tensor;

namespace {

constexpr double grad_tol = 1e-4;

// Scalar probe: cross-entropy of a fixed random projection of y, so every
// element of y gets its own gradient.
Var<double> probe(Var<double> y, std::uint64_t seed = 99) {
  Tape<double>& t = y.tape();
  const std::size_t n = y.value().rows(), m = y.value().cols();
  Var<double> z = matmul(y, t.constant(random_tensor<double>({m, 3}, seed)));
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % 3;
  return softmax_cross_entropy(z, labels);
}

Parameter<double> param(const std::string& name, Shape s, std::uint64_t seed, double scale = 1.0) {
  return Parameter<double>(name, random_tensor<double>(std::move(s), seed, scale), true);
}

}  // namespace

TEST(Tensor, ShapesAreValidated) {
  EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW((Tensor<double>::matrix({{1, 2}, {3}})), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(t.dim(2), ShapeError);
}

TEST(Tensor, BitwiseEqualityDistinguishesSignedZero) {
  auto a = Tensor<double>::vector({0.0, 1.0});
  auto b = Tensor<double>::vector({-0.0, 1.0});
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(bitwise_equal(a, b));
  EXPECT_TRUE(bitwise_equal(a, a));
}

TEST(Autodiff, MatmulMatchesTripleLoop) {
  for (auto [n, k, m] : {std::tuple{1, 1, 1}, {3, 5, 2}, {17, 64, 33}, {64, 64, 64}}) {
    auto a = random_tensor<double>({std::size_t(n), std::size_t(k)}, 1);
    auto b = random_tensor<double>({std::size_t(k), std::size_t(m)}, 2);
    Tape<double> tape;
    auto c = matmul(tape.constant(a), tape.constant(b)).value();
    EXPECT_LT(max_abs_diff(c, naive_matmul(a, b)), 1e-12) << n << "x" << k << "x" << m;

    auto af = a.cast<float>(), bf = b.cast<float>();
    Tape<float> tf;
    auto cf = matmul(tf.constant(af), tf.constant(bf)).value();
    EXPECT_LT(max_abs_diff(cf, naive_matmul(af, bf)), 1e-4f);
  }
}

TEST(Autodiff, LinearIsInputTimesWeightTranspose) {
  auto x = random_tensor<double>({5, 7}, 3);
  auto w = random_tensor<double>({4, 7}, 4);
  auto b = random_tensor<double>({4}, 5);
  Tape<double> tape;
  auto y = linear(tape.constant(x), tape.constant(w), tape.constant(b)).value();
  auto ref = naive_matmul(x, naive_transpose(w));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) ref.at(i, j) += b[j];
  EXPECT_LT(max_abs_diff(y, ref), 1e-12);
  EXPECT_THROW(linear(tape.constant(x), tape.constant(random_tensor<double>({4, 6}, 1))), ShapeError);
}

TEST(Autodiff, ShapeErrorsNameTheShapes) {
  Tape<double> tape;
  try {
    matmul(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({4, 2})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
  }
}

TEST(Autodiff, GradientsOfElementaryOps) {
  auto a = param("a", {3, 4}, 11);
  auto b = param("b", {4, 5}, 12);
  auto c = param("c", {3, 5}, 13);
  auto bias = param("bias", {5}, 14);
  auto w = param("w", {2, 5}, 15);
  auto res = check_gradients({&a, &b, &c, &bias, &w}, [&](Tape<double>& t) {
    Var<double> y = add(matmul(t.param(a), t.param(b)), t.param(c));
    y = add_row(scale(y, 0.7), t.param(bias));
    y = linear(y, t.param(w));
    return probe(y);
  });
  EXPECT_LT(res.max_rel, grad_tol) << res.worst;
}

TEST(Autodiff, GradientsOfNonlinearities) {
  auto x = param("x", {4, 6}, 21);
  // Keep relu inputs away from the kink.
  for (double& v : x.value.data())
    if (std::abs(v) < 0.05) v += 0.2;
  auto gain = param("gain", {6}, 22);
  auto bias = param("bias", {6}, 23);
  auto res = check_gradients({&x, &gain, &bias}, [&](Tape<double>& t) {
    Var<double> h = layer_norm(t.param(x), t.param(gain), t.param(bias));
    Var<double> g = gelu(h);
    Var<double> r = relu(t.param(x));
    return probe(add(g, r));
  });
  EXPECT_LT(res.max_rel, grad_tol) << res.worst;
}

TEST(Autodiff, GradientsOfSoftmaxNormalizeAndTemperature) {
  auto x = param("x", {3, 5}, 31);
  auto tau = Parameter<double>("tau", Tensor<double>::scalar(0.3), true);
  auto res = check_gradients({&x, &tau}, [&](Tape<double>& t) {
    Var<double> s = row_softmax(t.param(x), 0.5);
    Var<double> n = l2_normalize_rows(t.param(x));
    Var<double> z = div_scalar(add(s, n), t.param(tau));
    return softmax_cross_entropy(z, {0, 4, 2});
  });
  EXPECT_LT(res.max_rel, grad_tol) << res.worst;
}

TEST(Autodiff, GradientsOfIndexingOps) {
  auto table = param("table", {5, 3}, 41);
  auto pos = param("pos", {2, 3}, 42);
  auto extra = param("extra", {1, 3}, 43);
  auto res = check_gradients({&table, &pos, &extra}, [&](Tape<double>& t) {
    Var<double> g = gather_rows(t.param(table), {4, 0, 4, 2});  // repeated row
    Var<double> c = concat_rows<double>({t.param(extra), g, t.param(extra)});
    Var<double> y = add_tiled(gather_rows(c, {0, 1, 2, 3, 4, 5}), t.param(pos));
    return sum(matmul(transpose(y), y));
  });
  EXPECT_LT(res.max_rel, grad_tol) << res.worst;
}

TEST(Autodiff, GradientsOfMaskedAttention) {
  const std::size_t batch = 2, seq = 3, d = 4, heads = 2;
  auto q = param("q", {batch * seq, d}, 51);
  auto k = param("k", {batch * seq, d}, 52);
  auto v = param("v", {batch * seq, d}, 53);
  const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 1, 0};
  auto res = check_gradients({&q, &k, &v}, [&](Tape<double>& t) {
    return probe(attention(t.param(q), t.param(k), t.param(v), batch, seq, heads, mask));
  });
  EXPECT_LT(res.max_rel, grad_tol) << res.worst;
}

TEST(Autodiff, GradientsThroughFixedDropoutMask) {
  auto x = param("x", {4, 8}, 61);
  auto res = check_gradients({&x}, [&](Tape<double>& t) {
    Rng rng(5);  // same mask on every evaluation
    return probe(dropout(t.param(x), 0.25, true, rng));
  });
  EXPECT_LT(res.max_rel, grad_tol) << res.worst;
}

TEST(Autodiff, AttentionMatchesNaivePerHeadOracle) {
  const std::size_t batch = 2, seq = 5, d = 12, heads = 3, dh = d / heads;
  auto q = random_tensor<double>({batch * seq, d}, 71);
  auto k = random_tensor<double>({batch * seq, d}, 72);
  auto v = random_tensor<double>({batch * seq, d}, 73);
  std::vector<std::uint8_t> mask(batch * seq, 1);
  mask[3] = mask[4] = mask[9] = 0;
  Tape<double> tape;
  auto out = attention(tape.constant(q), tape.constant(k), tape.constant(v), batch, seq, heads, mask).value();

  Tensor<double> ref({batch * seq, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < seq; ++i) {
        std::vector<double> s(seq);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          double dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += q.at(b * seq + i, h * dh + c) * k.at(b * seq + j, h * dh + c);
          s[j] = mask[b * seq + j] ? dot / std::sqrt(double(dh)) : -std::numeric_limits<double>::infinity();
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < seq; ++j) acc += s[j] / z * v.at(b * seq + j, h * dh + c);
          ref.at(b * seq + i, h * dh + c) = acc;
        }
      }
  EXPECT_LT(max_abs_diff(out, ref), 1e-12);
}

TEST(Autodiff, LayerNormAndGeluMatchFormulas) {
  auto x = random_tensor<double>({3, 6}, 81, 2.0);
  Tape<double> tape;
  auto ones = tape.constant(Tensor<double>({6}, 1.0));
  auto zeros = tape.constant(Tensor<double>({6}, 0.0));
  auto ln = layer_norm(tape.constant(x), ones, zeros).value();
  auto ge = gelu(tape.constant(x)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 6; ++j) mu += x.at(i, j) / 6;
    for (std::size_t j = 0; j < 6; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu) / 6;
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_NEAR(ln.at(i, j), (x.at(i, j) - mu) / std::sqrt(var + 1e-5), 1e-12);
      const double u = x.at(i, j);
      EXPECT_NEAR(ge.at(i, j), 0.5 * u * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (u + 0.044715 * u * u * u))),
                  1e-12);
    }
  }
}

TEST(Autodiff, SoftmaxRowsSumToOneAndTemperatureSharpens) {
  auto x = random_tensor<double>({50, 7}, 91, 3.0);
  Tape<double> tape;
  auto p1 = row_softmax(tape.constant(x), 1.0).value();
  auto p2 = row_softmax(tape.constant(x), 0.1).value();
  for (std::size_t i = 0; i < 50; ++i) {
    double s1 = 0, s2 = 0, m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      s1 += p1.at(i, j);
      s2 += p2.at(i, j);
      m1 = std::max(m1, p1.at(i, j));
      m2 = std::max(m2, p2.at(i, j));
    }
    EXPECT_NEAR(s1, 1.0, 1e-12);
    EXPECT_NEAR(s2, 1.0, 1e-12);
    EXPECT_GE(m2, m1 - 1e-15);
  }
  // Large logits stay finite thanks to the max shift.
  auto big = row_softmax(tape.constant(Tensor<double>::matrix({{1000.0, 999.0}})), 0.01).value();
  EXPECT_TRUE(big.all_finite());
  EXPECT_THROW(row_softmax(tape.constant(x), 0.0), DomainError);
}

TEST(Autodiff, DropoutIsUnbiasedAndIdentityInEval) {
  Tensor<double> ones({200, 100}, 1.0);
  Rng rng(3);
  Tape<double> tape;
  Var<double> x = tape.constant(ones);
  EXPECT_EQ(dropout(x, 0.25, false, rng).id(), x.id());
  EXPECT_EQ(dropout(x, 0.0, true, rng).id(), x.id());
  EXPECT_THROW(dropout(x, 1.0, true, rng), DomainError);
  EXPECT_THROW(dropout(x, -0.1, true, rng), DomainError);

  // Monte Carlo: mean of the inverted-dropout output is 1, zero fraction is p.
  const auto y = dropout(x, 0.25, true, rng).value();
  double mean = 0, zeros = 0;
  for (double v : y.data()) {
    mean += v / y.size();
    zeros += (v == 0.0) / double(y.size());
  }
  EXPECT_NEAR(mean, 1.0, 0.02);
  EXPECT_NEAR(zeros, 0.25, 0.01);
}

TEST(Autodiff, NonFiniteValuesAreRejected) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::matrix({{1.0, std::numeric_limits<double>::quiet_NaN()}}));
  EXPECT_THROW(scale(x, 2.0), NumericError);
  auto y = tape.constant(Tensor<double>::matrix({{1e300, 1.0}}));
  EXPECT_THROW(scale(y, 1e300), NumericError);
}

TEST(Autodiff, BackwardRulesAndStateErrors) {
  auto p = param("p", {2, 2}, 1);
  {
    Tape<double> tape;
    auto loss = sum(tape.param(p));
    EXPECT_THROW(tape.backward(tape.param(p)), ShapeError);
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), StateError);
    EXPECT_THROW(sum(tape.param(p)), StateError);
  }
  EXPECT_TRUE(p.has_grad);
  for (double g : p.grad.data()) EXPECT_EQ(g, 1.0);
  {
    // Gradients are not silently accumulated across tapes.
    Tape<double> tape;
    auto loss = sum(tape.param(p));
    EXPECT_THROW(tape.backward(loss), StateError);
  }
  p.zero_grad();
  Tape<double> a, b;
  EXPECT_THROW(add(a.param(p), b.param(p)), StateError);
}

TEST(Autodiff, FrozenParametersGetNoGradient) {
  auto w = param("w", {3, 3}, 1);
  auto frozen = Parameter<double>("frozen", random_tensor<double>({3, 3}, 2), false);
  Tape<double> tape;
  auto loss = sum(matmul(tape.param(w), tape.param(frozen)));
  tape.backward(loss);
  EXPECT_TRUE(w.has_grad);
  EXPECT_FALSE(frozen.has_grad);
  EXPECT_TRUE(frozen.grad.empty());
}

TEST(Optim, AdamWFirstStepMatchesHandComputation) {
  Parameter<double> p("p", Tensor<double>::vector({1.0, -2.0}), true);
  AdamW<double> opt({&p}, AdamWConfig{1e-3, 0.9, 0.999, 1e-8, 1e-2});
  p.grad = Tensor<double>::vector({0.5, -4.0});
  p.has_grad = true;
  opt.step(1e-3);
  // Step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps) after decay.
  for (std::size_t i = 0; i < 2; ++i) {
    const double w0 = i == 0 ? 1.0 : -2.0, g = i == 0 ? 0.5 : -4.0;
    const double expect = w0 * (1 - 1e-3 * 1e-2) - 1e-3 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(p.value[i], expect, 1e-15);
  }
  EXPECT_FALSE(p.has_grad);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Optim, AdamWSecondStepUsesBiasCorrection) {
  Parameter<double> p("p", Tensor<double>::scalar(0.3), true);
  AdamW<double> opt({&p}, AdamWConfig{0.01, 0.9, 0.999, 1e-8, 0.0});
  double w = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? 1.0 : -0.5;
    p.grad = Tensor<double>::scalar(g);
    p.has_grad = true;
    opt.step(0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    w -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p.value[0], w, 1e-12);
  }
}

TEST(Optim, AdamWRejectsBadInputsWithoutTouchingWeights) {
  Parameter<double> a("a", Tensor<double>::scalar(1.0), true), b("b", Tensor<double>::scalar(2.0), true);
  AdamW<double> opt({&a, &b});
  a.grad = Tensor<double>::scalar(1.0);
  a.has_grad = true;
  b.grad = Tensor<double>::scalar(std::numeric_limits<double>::quiet_NaN());
  b.has_grad = true;
  EXPECT_THROW(opt.step(1e-3), NumericError);
  EXPECT_EQ(a.value[0], 1.0);
  EXPECT_EQ(b.value[0], 2.0);
  EXPECT_THROW(opt.step(0.0), DomainError);
  EXPECT_THROW(opt.step(-1.0), DomainError);
}

TEST(Optim, AdamWSkipsFrozenParameters) {
  Parameter<double> p("p", Tensor<double>::scalar(1.0), false);
  AdamW<double> opt({&p});
  opt.step(1e-3);
  EXPECT_EQ(p.value[0], 1.0);
}

TEST(Optim, CosineScheduleEndpoints) {
  EXPECT_EQ(cosine_lr(0, 2000, 2e-4), 2e-4);
  EXPECT_NEAR(cosine_lr(1000, 2000, 2e-4), 1e-4, 1e-18);
  EXPECT_EQ(cosine_lr(2000, 2000, 2e-4), 0.0);
  EXPECT_NEAR(cosine_lr(500, 2000, 1.0), 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
  for (int s = 1; s <= 2000; ++s) EXPECT_LE(cosine_lr(s, 2000, 2e-4), cosine_lr(s - 1, 2000, 2e-4));
  EXPECT_THROW(cosine_lr(-1, 10, 1.0), DomainError);
  EXPECT_THROW(cosine_lr(11, 10, 1.0), DomainError);
  EXPECT_THROW(cosine_lr(0, 0, 1.0), DomainError);
}

TEST(Random, StreamsAreDeterministicAndSeedSensitive) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
  EXPECT_NE(derive_seed(1, hash_string("x")), derive_seed(1, hash_string("y")));
  EXPECT_NE(derive_seed(1, 5), derive_seed(2, 5));
  Rng r(7);
  double mean = 0, sq = 0;
  for (int i = 0; i < 20000; ++i) {
    const double z = r.normal();
    mean += z / 20000;
    sq += z * z / 20000;
  }
  EXPECT_NEAR(mean, 0.0, 0.03);
  EXPECT_NEAR(sq, 1.0, 0.05);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.index(7), 7u);
}
