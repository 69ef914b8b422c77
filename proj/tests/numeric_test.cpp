#include "gradcheck.hpp"

#include "safecast/numeric/checkpoint.hpp"
#include "safecast/numeric/layers.hpp"
#include "safecast/numeric/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <numbers>

namespace safecast {
namespace {

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

Matrix random_matrix(Index r, Index c, std::mt19937_64 &rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

TEST(Linear, IdentityWeights) {
  std::mt19937_64 rng(1);
  Linear lin("lin", 2, 2, rng);
  lin.weight().value = Matrix::Identity(2, 2);
  Tape t;
  Var y = lin(t, t.constant(row({1, 2})));
  EXPECT_EQ(y.value(), row({1, 2}));
}

TEST(Linear, HandMultiply) {
  std::mt19937_64 rng(1);
  Linear lin("lin", 2, 2, rng);
  lin.weight().value << 2, 3, 4, 5;
  lin.bias().value = row({1, 1});
  Tape t;
  Var y = lin(t, t.constant(row({1, 1})));
  EXPECT_EQ(y.value(), row({7, 9}));
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  std::mt19937_64 rng(1);
  Linear lin("lin", 3, 2, rng);
  Tape t;
  try {
    lin(t, t.constant(row({1, 2})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError &e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x2]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Linear lin("lin", 4, 3, rng);
  Parameter x("x", random_matrix(5, 4, rng));
  std::vector<Parameter *> params{&lin.weight(), &lin.bias(), &x};
  auto loss = [&](bool bw) {
    Tape t;
    Var l = ops::sum(lin(t, t.param(x)));
    if (bw) t.backward(l);
    return l.scalar();
  };
  auto res = test::gradient_check(params, loss, 1e-6);
  EXPECT_EQ(res.passed, res.checked) << res.worst_name << " " << res.worst_relative;
}

TEST(Activations, DefinitionValues) {
  Tape t;
  EXPECT_EQ(ops::elu(t.constant(row({0.0}))).scalar(), 0.0);
  EXPECT_NEAR(ops::elu(t.constant(row({-50.0}))).scalar(), -1.0, 1e-15);
  EXPECT_EQ(ops::softmax_rows(t.constant(row({0, 0}))).value(), row({0.5, 0.5}));
  EXPECT_DOUBLE_EQ(activate(t.constant(row({-2.0})), Activation::leaky_relu(0.1)).scalar(),
                   -0.2);
  EXPECT_EQ(activate(t.constant(row({-3.0, 2.0})), Activation::relu()).value(), row({0, 2}));
  EXPECT_DOUBLE_EQ(activate(t.constant(row({0.0})), Activation::sigmoid()).scalar(), 0.5);
  EXPECT_DOUBLE_EQ(activate(t.constant(row({0.0})), Activation::tanh()).scalar(), 0.0);
}

TEST(Activations, GluRequiresEvenChannels) {
  Tape t;
  EXPECT_THROW(activate(t.constant(row({1, 2, 3})), Activation::glu()), DimensionError);
  Var g = activate(t.constant(row({2, 0})), Activation::glu());
  EXPECT_DOUBLE_EQ(g.scalar(), 1.0);
}

TEST(Activations, SoftmaxAxes) {
  std::mt19937_64 rng(3);
  Tape t;
  Var x = t.constant(random_matrix(4, 5, rng, 10.0));
  Matrix by_row = activate(x, Activation::softmax(1)).value();
  Matrix by_col = activate(x, Activation::softmax(0)).value();
  for (Index r = 0; r < 4; ++r) EXPECT_NEAR(by_row.row(r).sum(), 1.0, 1e-12);
  for (Index c = 0; c < 5; ++c) EXPECT_NEAR(by_col.col(c).sum(), 1.0, 1e-12);
  EXPECT_THROW(activate(x, Activation::softmax(2)), DimensionError);
}

TEST(LayerNorm, ConstantRowAndTwoPoint) {
  LayerNorm ln("ln", 3);
  Tape t;
  EXPECT_TRUE(ln(t, t.constant(row({1, 1, 1}))).value().isZero(0.0));
  LayerNorm ln2("ln2", 2);
  Matrix y = ln2(t, t.constant(row({0, 2}))).value();
  // Variance 1 with eps 1e-5 in the denominator.
  EXPECT_NEAR(y(0, 0), -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y(0, 1), 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(LayerNorm, RandomRowsStandardized) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix x = random_matrix(6, 9, rng, 3.0);
    Tape t;
    Matrix y = ops::standardize_rows(t.constant(x)).value();
    for (Index r = 0; r < y.rows(); ++r) {
      const double var_x = (x.row(r).array() - x.row(r).mean()).square().mean();
      const double m = y.row(r).mean();
      const double v = (y.row(r).array() - m).square().mean();
      EXPECT_LT(std::abs(m), 1e-9);
      EXPECT_NEAR(v, var_x / (var_x + 1e-5), 1e-9);
    }
  }
}

TEST(Lstm, ZeroWeightsZeroState) {
  std::mt19937_64 rng(1);
  LstmCell cell("lstm", 3, 4, rng);
  cell.input_weight().value.setZero();
  cell.recurrent_weight().value.setZero();
  Tape t;
  LstmState s = cell(t, t.constant(row({1, -2, 3})), cell.zero_state(t, 1));
  EXPECT_TRUE(s.h.value().isZero(0.0));
}

TEST(Lstm, SingleStepMatchesHandRecurrence) {
  std::mt19937_64 rng(5);
  const Index hidden = 2;
  LstmCell cell("lstm", 1, hidden, rng);
  // Gate pre-activations are x * w + h * u + b; set them by hand.
  cell.input_weight().value = row({0.5, -0.3, 0.8, 0.1, 1.2, -0.7, 0.4, 0.9});
  cell.recurrent_weight().value = Matrix::Zero(hidden, 4 * hidden);
  cell.recurrent_weight().value(0, 0) = 0.2;
  cell.recurrent_weight().value(1, 5) = -0.4;
  cell.bias().value = row({0.1, 0.0, 0.0, 0.2, -0.1, 0.0, 0.3, 0.0});
  const double x = 0.7;
  const double h0[2] = {0.25, -0.5};
  const double c0[2] = {0.3, 0.6};
  Tape t;
  Matrix hprev(1, 2), cprev(1, 2);
  hprev << h0[0], h0[1];
  cprev << c0[0], c0[1];
  LstmState s = cell(t, t.constant(row({x})), {t.constant(hprev), t.constant(cprev)});

  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const Matrix &w = cell.input_weight().value;
  const Matrix &u = cell.recurrent_weight().value;
  const Matrix &b = cell.bias().value;
  for (Index j = 0; j < hidden; ++j) {
    auto pre = [&](Index gate) {
      const Index col = gate * hidden + j;
      return x * w(0, col) + h0[0] * u(0, col) + h0[1] * u(1, col) + b(0, col);
    };
    const double i = sig(pre(0)), f = sig(pre(1)), g = std::tanh(pre(2)), o = sig(pre(3));
    const double c = f * c0[j] + i * g;
    EXPECT_NEAR(s.c.value()(0, j), c, 1e-12);
    EXPECT_NEAR(s.h.value()(0, j), o * std::tanh(c), 1e-12);
  }
}

TEST(Lstm, HiddenSizeMismatch) {
  std::mt19937_64 rng(1);
  LstmCell cell("lstm", 2, 4, rng);
  Tape t;
  LstmState wrong{t.constant(Matrix::Zero(1, 3)), t.constant(Matrix::Zero(1, 3))};
  EXPECT_THROW(cell(t, t.constant(row({1, 2})), wrong), DimensionError);
}

TEST(Lstm, ThreeStepGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  LstmCell cell("lstm", 3, 4, rng);
  Parameter xs("xs", random_matrix(3, 3, rng));
  std::vector<Parameter *> params;
  cell.collect(params);
  params.push_back(&xs);
  auto loss = [&](bool bw) {
    Tape t;
    Var xv = t.param(xs);
    LstmState s = cell.zero_state(t, 1);
    for (Index k = 0; k < 3; ++k) s = cell(t, ops::slice_rows(xv, k, 1), s);
    Var l = ops::sum(ops::square(s.h));
    if (bw) t.backward(l);
    return l.scalar();
  };
  auto res = test::gradient_check(params, loss, 1e-5);
  EXPECT_EQ(res.passed, res.checked) << res.worst_name << " " << res.worst_relative;
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(2);
  Conv2d conv("conv", 2, 2, rng);
  conv.kernel().value.setZero();
  // Center tap (ky = 1, kx = 1) of channel c feeding output c.
  for (Index c = 0; c < 2; ++c) conv.kernel().value(c, c * 9 + 4) = 1.0;
  Matrix x = random_matrix(4 * 5, 2, rng);
  Tape t;
  EXPECT_EQ(conv(t, t.constant(x), 4, 5).value(), x);
}

TEST(Conv2d, OnesKernelOnOneHotGivesClippedPlateau) {
  std::mt19937_64 rng(2);
  Conv2d conv("conv", 1, 1, rng);
  conv.kernel().value.setOnes();
  const Index height = 4, width = 5;
  for (Index hot = 0; hot < height * width; ++hot) {
    Matrix x = Matrix::Zero(height * width, 1);
    x(hot, 0) = 1.0;
    Tape t;
    Matrix y = conv(t, t.constant(x), height, width).value();
    const Index hh = hot / width, hw = hot % width;
    for (Index h = 0; h < height; ++h) {
      for (Index w = 0; w < width; ++w) {
        const double expect = (std::abs(h - hh) <= 1 && std::abs(w - hw) <= 1) ? 1.0 : 0.0;
        EXPECT_EQ(y(h * width + w, 0), expect);
      }
    }
  }
}

TEST(Conv2d, ChannelMismatch) {
  std::mt19937_64 rng(2);
  Conv2d conv("conv", 3, 2, rng);
  Tape t;
  EXPECT_THROW(conv(t, t.constant(Matrix::Zero(6, 2)), 2, 3), DimensionError);
  EXPECT_THROW(Conv2d("even", 1, 1, rng, 4, 1), DimensionError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  Conv2d conv("conv", 2, 3, rng);
  Parameter x("x", random_matrix(3 * 4, 2, rng));
  std::vector<Parameter *> params;
  conv.collect(params);
  params.push_back(&x);
  auto loss = [&](bool bw) {
    Tape t;
    Var l = ops::sum(ops::square(conv(t, t.param(x), 3, 4)));
    if (bw) t.backward(l);
    return l.scalar();
  };
  auto res = test::gradient_check(params, loss, 1e-5);
  EXPECT_EQ(res.passed, res.checked) << res.worst_name << " " << res.worst_relative;
}

TEST(Dropout, IdentityCases) {
  std::mt19937_64 rng(1);
  Tape t;
  Matrix x = random_matrix(3, 3, rng);
  EXPECT_EQ(ops::dropout(t.constant(x), 0.0, true, rng).value(), x);
  EXPECT_EQ(ops::dropout(t.constant(x), 0.7, false, rng).value(), x);
  EXPECT_THROW(ops::dropout(t.constant(x), 1.0, true, rng), std::invalid_argument);
  EXPECT_THROW(ops::dropout(t.constant(x), -0.1, true, rng), std::invalid_argument);
}

TEST(Dropout, EmpiricalZeroFraction) {
  std::mt19937_64 rng(17);
  for (double rate : {0.1, 0.3, 0.5}) {
    Tape t;
    Matrix y = ops::dropout(t.constant(Matrix::Ones(1, 100000)), rate, true, rng).value();
    const double zeros = static_cast<double>((y.array() == 0.0).count()) / 1e5;
    EXPECT_NEAR(zeros, rate, 0.01);
    const double survivor = y.maxCoeff();
    EXPECT_DOUBLE_EQ(survivor, 1.0 / (1.0 - rate));
  }
}

TEST(Schedule, CosineWarmRestarts) {
  const double lr0 = 1e-3;
  EXPECT_EQ(cosine_warm_restarts(lr0, 10, 2, 0.0), lr0);
  EXPECT_NEAR(cosine_warm_restarts(lr0, 10, 2, 5.0), lr0 / 2, 1e-18);
  // Restarts at 10, 30, 70.
  EXPECT_EQ(cosine_warm_restarts(lr0, 10, 2, 10.0), lr0);
  EXPECT_EQ(cosine_warm_restarts(lr0, 10, 2, 30.0), lr0);
  EXPECT_NEAR(cosine_warm_restarts(lr0, 10, 2, 20.0), lr0 / 2, 1e-18);
  EXPECT_NEAR(cosine_warm_restarts(lr0, 10, 2, 50.0), lr0 / 2, 1e-18);
  EXPECT_NEAR(cosine_warm_restarts(lr0, 10, 1, 17.5),
              lr0 * (1 + std::cos(std::numbers::pi * 0.75)) / 2, 1e-18);
  EXPECT_THROW(cosine_warm_restarts(0.0, 10, 2, 1.0), std::invalid_argument);
}

TEST(Adam, DescendsQuadraticLikeReferenceOptimizer) {
  // Reference trajectory from an independent Adam implementation
  // (PyTorch, float64) on f(w) = w^2, w0 = 1, lr = 0.1.
  const std::map<int, double> reference{{1, 0.9000000005},
                                        {5, 0.5079636592643418},
                                        {10, 0.07624915560691209},
                                        {11, 0.005131501948057088},
                                        {20, -0.2711540954901283},
                                        {50, -0.004818223222661105}};
  Parameter w("w", Matrix::Ones(1, 1));
  Adam opt;
  double prev = std::abs(w.value(0, 0));
  for (int step = 1; step <= 50; ++step) {
    w.zero_grad();
    Tape t;
    t.backward(ops::square(t.param(w)));
    opt.step({&w}, 0.1);
    const double now = std::abs(w.value(0, 0));
    // Momentum overshoots zero after step 11.
    if (step <= 11) EXPECT_LT(now, prev) << "step " << step;
    prev = now;
    if (auto it = reference.find(step); it != reference.end()) {
      EXPECT_NEAR(w.value(0, 0), it->second, 1e-12) << "step " << step;
    }
  }
  EXPECT_LT(std::abs(w.value(0, 0)), 0.01);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Parameter a("good", Matrix::Ones(1, 1));
  Parameter b("bad", Matrix::Ones(1, 1));
  b.grad(0, 0) = std::nan("");
  Adam opt;
  try {
    opt.step({&a, &b}, 0.1);
    FAIL();
  } catch (const TrainingError &e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }
  EXPECT_EQ(a.value(0, 0), 1.0);
}

TEST(Tape, BackwardVisitsSharedParentOnce) {
  Parameter w("w", row({3.0}));
  Tape t;
  Var x = t.param(w);
  Var y = ops::add(ops::mul(x, x), x);  // x^2 + x
  t.backward(y);
  EXPECT_DOUBLE_EQ(w.grad(0, 0), 7.0);
}

// Composite of every differentiable primitive; checked on 10 seeds.
TEST(Property, AllOpsMatchFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(100 + seed);
    Parameter a("a", random_matrix(4, 6, rng));
    Parameter b("b", random_matrix(6, 4, rng));
    Parameter r("r", random_matrix(1, 4, rng));
    Parameter c("c", random_matrix(4, 1, rng).array().abs() + 0.5);
    Matrix mask = Matrix::Ones(4, 4);
    mask(0, 1) = mask(2, 3) = mask(3, 0) = 0.0;
    Vector rows_on = Vector::Ones(4);
    rows_on(2) = 0.0;
    std::vector<Parameter *> params{&a, &b, &r, &c};
    auto loss = [&](bool bw) {
      Tape t;
      Var av = t.param(a), bv = t.param(b), rv = t.param(r), cv = t.param(c);
      Var m = ops::matmul(av, bv);
      Var s = ops::masked_softmax_rows(ops::leaky_relu(m, 0.2), mask);
      Var e = ops::elu(ops::add_row(ops::mul_row(m, rv), rv));
      Var g = ops::glu(ops::concat_cols({e, ops::tanh(m)}));
      Var n = ops::standardize_cols(ops::mul_col(g, cv), rows_on);
      Var ln = ops::standardize_rows(ops::concat_rows({n, ops::slice_rows(s, 1, 2)}));
      Var q = ops::div(ops::exp(ops::scale(ln, 0.3)), ops::add_scalar(ops::sigmoid(ln), 1.0));
      Var out = ops::add(ops::sum(ops::square(q)),
                         ops::mean(ops::log(ops::add_scalar(ops::relu(m), 1.0))));
      out = ops::add(out, ops::sum(ops::matmul(ops::transpose(ops::slice_cols(av, 1, 3)),
                                               ops::transpose(ops::sum_rows(s)))));
      if (bw) t.backward(out);
      return out.scalar();
    };
    auto res = test::gradient_check(params, loss, 1e-5);
    EXPECT_EQ(res.passed, res.checked)
        << "seed " << seed << " worst " << res.worst_name << " " << res.worst_relative;
  }
}

TEST(Property, SoftmaxRowsSumToOneAndFiniteOnLargeInputs) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix x(5, 7);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    Tape t;
    Var xv = t.constant(x);
    Matrix s = ops::softmax_rows(xv).value();
    for (Index r = 0; r < s.rows(); ++r) EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-12);
    for (const Var &y : {ops::elu(xv), ops::sigmoid(xv), ops::tanh(xv), ops::glu(ops::slice_cols(xv, 0, 6)),
                         ops::standardize_rows(xv), ops::leaky_relu(xv, 0.2)}) {
      EXPECT_TRUE(y.value().allFinite());
    }
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  std::mt19937_64 rng(33);
  Parameter a("layer.a", random_matrix(3, 5, rng, 1e6));
  Parameter b("layer.b", random_matrix(1, 7, rng, 1e-9));
  b.value(0, 3) = -0.0;
  Checkpoint ck;
  ck.meta["step"] = "12";
  append_parameters(ck, {&a, &b});
  const auto path = std::filesystem::temp_directory_path() / "safecast_ckpt_test.bin";
  save_checkpoint(path, ck);
  Parameter a2("layer.a", Matrix::Zero(3, 5));
  Parameter b2("layer.b", Matrix::Zero(1, 7));
  Checkpoint back = load_checkpoint(path);
  restore_parameters(back, {&a2, &b2});
  EXPECT_EQ(back.meta.at("step"), "12");
  EXPECT_EQ(std::memcmp(a.value.data(), a2.value.data(), sizeof(double) * 15), 0);
  EXPECT_EQ(std::memcmp(b.value.data(), b2.value.data(), sizeof(double) * 7), 0);
  Parameter wrong("layer.a", Matrix::Zero(5, 3));
  EXPECT_THROW(restore_parameters(back, {&wrong}), DimensionError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace safecast
