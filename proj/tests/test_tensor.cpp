#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "fpcd/autodiff.hpp"
#include "fpcd/tensor.hpp"
#include "fpcd/tensor_io.hpp"
#include "testutil.hpp"

using namespace fpcd;
using autodiff::Tape;
using autodiff::Var;
using test::fd_check;
using test::random_tensor;

TEST(Tensor, ShapeBasics) {
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6);
  EXPECT_EQ(t.ndim(), 2);
  EXPECT_THROW(Tensor({2, 0}), DimError);
  EXPECT_THROW(Tensor({2, -1}), DimError);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimError);
  EXPECT_EQ(Tensor::scalar(4.0)[0], 4.0);
  EXPECT_EQ(Tensor::full({3}, 2.5)[2], 2.5);
  EXPECT_EQ(dims_str({2, 3}), "[2,3]");
}

TEST(Tensor, FiniteCheck) {
  Tensor t({2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(t.all_finite());
}

TEST(TensorIo, RoundTrip) {
  auto dir = std::filesystem::temp_directory_path() / "fpcd_io_test";
  std::filesystem::create_directories(dir);
  auto eng = make_engine(7);
  Tensor t = random_tensor({3, 4, 2}, eng);
  std::string path = (dir / "t.fpcd").string();
  io::save_tensor(path, t);
  Tensor u = io::load_tensor(path);
  ASSERT_TRUE(t.same_shape(u));
  for (int64_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], u[i]);
  EXPECT_THROW(io::load_tensor((dir / "missing.fpcd").string()), IoError);
  std::ofstream bad((dir / "bad.fpcd").string(), std::ios::binary);
  bad << "NOPE";
  bad.close();
  EXPECT_THROW(io::load_tensor((dir / "bad.fpcd").string()), IoError);
}

TEST(Tape, ElementwiseValues) {
  Tape tape;
  Var a = tape.leaf(Tensor({3}, {1.0, -2.0, 3.0}), true);
  Var b = tape.leaf(Tensor({3}, {0.5, 4.0, -1.0}), true);
  EXPECT_EQ(tape.add(a, b)->value[1], 2.0);
  EXPECT_EQ(tape.sub(a, b)->value[0], 0.5);
  EXPECT_EQ(tape.mul(a, b)->value[2], -3.0);
  EXPECT_EQ(tape.scale(a, 2.0)->value[1], -4.0);
  EXPECT_EQ(tape.add_scalar(a, 1.0)->value[1], -1.0);
  Var r = tape.relu(a);
  EXPECT_EQ(r->value[0], 1.0);
  EXPECT_EQ(r->value[1], 0.0);
  EXPECT_EQ(tape.sum_all(a)->value[0], 2.0);
  EXPECT_NEAR(tape.mean_all(a)->value[0], 2.0 / 3.0, 1e-15);
  EXPECT_THROW(tape.add(a, tape.leaf(Tensor({2}), false)), DimError);
}

TEST(Tape, NonFiniteAborts) {
  Tape tape;
  Var a = tape.leaf(Tensor({1}, {-1.0}), true);
  EXPECT_THROW(tape.log(a), NumericError);
  tape.check_finite = false;
  EXPECT_NO_THROW(tape.log(a));
}

TEST(Tape, Conv2dMatchesBruteForce) {
  auto eng = make_engine(11);
  for (int trial = 0; trial < 5; ++trial) {
    const int64_t n = 2, h = 5, w = 6, ci = 3, kh = 3, kw = 3, co = 4;
    const int64_t stride = 1 + trial % 2, pad = trial % 2;
    Tensor x = random_tensor({n, h, w, ci}, eng);
    Tensor k = random_tensor({kh, kw, ci, co}, eng);
    Tape tape;
    Var y = tape.conv2d(tape.constant(x), tape.constant(k), stride, pad);
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (w + 2 * pad - kw) / stride + 1;
    ASSERT_EQ(y->value.dims(), (Dims{n, ho, wo, co}));
    for (int64_t b = 0; b < n; ++b)
      for (int64_t yo = 0; yo < ho; ++yo)
        for (int64_t xo = 0; xo < wo; ++xo)
          for (int64_t o = 0; o < co; ++o) {
            double acc = 0.0;
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx)
                for (int64_t c = 0; c < ci; ++c) {
                  int64_t iy = yo * stride + ky - pad, ix = xo * stride + kx - pad;
                  if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                  acc += x[((b * h + iy) * w + ix) * ci + c] * k[((ky * kw + kx) * ci + c) * co + o];
                }
            EXPECT_NEAR(y->value[((b * ho + yo) * wo + xo) * co + o], acc, 1e-12);
          }
  }
}

TEST(Tape, GradChecksCoreOps) {
  auto eng = make_engine(23);
  int trials = 0;
  for (int t = 0; t < 20; ++t) {
    // composite graph exercising conv, pool, linear, softmax, reductions
    std::vector<Tensor> params = {
        random_tensor({2, 4, 4, 2}, eng),  // input
        random_tensor({3, 3, 2, 3}, eng, -0.5, 0.5),
        random_tensor({3, 4}, eng, -0.5, 0.5),
        random_tensor({4}, eng, -0.5, 0.5),
    };
    auto build = [](Tape& tape, std::vector<Var>& lv) {
      Var h1 = tape.relu(tape.conv2d(lv[0], lv[1], 1, 1));
      Var h2 = tape.avgpool2d(h1, 2, 2);
      Var pooled = tape.spatial_mean(h2);
      Var logits = tape.linear(pooled, lv[2], lv[3]);
      Var lsm = tape.log_softmax(logits);
      return tape.add(tape.cross_entropy(logits, {1, 3}), tape.mean_all(lsm));
    };
    if (!test::margins_ok(params, build)) continue;
    auto rep = fd_check(params, build);
    EXPECT_TRUE(rep.ok) << "max err " << rep.max_abs_err << " analytic " << rep.worst_analytic
                        << " fd " << rep.worst_fd;
    ++trials;
  }
  EXPECT_GE(trials, 15);
}

TEST(Tape, GradChecksNormalizationOps) {
  auto eng = make_engine(31);
  for (int t = 0; t < 20; ++t) {
    std::vector<Tensor> params = {random_tensor({2, 2, 1, 3}, eng, 0.2, 1.5)};
    auto build = [&](Tape& tape, std::vector<Var>& lv) {
      Var p = tape.l1_normalize(lv[0]);
      Var q = tape.log_softmax_axis0(lv[0]);
      Var m = tape.mean_axis0(tape.mul(p, q));
      return tape.sum_all(m);
    };
    auto rep = fd_check(params, build);
    EXPECT_TRUE(rep.ok) << "max err " << rep.max_abs_err;
  }
}

TEST(Tape, BackwardLinearity) {
  auto eng = make_engine(47);
  Tensor x0 = random_tensor({5}, eng);
  auto grad_of = [&](double a, double b) {
    Tape tape;
    Var x = tape.leaf(x0, true);
    Var f = tape.sum_all(tape.mul(x, x));
    Var g = tape.weighted_sum(x, Tensor({5}, {1, 2, 3, 4, 5}));
    Var loss = tape.add(tape.scale(f, a), tape.scale(g, b));
    tape.backward(loss);
    return x->grad;
  };
  auto ga = grad_of(1.0, 0.0);
  auto gb = grad_of(0.0, 1.0);
  auto gc = grad_of(2.0, -3.0);
  for (size_t i = 0; i < 5; ++i) EXPECT_NEAR(gc[i], 2.0 * ga[i] - 3.0 * gb[i], 1e-12);
}

TEST(Tape, RepeatedBackwardAccumulatesIntoLeaves) {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {3.0, 4.0}), true);
  Var loss = tape.sum_all(tape.mul(x, x));
  tape.backward(loss);
  std::vector<double> once = x->grad;
  tape.backward(loss);
  for (size_t i = 0; i < 2; ++i) EXPECT_NEAR(x->grad[i], 2.0 * once[i], 1e-12);
}

TEST(Tape, BackwardContract) {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {1.0, 2.0}), true);
  EXPECT_THROW(tape.backward(x), ContractError);  // non-scalar
  Var c = tape.constant(Tensor::scalar(1.0));
  EXPECT_THROW(tape.backward(c), ContractError);  // no grad
  EXPECT_THROW(tape.cross_entropy(tape.reshape(x, {1, 2}), {5}), IndexError);
}

TEST(Sgd, MomentumUpdate) {
  Tensor p({2}, {1.0, 2.0});
  Tensor v({2}, {0.5, 0.0});
  autodiff::sgd_step(p, {1.0, -1.0}, v, 0.1, 0.9);
  // v = 0.9*v + g; p -= lr*v
  EXPECT_NEAR(v[0], 1.45, 1e-12);
  EXPECT_NEAR(v[1], -1.0, 1e-12);
  EXPECT_NEAR(p[0], 1.0 - 0.145, 1e-12);
  EXPECT_NEAR(p[1], 2.0 + 0.1, 1e-12);
  EXPECT_THROW(autodiff::sgd_step(p, {1.0, 1.0}, v, 0.0, 0.9), ContractError);
  EXPECT_THROW(autodiff::sgd_step(p, {1.0}, v, 0.1, 0.9), DimError);
}
