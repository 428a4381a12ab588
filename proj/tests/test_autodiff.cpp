#include "mpc/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"

using namespace mpc;

namespace {

Matrix row(std::initializer_list<double> vals) {
  Matrix m(1, static_cast<Eigen::Index>(vals.size()));
  Eigen::Index c = 0;
  for (const double v : vals) m(0, c++) = v;
  return m;
}

MaskMatrix ones_mask(Eigen::Index rows, Eigen::Index cols) {
  return MaskMatrix::Constant(rows, cols, 1);
}

}  // namespace

TEST_CASE("masked softmax: symmetric input splits evenly, masked stay zero") {
  Tape t;
  Var x = t.input(row({0.0, 0.0}));
  Var p = masked_softmax(x, ones_mask(1, 2));
  CHECK(p.value()(0, 0) == doctest::Approx(0.5));
  CHECK(p.value()(0, 1) == doctest::Approx(0.5));

  Var y = t.input(row({3.0, -1.0, 2.0}));
  MaskMatrix m(1, 3);
  m << 1, 0, 1;
  Var q = masked_softmax(y, m);
  CHECK(q.value()(0, 1) == 0.0);  // exactly zero, not just small
  CHECK(q.value()(0, 0) + q.value()(0, 2) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("masked softmax: rows sum to one across random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 6));
    Matrix x(1, n);
    MaskMatrix m(1, n);
    int active = 0;
    for (int c = 0; c < n; ++c) {
      x(0, c) = rng.normal(0.0, 3.0);
      m(0, c) = rng.bernoulli(0.6) ? 1 : 0;
      active += m(0, c);
    }
    if (active == 0) m(0, 0) = 1;
    Tape t;
    Var p = masked_softmax(t.input(x), m);
    double s = 0.0;
    for (int c = 0; c < n; ++c) {
      if (m(0, c))
        s += p.value()(0, c);
      else
        CHECK(p.value()(0, c) == 0.0);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("masked softmax rejects an all-masked row") {
  Tape t;
  Var x = t.input(row({1.0, 2.0}));
  MaskMatrix m(1, 2);
  m << 0, 0;
  CHECK_THROWS_AS(masked_softmax(x, m), std::invalid_argument);
}

TEST_CASE("gelu is zero at zero and odd-symmetric enough at the origin") {
  Tape t;
  Var x = t.input(row({0.0}));
  CHECK(gelu(x).value()(0, 0) == 0.0);
}

TEST_CASE("layer_norm of a constant row is zero pre-affine") {
  Tape t;
  Var x = t.input(row({4.2, 4.2, 4.2, 4.2}));
  Var g = t.input(Matrix::Ones(1, 4));
  Var b = t.input(Matrix::Zero(1, 4));
  Var y = layer_norm(x, g, b);
  for (int c = 0; c < 4; ++c) CHECK(y.value()(0, c) == doctest::Approx(0.0));
}

TEST_CASE("backward: sum yields ones, dot product yields the other operand") {
  Tape t;
  Var x = t.input(row({1.0, -2.0, 3.0}), true);
  Var loss = sum(x);
  t.backward(loss);
  for (int c = 0; c < 3; ++c) CHECK(x.grad()(0, c) == 1.0);

  Tape t2;
  Var a = t2.input(row({1.0, 2.0, 3.0}), true);
  Var b = t2.input(row({4.0, 5.0, 6.0}), true);
  Var dot = matmul_nt(a, b);  // (1,3)x(1,3)^T -> (1,1)
  t2.backward(dot);
  for (int c = 0; c < 3; ++c) {
    CHECK(a.grad()(0, c) == b.value()(0, c));
    CHECK(b.grad()(0, c) == a.value()(0, c));
  }
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tape t;
  Var x = t.input(row({1.0, 2.0}), true);
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("gradient of a tensor off the loss path is exactly zero") {
  Tape t;
  Var x = t.input(row({1.0, 2.0}), true);
  Var unused = t.input(row({5.0, 6.0}), true);
  Var loss = sum(mul(x, x));
  t.backward(loss);
  CHECK(unused.grad()(0, 0) == 0.0);
  CHECK(unused.grad()(0, 1) == 0.0);
}

TEST_CASE("shape mismatches are rejected") {
  Tape t;
  Var a = t.input(Matrix::Zero(2, 3));
  Var b = t.input(Matrix::Zero(2, 4));
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
}

TEST_CASE("finite differences: x^2 at 3 has derivative 6") {
  Matrix point(1, 1);
  point(0, 0) = 3.0;
  const double err = finite_diff_check(
      [](Tape&, Var x) { return mul(x, x); }, point);
  CHECK(err < 1e-6);

  Tape t;
  Var x = t.input(point, true);
  t.backward(mul(x, x));
  CHECK(x.grad()(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("finite differences: random two-layer MLP gradients match") {
  Rng rng(1234);
  const int din = 4, dh = 5;
  Param w1("w1", din, dh), b1("b1", 1, dh), w2("w2", dh, 1), b2("b2", 1, 1);
  Matrix x(3, din);
  for (Param* p : {&w1, &b1, &w2, &b2})
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c)
        p->value(r, c) = rng.normal(0.0, 0.5);
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = rng.normal(0.0, 1.0);

  Param* params[] = {&w1, &b1, &w2, &b2};
  const auto build = [&](Tape& t) {
    Var h = gelu(add_row_broadcast(matmul(t.input(x), t.param(w1)), t.param(b1)));
    Var out = add_row_broadcast(matmul(h, t.param(w2)), t.param(b2));
    return mean(mul(out, out));
  };
  const FiniteDiffReport rep = finite_diff_check(params, build, 1e-4);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("fused ops match by-hand values") {
  // softmax cross-entropy: uniform logits over V classes -> log V
  Tape t;
  Var logits = t.input(Matrix::Zero(2, 4), true);
  Var l = softmax_xent_mean(logits, {1, 3});
  CHECK(l.scalar() == doctest::Approx(std::log(4.0)));

  // bce from logit 0 -> log 2 for either label
  Tape t2;
  Var z = t2.input(Matrix::Zero(2, 1), true);
  Var bl = sigmoid_bce_mean(z, {1.0, 0.0});
  CHECK(bl.scalar() == doctest::Approx(std::log(2.0)));

  // nll over picked probabilities
  Tape t3;
  Matrix probs(1, 3);
  probs << 0.5, 0.25, 0.25;
  Var nll = nll_picks(t3.input(probs, true), {{0, 0}, {0, 2}});
  CHECK(nll.scalar() == doctest::Approx(-(std::log(0.5) + std::log(0.25))));
}

TEST_CASE("fused op gradients pass finite differences") {
  Rng rng(77);
  Param logits("logits", 3, 5);
  for (Eigen::Index r = 0; r < 3; ++r)
    for (Eigen::Index c = 0; c < 5; ++c) logits.value(r, c) = rng.normal(0, 1);
  Param* ps[] = {&logits};
  const std::vector<int> gold = {0, 4, 2};
  FiniteDiffReport rep = finite_diff_check(
      ps, [&](Tape& t) { return softmax_xent_mean(t.param(logits), gold); });
  CHECK(rep.max_rel_error < 1e-4);

  Param z("z", 4, 1);
  for (Eigen::Index r = 0; r < 4; ++r) z.value(r, 0) = rng.normal(0, 1);
  Param* ps2[] = {&z};
  const std::vector<double> labels = {1.0, 0.0, 1.0, 1.0};
  rep = finite_diff_check(
      ps2, [&](Tape& t) { return sigmoid_bce_mean(t.param(z), labels); });
  CHECK(rep.max_rel_error < 1e-4);

  // nll through a softmax
  Param s("s", 2, 4);
  for (Eigen::Index r = 0; r < 2; ++r)
    for (Eigen::Index c = 0; c < 4; ++c) s.value(r, c) = rng.normal(0, 1);
  Param* ps3[] = {&s};
  MaskMatrix m(2, 4);
  m << 1, 1, 1, 0, 1, 1, 1, 1;
  rep = finite_diff_check(ps3, [&](Tape& t) {
    Var p = masked_softmax(t.param(s), m);
    return nll_picks(p, {{0, 1}, {1, 3}});
  });
  CHECK(rep.max_rel_error < 1e-4);

  // layer_norm + gelu + slice/concat/gather composite
  Param xp("x", 3, 6), gp("g", 1, 6), bp("b", 1, 6);
  for (Eigen::Index r = 0; r < 3; ++r)
    for (Eigen::Index c = 0; c < 6; ++c) xp.value(r, c) = rng.normal(0, 1);
  gp.value.setOnes();
  for (Eigen::Index c = 0; c < 6; ++c) bp.value(0, c) = rng.normal(0, 0.3);
  Param* ps4[] = {&xp, &gp, &bp};
  rep = finite_diff_check(ps4, [&](Tape& t) {
    Var x = t.param(xp);
    Var y = layer_norm(gelu(x), t.param(gp), t.param(bp));
    Var left = slice_cols(y, 0, 3);
    Var right = slice_cols(y, 3, 3);
    Var cat = concat_cols(left, relu(right));
    Var picked = gather_rows(cat, {2, 0, 2});
    return mean(mul(picked, picked));
  });
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("forward is bit-identical for identical inputs and seeds") {
  const auto run = []() {
    Rng rng(99);
    Matrix x(4, 8);
    for (Eigen::Index r = 0; r < 4; ++r)
      for (Eigen::Index c = 0; c < 8; ++c) x(r, c) = rng.normal(0, 1);
    Tape t;
    Rng drop_rng(5);
    Var v = dropout(gelu(t.input(x)), 0.5, drop_rng, true);
    return Matrix(v.value());
  };
  const Matrix a = run();
  const Matrix b = run();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(),
                    sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

TEST_CASE("dropout: train-only and inverted scaling") {
  Tape t;
  Matrix x = Matrix::Ones(1, 1000);
  Rng rng(3);
  Var kept = dropout(t.input(x), 0.25, rng, /*train=*/false);
  CHECK(kept.value() == x);

  Rng rng2(3);
  Var dropped = dropout(t.input(x), 0.25, rng2, /*train=*/true);
  int zeros = 0;
  for (int c = 0; c < 1000; ++c) {
    const double v = dropped.value()(0, c);
    if (v == 0.0)
      ++zeros;
    else
      CHECK(v == doctest::Approx(1.0 / 0.75));
  }
  CHECK(zeros > 180);
  CHECK(zeros < 320);
}
