#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "ccs/ad.hpp"
#include "ccs/rng.hpp"
#include "gradcheck.hpp"

using namespace ccs::ad;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, ccs::Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Keep entries away from |x| < margin so kinked ops (relu, clamp, min) are
// locally smooth at the finite-difference evaluation points.
Matrix away_from(Matrix m, double threshold, double margin) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (std::abs(m(i, j) - threshold) < margin)
        m(i, j) = threshold + (m(i, j) >= threshold ? margin : -margin);
  return m;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("elementwise binary ops") {
  ccs::Rng rng(11);
  Var a = param(random_matrix(3, 4, rng));
  Var b = param(random_matrix(3, 4, rng));
  auto check = [&](const std::function<Var()>& f) {
    auto rep = gradcheck::run({a, b}, f);
    CHECK(rep.max_rel_err < kTol);
  };
  check([&] { return sum(add(a, b)); });
  check([&] { return sum(sub(a, b)); });
  check([&] { return sum(cmul(a, b)); });
  check([&] { return mean(square(sub(a, b))); });
}

TEST_CASE("matmul") {
  ccs::Rng rng(12);
  Var a = param(random_matrix(3, 5, rng));
  Var b = param(random_matrix(5, 2, rng));
  auto rep = gradcheck::run({a, b}, [&] { return sum(square(matmul(a, b))); });
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("row broadcast ops") {
  ccs::Rng rng(13);
  Var a = param(random_matrix(4, 3, rng));
  Var b = param(random_matrix(1, 3, rng));
  auto rep1 = gradcheck::run({a, b}, [&] { return sum(square(add_rowvec(a, b))); });
  CHECK(rep1.max_rel_err < kTol);
  auto rep2 = gradcheck::run({a, b}, [&] { return sum(square(mul_rowvec(a, b))); });
  CHECK(rep2.max_rel_err < kTol);
}

TEST_CASE("scalar ops") {
  ccs::Rng rng(14);
  Var a = param(random_matrix(2, 3, rng));
  auto rep = gradcheck::run({a}, [&] { return sum(square(add_scalar(scale(neg(a), 1.7), 0.3))); });
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("smooth nonlinearities") {
  ccs::Rng rng(15);
  Var a = param(random_matrix(3, 3, rng, -2.0, 2.0));
  for (auto f : {&tanh_, &sigmoid, &softplus, &exp_, &square}) {
    auto rep = gradcheck::run({a}, [&] { return sum((*f)(a)); });
    CHECK(rep.max_rel_err < kTol);
  }
  CHECK(softplus(constant_scalar(0.0)).scalar() == doctest::Approx(std::log(2.0)));
  // softplus stays finite and exact in the tails
  CHECK(softplus(constant_scalar(50.0)).scalar() == doctest::Approx(50.0));
  CHECK(softplus(constant_scalar(-50.0)).scalar() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("log on positive inputs") {
  ccs::Rng rng(16);
  Var a = param(random_matrix(3, 3, rng, 0.5, 2.0));
  auto rep = gradcheck::run({a}, [&] { return sum(square(log_(a))); });
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("kinked ops away from their kinks") {
  ccs::Rng rng(17);
  Var a = param(away_from(random_matrix(4, 4, rng), 0.0, 1e-3));
  auto rep = gradcheck::run({a}, [&] { return sum(square(relu(a))); });
  CHECK(rep.max_rel_err < kTol);

  Matrix c = random_matrix(4, 4, rng, -2.0, 2.0);
  c = away_from(away_from(c, -0.5, 1e-3), 0.5, 1e-3);
  Var cv = param(c);
  auto rep2 = gradcheck::run({cv}, [&] { return sum(square(clamp_(cv, -0.5, 0.5))); });
  CHECK(rep2.max_rel_err < kTol);

  Var x = param(random_matrix(3, 3, rng, -1.0, -0.1));
  Var y = param(random_matrix(3, 3, rng, 0.1, 1.0));
  auto rep3 = gradcheck::run({x, y}, [&] { return sum(square(min_elt(x, y))); });
  CHECK(rep3.max_rel_err < kTol);
  CHECK(min_elt(x, y).value().isApprox(x.value()));
}

TEST_CASE("reductions") {
  ccs::Rng rng(18);
  Var a = param(random_matrix(3, 5, rng));
  auto rep1 = gradcheck::run({a}, [&] { return square(mean(a)); });
  CHECK(rep1.max_rel_err < kTol);
  auto rep2 = gradcheck::run({a}, [&] { return sum(square(rowsum(a))); });
  CHECK(rep2.max_rel_err < kTol);
  CHECK(rowsum(a).rows() == 3);
  CHECK(rowsum(a).cols() == 1);
  CHECK(mean(a).scalar() == doctest::Approx(a.value().mean()));
}

TEST_CASE("row softmax and log-softmax") {
  ccs::Rng rng(19);
  Var a = param(random_matrix(4, 5, rng, -3.0, 3.0));
  Var w = constant(random_matrix(4, 5, rng));  // random projection to scalar
  auto rep1 = gradcheck::run({a}, [&] { return sum(cmul(row_softmax(a), w)); });
  CHECK(rep1.max_rel_err < kTol);
  auto rep2 = gradcheck::run({a}, [&] { return sum(cmul(row_log_softmax(a), w)); });
  CHECK(rep2.max_rel_err < kTol);

  // Forward oracle on one row.
  Matrix one(1, 3);
  one << 1.0, 2.0, 3.0;
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  Var p = row_softmax(constant(one));
  for (int j = 0; j < 3; ++j)
    CHECK(p.value()(0, j) == doctest::Approx(std::exp(1.0 + j) / z));
  Var lp = row_log_softmax(constant(one));
  for (int j = 0; j < 3; ++j)
    CHECK(lp.value()(0, j) == doctest::Approx(1.0 + j - std::log(z)));
  CHECK(p.value().row(0).sum() == doctest::Approx(1.0));
}

TEST_CASE("layer norm rows") {
  ccs::Rng rng(20);
  Var a = param(random_matrix(4, 6, rng, -2.0, 2.0));
  Var w = constant(random_matrix(4, 6, rng));
  auto rep = gradcheck::run({a}, [&] { return sum(cmul(layer_norm_rows(a), w)); });
  CHECK(rep.max_rel_err < 1e-5);

  Matrix two(1, 2);
  two << 1.0, 3.0;
  Var y = layer_norm_rows(constant(two));
  CHECK(y.value()(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.value()(0, 1) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("l2 normalize rows") {
  ccs::Rng rng(21);
  Var a = param(random_matrix(3, 4, rng, 0.5, 2.0));
  Var w = constant(random_matrix(3, 4, rng));
  auto rep = gradcheck::run({a}, [&] { return sum(cmul(l2_normalize_rows(a), w)); });
  CHECK(rep.max_rel_err < kTol);

  Matrix v(1, 2);
  v << 3.0, 4.0;
  Var y = l2_normalize_rows(constant(v));
  CHECK(y.value()(0, 0) == doctest::Approx(0.6));
  CHECK(y.value()(0, 1) == doctest::Approx(0.8));
}

TEST_CASE("concat and slice") {
  ccs::Rng rng(22);
  Var a = param(random_matrix(3, 2, rng));
  Var b = param(random_matrix(3, 3, rng));
  Var c = param(random_matrix(3, 1, rng));
  auto rep = gradcheck::run({a, b, c}, [&] {
    Var cat = concat_cols({a, b, c});
    return sum(square(slice_cols(cat, 1, 4)));
  });
  CHECK(rep.max_rel_err < kTol);
  CHECK(concat_cols({a, b, c}).cols() == 6);
}

TEST_CASE("grouped row mean (pooling)") {
  ccs::Rng rng(23);
  Var a = param(random_matrix(6, 3, rng));  // 2 groups of 3 rows
  auto rep = gradcheck::run({a}, [&] { return sum(square(mean_rows_grouped(a, 3))); });
  CHECK(rep.max_rel_err < kTol);
  Var pooled = mean_rows_grouped(a, 3);
  CHECK(pooled.rows() == 2);
  CHECK(pooled.value().row(0).isApprox(a.value().topRows(3).colwise().mean()));
}

TEST_CASE("gather rows with zero padding") {
  ccs::Rng rng(24);
  Var a = param(random_matrix(4, 3, rng));
  auto idx = std::make_shared<const std::vector<Eigen::Index>>(
      std::vector<Eigen::Index>{2, -1, 0, 2, 1, -1});
  auto rep = gradcheck::run({a}, [&] { return sum(square(gather_rows(a, idx))); });
  CHECK(rep.max_rel_err < kTol);
  Var g = gather_rows(a, idx);
  CHECK(g.rows() == 6);
  CHECK(g.value().row(1).norm() == 0.0);
  CHECK(g.value().row(5).norm() == 0.0);
  CHECK(g.value().row(0).isApprox(a.value().row(2)));
}

TEST_CASE("tile rows") {
  ccs::Rng rng(25);
  Var a = param(random_matrix(2, 3, rng));
  auto rep = gradcheck::run({a}, [&] { return sum(square(tile_rows(a, 3))); });
  CHECK(rep.max_rel_err < kTol);
  CHECK(tile_rows(a, 3).rows() == 6);
}

TEST_CASE("stop_grad blocks the gradient") {
  Var x = param(Matrix::Constant(1, 1, 2.0));
  Var loss = sum(cmul(stop_grad(x), x));  // d/dx [c*x] = c = 2
  backward(loss);
  CHECK(x.grad()(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("graph reuse and fan-out") {
  ccs::Rng rng(26);
  Var x = param(random_matrix(2, 2, rng));
  // Diamond: y = x + x, loss = sum(y*y) -> dL/dx = 8x.
  Var y = add(x, x);
  Var loss = sum(cmul(y, y));
  backward(loss);
  CHECK(x.grad().isApprox(8.0 * x.value(), 1e-12));
  // Same leaf through a fresh graph again: grads are re-zeroed, not doubled.
  Var loss2 = sum(cmul(add(x, x), add(x, x)));
  backward(loss2);
  CHECK(x.grad().isApprox(8.0 * x.value(), 1e-12));
}

TEST_CASE("multihead attention forward matches a naive reference") {
  ccs::Rng rng(27);
  const int B = 2, L = 3, H = 2, D = 4, hd = D / H;
  Matrix Q = random_matrix(B * L, D, rng);
  Matrix K = random_matrix(B * L, D, rng);
  Matrix V = random_matrix(B * L, D, rng);
  Var out = multihead_attention(constant(Q), constant(K), constant(V), B, L, H);

  Matrix ref = Matrix::Zero(B * L, D);
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < L; ++i) {
        // scores s_j = q_i . k_j / sqrt(hd); softmax; weighted sum of v_j
        std::vector<double> s(L);
        double mx = -1e300;
        for (int j = 0; j < L; ++j) {
          double dot = 0;
          for (int c = 0; c < hd; ++c)
            dot += Q(b * L + i, h * hd + c) * K(b * L + j, h * hd + c);
          s[j] = dot / std::sqrt(double(hd));
          mx = std::max(mx, s[j]);
        }
        double zsum = 0;
        for (int j = 0; j < L; ++j) {
          s[j] = std::exp(s[j] - mx);
          zsum += s[j];
        }
        for (int j = 0; j < L; ++j)
          for (int c = 0; c < hd; ++c)
            ref(b * L + i, h * hd + c) += (s[j] / zsum) * V(b * L + j, h * hd + c);
      }
    }
  }
  CHECK(out.value().isApprox(ref, 1e-12));
}

TEST_CASE("multihead attention gradients") {
  ccs::Rng rng(28);
  const int B = 2, L = 3, H = 2, D = 4;
  Var q = param(random_matrix(B * L, D, rng));
  Var k = param(random_matrix(B * L, D, rng));
  Var v = param(random_matrix(B * L, D, rng));
  Var w = constant(random_matrix(B * L, D, rng));
  auto rep = gradcheck::run(
      {q, k, v}, [&] { return sum(cmul(multihead_attention(q, k, v, B, L, H), w)); });
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("requires_grad propagation skips constant-only branches") {
  Var a = constant(Matrix::Constant(2, 2, 1.5));
  Var b = constant(Matrix::Constant(2, 2, 0.5));
  Var s = sum(cmul(a, b));
  CHECK_FALSE(s.requires_grad());
  backward(s);  // must not crash on a gradient-free graph

  Var p = param(Matrix::Constant(2, 2, 1.0));
  CHECK(sum(add(p, a)).requires_grad());
}

TEST_CASE("freeze guard keeps critic params out of actor updates") {
  Var wp = param(Matrix::Constant(1, 1, 3.0));
  ParamList critic{{"w", wp}};
  Var x = param(Matrix::Constant(1, 1, 2.0));
  {
    FreezeGuard guard(critic);
    Var loss = sum(cmul(wp, x));
    backward(loss);
    CHECK(x.grad()(0, 0) == doctest::Approx(3.0));
    CHECK_FALSE(wp.node()->grad_live);
  }
  CHECK(wp.requires_grad());
  Var loss = sum(cmul(wp, x));
  backward(loss);
  CHECK(wp.grad()(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("adam first step magnitude") {
  // With a constant gradient g, the bias-corrected first step is
  // lr * g / (|g| + eps) = lr * sign(g) (up to eps).
  Var w = param(Matrix::Constant(1, 1, 1.0));
  ParamList params{{"w", w}};
  Adam opt(1e-2);
  Var loss = scale(sum(w), 5.0);  // dL/dw = 5
  backward(loss);
  opt.step(params);
  CHECK(w.value()(0, 0) == doctest::Approx(1.0 - 1e-2).epsilon(1e-6));
}

TEST_CASE("adam skips params with no live gradient") {
  Var w = param(Matrix::Constant(1, 1, 1.0));
  Var u = param(Matrix::Constant(1, 1, 1.0));
  ParamList params{{"w", w}, {"u", u}};
  Adam opt(1e-2);
  Var loss = sum(square(w));
  backward(loss);
  opt.step(params);
  CHECK(w.value()(0, 0) < 1.0);
  CHECK(u.value()(0, 0) == 1.0);
}

TEST_CASE("polyak averaging") {
  Var on = param(Matrix::Constant(1, 1, 1.0));
  Var tg = param(Matrix::Constant(1, 1, 0.0));
  ParamList online{{"w", on}};
  ParamList target{{"w", tg}};
  polyak_params(online, target, 0.75);
  CHECK(tg.value()(0, 0) == doctest::Approx(0.75));
  polyak_params(online, target, 0.75);
  CHECK(tg.value()(0, 0) == doctest::Approx(0.9375));
}

TEST_CASE("param bookkeeping") {
  ccs::Rng rng(29);
  Var a = param(random_matrix(3, 4, rng));
  Var b = param(random_matrix(2, 2, rng));
  ParamList src{{"a", a}, {"b", b}};
  CHECK(param_count(src) == 16);

  Var a2 = param(Matrix::Zero(3, 4));
  Var b2 = param(Matrix::Zero(2, 2));
  ParamList dst{{"a", a2}, {"b", b2}};
  CHECK(params_hash(src) != params_hash(dst));
  copy_params(src, dst);
  CHECK(params_hash(src) == params_hash(dst));
  a2.value()(0, 0) += 1e-12;
  CHECK(params_hash(src) != params_hash(dst));
}

TEST_CASE("deep chain through mixed ops") {
  ccs::Rng rng(30);
  Var x = param(random_matrix(4, 4, rng, -1.5, 1.5));
  Var w1 = param(random_matrix(4, 8, rng, -0.5, 0.5));
  Var b1 = param(random_matrix(1, 8, rng, -0.1, 0.1));
  Var w2 = param(random_matrix(8, 1, rng, -0.5, 0.5));
  auto rep = gradcheck::run({x, w1, b1, w2}, [&] {
    Var h = tanh_(add_rowvec(matmul(x, w1), b1));
    Var o = matmul(h, w2);
    return mean(square(o));
  });
  CHECK(rep.max_rel_err < kTol);
}
