#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "parec/ops.hpp"
#include "parec/rng.hpp"
#include "parec/tape.hpp"

using namespace parec;
using Catch::Approx;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double sd = 1.0) {
  Matrix m(r, c);
  std::mt19937_64 rng(seed);
  fill_normal(m, rng, sd);
  return m;
}

}  // namespace

TEST_CASE("matmul forward basics") {
  Tape t(false);
  Matrix i2 = Matrix::Identity(2, 2);
  Matrix x = random_matrix(2, 3, 1);
  int a = t.push(i2), b = t.push(x);
  CHECK(t.val(matmul(t, a, b)).isApprox(x));

  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  Matrix v(2, 1);
  v << 1, 1;
  int c = matmul(t, t.push(m), t.push(v));
  CHECK(t.val(c)(0, 0) == 3.0);
  CHECK(t.val(c)(1, 0) == 7.0);

  CHECK_THROWS_AS(matmul(t, t.push(random_matrix(2, 3, 2)), t.push(random_matrix(2, 2, 3))),
                  std::invalid_argument);
}

TEST_CASE("matmul gradients match central differences") {
  for (auto [ta, tb] : {std::pair{false, false}, {false, true}, {true, false}}) {
    Matrix A = ta ? random_matrix(4, 3, 10) : random_matrix(3, 4, 10);
    Matrix B = tb ? random_matrix(2, 4, 11) : random_matrix(4, 2, 11);
    const Matrix W = random_matrix(3, 2, 12);

    Tape t(true);
    int a = t.push(A), b = t.push(B);
    int c = matmul(t, a, b, ta, tb);
    int w = t.push(W);
    // scalar = sum(W .* C) via elementwise trick: tr(W^T C)
    int prod = matmul(t, w, c, true, false);
    Matrix ones_l(1, 2), ones_r(2, 1);
    ones_l.setOnes();
    ones_r.setOnes();
    int s = matmul(t, matmul(t, t.push(ones_l), prod), t.push(ones_r));
    t.backward(s);

    auto f = [&](const Matrix& Av, const Matrix& Bv) {
      Matrix C = ta ? Matrix(Av.transpose() * Bv) : tb ? Matrix(Av * Bv.transpose()) : Matrix(Av * Bv);
      return C.cwiseProduct(W).sum();
    };
    const double eps = 1e-6;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < A.size(); ++i) {
      Matrix Ap = A, Am = A;
      Ap.data()[i] += eps;
      Am.data()[i] -= eps;
      double fd = (f(Ap, B) - f(Am, B)) / (2 * eps);
      worst = std::max(worst, std::abs(fd - t.grad(a).data()[i]) / std::max(1.0, std::abs(fd)));
    }
    for (Eigen::Index i = 0; i < B.size(); ++i) {
      Matrix Bp = B, Bm = B;
      Bp.data()[i] += eps;
      Bm.data()[i] -= eps;
      double fd = (f(A, Bp) - f(A, Bm)) / (2 * eps);
      worst = std::max(worst, std::abs(fd - t.grad(b).data()[i]) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("masked softmax rows") {
  SECTION("zero logits give uniform causal rows") {
    Matrix z = Matrix::Zero(4, 4);
    Matrix a = masked_softmax_rows_value(z, true);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j <= i; ++j) CHECK(a(i, j) == Approx(1.0 / (i + 1)).margin(1e-15));
      for (int j = i + 1; j < 4; ++j) CHECK(a(i, j) == 0.0);
    }
  }
  SECTION("hand row against direct evaluation") {
    Matrix l(1, 3);
    l << 10, 0, -10;
    Matrix a = masked_softmax_rows_value(l, false);
    const double z = std::exp(10.0) + 1.0 + std::exp(-10.0);
    CHECK(a(0, 0) == Approx(std::exp(10.0) / z).epsilon(1e-12));
    CHECK(a(0, 1) == Approx(1.0 / z).epsilon(1e-12));
    CHECK(a(0, 2) == Approx(std::exp(-10.0) / z).epsilon(1e-12));
    CHECK(a(0, 0) == Approx(0.99995).margin(1e-4));
    CHECK(a(0, 1) == Approx(4.54e-5).margin(1e-6));
    CHECK(a(0, 2) == Approx(2.06e-9).margin(1e-10));
  }
  SECTION("causal n=2 zeros") {
    Matrix a = masked_softmax_rows_value(Matrix::Zero(2, 2), true);
    CHECK(a(0, 0) == 1.0);
    CHECK(a(0, 1) == 0.0);
    CHECK(a(1, 0) == 0.5);
    CHECK(a(1, 1) == 0.5);
  }
  SECTION("rows are distributions over unmasked entries") {
    Matrix l = random_matrix(30, 30, 5, 3.0);
    Matrix a = masked_softmax_rows_value(l, true);
    for (int i = 0; i < 30; ++i) {
      CHECK(std::abs(a.row(i).head(i + 1).sum() - 1.0) <= 1e-12);
      for (int j = i + 1; j < 30; ++j) CHECK(a(i, j) == 0.0);
      for (int j = 0; j <= i; ++j) CHECK((a(i, j) >= 0.0 && a(i, j) <= 1.0));
    }
  }
  SECTION("mask-after-softmax order leaves deficient rows") {
    Matrix l = random_matrix(6, 6, 6);
    Matrix a = masked_softmax_rows_value(l, true, MaskOrder::mask_after_softmax);
    Matrix full = masked_softmax_rows_value(l, false);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j <= i; ++j) CHECK(a(i, j) == full(i, j));
      for (int j = i + 1; j < 6; ++j) CHECK(a(i, j) == 0.0);
      if (i < 5) CHECK(a.row(i).sum() < 1.0);
    }
  }
}

TEST_CASE("masked softmax gradients, both mask orders") {
  for (MaskOrder order : {MaskOrder::mask_logits, MaskOrder::mask_after_softmax}) {
    Matrix L = random_matrix(5, 5, 7);
    const Matrix W = random_matrix(5, 5, 8);
    Tape t(true);
    int lid = t.push(L);
    int a = masked_softmax_rows(t, lid, true, order);
    int prod = matmul(t, t.push(W), a, true, false);
    Matrix ones_l(1, 5), ones_r(5, 1);
    ones_l.setOnes();
    ones_r.setOnes();
    t.backward(matmul(t, matmul(t, t.push(ones_l), prod), t.push(ones_r)));

    auto f = [&](const Matrix& in) {
      return masked_softmax_rows_value(in, true, order).cwiseProduct(W).sum();
    };
    const double eps = 1e-6;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < L.size(); ++i) {
      Matrix p = L, m = L;
      p.data()[i] += eps;
      m.data()[i] -= eps;
      double fd = (f(p) - f(m)) / (2 * eps);
      worst = std::max(worst, std::abs(fd - t.grad(lid).data()[i]) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst < 1e-7);
  }
}

TEST_CASE("layer norm") {
  SECTION("constant row maps to beta") {
    Tape t(false);
    Matrix x = Matrix::Constant(1, 4, 3.5);
    Matrix gamma = Matrix::Ones(1, 4), beta = Matrix::Zero(1, 4);
    int y = layer_norm(t, t.push(x), t.push(gamma), t.push(beta));
    CHECK(t.val(y).cwiseAbs().maxCoeff() < 1e-3);  // 0 / sqrt(eps) exactly 0
    CHECK(t.val(y)(0, 0) == 0.0);
  }
  SECTION("unit-variance row is preserved") {
    Tape t(false);
    Matrix x(1, 2);
    x << 1, -1;
    int y = layer_norm(t, t.push(x), t.push(Matrix::Ones(1, 2)), t.push(Matrix::Zero(1, 2)));
    CHECK(t.val(y)(0, 0) == Approx(1.0).margin(1e-8));
    CHECK(t.val(y)(0, 1) == Approx(-1.0).margin(1e-8));
  }
  SECTION("gradient matches central differences") {
    Matrix X = random_matrix(4, 8, 20);
    Matrix G = random_matrix(1, 8, 21, 0.5);
    Matrix B = random_matrix(1, 8, 22, 0.5);
    const Matrix W = random_matrix(4, 8, 23);
    Tape t(true);
    int x = t.push(X), g = t.push(G), b = t.push(B);
    int y = layer_norm(t, x, g, b);
    int prod = matmul(t, t.push(W), y, true, false);
    Matrix ol(1, 8), orr(8, 1);
    ol.setOnes();
    orr.setOnes();
    t.backward(matmul(t, matmul(t, t.push(ol), prod), t.push(orr)));

    auto eval = [&](const Matrix& Xv, const Matrix& Gv, const Matrix& Bv) {
      Tape s(false);
      int yy = layer_norm(s, s.push(Xv), s.push(Gv), s.push(Bv));
      return s.val(yy).cwiseProduct(W).sum();
    };
    const double eps = 1e-6;
    double worst = 0.0;
    auto probe = [&](Matrix& target, int id, auto make) {
      for (Eigen::Index i = 0; i < target.size(); ++i) {
        Matrix p = target, m = target;
        p.data()[i] += eps;
        m.data()[i] -= eps;
        double fd = (make(p) - make(m)) / (2 * eps);
        worst = std::max(worst, std::abs(fd - t.grad(id).data()[i]) / std::max(1.0, std::abs(fd)));
      }
    };
    probe(X, x, [&](const Matrix& v) { return eval(v, G, B); });
    probe(G, g, [&](const Matrix& v) { return eval(X, v, B); });
    probe(B, b, [&](const Matrix& v) { return eval(X, G, v); });
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("relu, add, bias") {
  Tape t(true);
  Matrix x(1, 3);
  x << -1, 0, 2;
  int y = relu(t, t.push(x));
  CHECK(t.val(y)(0, 0) == 0.0);
  CHECK(t.val(y)(0, 1) == 0.0);
  CHECK(t.val(y)(0, 2) == 2.0);

  Matrix a = random_matrix(2, 3, 30), b = random_matrix(2, 3, 31);
  int sum = add(t, t.push(a), t.push(b));
  CHECK(t.val(sum).isApprox(a + b));

  Matrix bias = random_matrix(1, 3, 32);
  int biased = add_row_bias(t, t.push(a), t.push(bias));
  CHECK(t.val(biased)(1, 2) == a(1, 2) + bias(0, 2));
  CHECK_THROWS_AS(add_row_bias(t, t.push(a), t.push(random_matrix(1, 4, 33))),
                  std::invalid_argument);
}

TEST_CASE("dropout") {
  Matrix x = random_matrix(8, 8, 40);
  SECTION("rate zero and eval mode are the identity node") {
    Tape t(true);
    std::mt19937_64 rng(1);
    int id = t.push(x);
    CHECK(dropout(t, id, 0.0, rng, true) == id);
    CHECK(dropout(t, id, 0.7, rng, false) == id);
    CHECK_THROWS_AS(dropout(t, id, 1.0, rng, true), std::invalid_argument);
  }
  SECTION("same seed gives identical masks, survivors are rescaled") {
    auto run = [&](std::uint64_t seed) {
      Tape t(false);
      std::mt19937_64 rng(seed);
      return Matrix(t.val(dropout(t, t.push(x), 0.5, rng, true)));
    };
    Matrix a = run(7), b = run(7), c = run(8);
    CHECK(a == b);
    CHECK(a != c);
    int zeros = 0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      if (a.data()[i] == 0.0) ++zeros;
      else CHECK(a.data()[i] == Approx(2.0 * x.data()[i]));
    }
    CHECK(zeros > 0);
    CHECK(zeros < a.size());
  }
}

TEST_CASE("embedding lookup") {
  Matrix M = random_matrix(5, 3, 50);
  M.row(0).setZero();
  IntMat idx(2, 2);
  idx << 0, 2, 4, 0;
  Tape t(true);
  int mid = t.push(M);
  int out = embedding_lookup(t, mid, idx);
  CHECK(t.val(out).row(0).isZero());
  CHECK(t.val(out).row(1) == M.row(2));
  CHECK(t.val(out).row(2) == M.row(4));
  CHECK(t.val(out).row(3).isZero());

  // padding row: lookups ignore the stored row entirely
  Matrix M2 = M;
  M2.row(0).setConstant(123.0);
  Tape t2(false);
  CHECK(t2.val(embedding_lookup(t2, t2.push(M2), idx)).row(0).isZero());

  // scatter skips index 0
  Matrix ones_c(4, 3);
  ones_c.setOnes();
  int w = t.push(ones_c);
  int prod = matmul(t, w, out, true, false);
  Matrix ol(1, 3), orr(3, 1);
  ol.setOnes();
  orr.setOnes();
  t.backward(matmul(t, matmul(t, t.push(ol), prod), t.push(orr)));
  CHECK(t.grad(mid).row(0).isZero());
  CHECK(t.grad(mid).row(2).isApprox(ones_c.row(0)));
  CHECK(t.grad(mid).row(1).isZero());

  IntMat bad(1, 1);
  bad << 9;
  Tape t3(false);
  CHECK_THROWS_AS(embedding_lookup(t3, t3.push(M), bad), std::invalid_argument);
}

TEST_CASE("cross entropy") {
  SECTION("single item vocabulary has zero loss") {
    Matrix logits = random_matrix(2, 2, 60);  // cols: pad + 1 item
    IntMat targets(1, 2);
    targets << 1, 1;
    ByteMat valid(1, 2);
    valid << 1, 1;
    Tape t(false);
    CHECK(t.val(cross_entropy(t, t.push(logits), targets, valid))(0, 0) == 0.0);
  }
  SECTION("uniform logits over 3416 items") {
    Matrix logits = Matrix::Zero(1, 3417);
    IntMat targets(1, 1);
    targets << 17;
    ByteMat valid(1, 1);
    valid << 1;
    Tape t(false);
    double loss = t.val(cross_entropy(t, t.push(logits), targets, valid))(0, 0);
    CHECK(loss == Approx(std::log(3416.0)).epsilon(1e-12));
    CHECK(loss == Approx(8.136).margin(5e-4));
  }
  SECTION("two-item hand case") {
    Matrix logits(1, 3);
    logits << 0, 2, 0;  // pad, item1 = 2, item2 = 0
    IntMat targets(1, 1);
    targets << 1;
    ByteMat valid(1, 1);
    valid << 1;
    Tape t(false);
    double loss = t.val(cross_entropy(t, t.push(logits), targets, valid))(0, 0);
    CHECK(loss == Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 1.0))).epsilon(1e-12));
    CHECK(loss == Approx(0.1269).margin(1e-4));
  }
  SECTION("padding column is excluded from the denominator") {
    Matrix logits(1, 3);
    logits << 1000.0, 2, 0;  // a huge pad logit must not matter
    IntMat targets(1, 1);
    targets << 1;
    ByteMat valid(1, 1);
    valid << 1;
    Tape t(false);
    double loss = t.val(cross_entropy(t, t.push(logits), targets, valid))(0, 0);
    CHECK(loss == Approx(-std::log(std::exp(2.0) / (std::exp(2.0) + 1.0))).epsilon(1e-12));
  }
  SECTION("no valid position throws") {
    Matrix logits = Matrix::Zero(1, 3);
    IntMat targets(1, 1);
    targets << 1;
    ByteMat valid = ByteMat::Zero(1, 1);
    Tape t(false);
    CHECK_THROWS_AS(cross_entropy(t, t.push(logits), targets, valid), std::invalid_argument);
  }
  SECTION("gradient matches central differences") {
    Matrix L = random_matrix(4, 6, 61);
    IntMat targets(2, 2);
    targets << 2, 5, 1, 3;
    ByteMat valid(2, 2);
    valid << 1, 1, 0, 1;
    Tape t(true);
    int lid = t.push(L);
    t.backward(cross_entropy(t, lid, targets, valid));
    auto f = [&](const Matrix& v) {
      Tape s(false);
      return s.val(cross_entropy(s, s.push(v), targets, valid))(0, 0);
    };
    const double eps = 1e-6;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < L.size(); ++i) {
      Matrix p = L, m = L;
      p.data()[i] += eps;
      m.data()[i] -= eps;
      double fd = (f(p) - f(m)) / (2 * eps);
      worst = std::max(worst, std::abs(fd - t.grad(lid).data()[i]) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst < 1e-8);
    // masked row gets no gradient
    CHECK(t.grad(lid).row(2).isZero());
  }
}

TEST_CASE("attention apply matches dense product oracle") {
  const int n = 5, d = 3, batch = 2;
  Matrix logits = random_matrix(n, n, 70);
  Matrix A = masked_softmax_rows_value(logits, true);
  Matrix V = random_matrix(batch * n, d, 71);

  Tape t(true);
  int aid = t.push(A), vid = t.push(V);
  int y = attention_apply(t, aid, vid, batch);
  for (int b = 0; b < batch; ++b) {
    Matrix expect = A * V.middleRows(b * n, n);
    CHECK(t.val(y).middleRows(b * n, n).isApprox(expect, 1e-12));
  }

  // uniform attention averages the prefix
  Matrix U = masked_softmax_rows_value(Matrix::Zero(n, n), true);
  Tape t2(false);
  int y2 = attention_apply(t2, t2.push(U), t2.push(V), batch);
  for (int i = 0; i < n; ++i) {
    Matrix mean = V.topRows(i + 1).colwise().mean();
    CHECK(t2.val(y2).row(i).isApprox(mean.row(0), 1e-12));
  }

  // gradients
  const Matrix W = random_matrix(batch * n, d, 72);
  int prod = matmul(t, t.push(W), y, true, false);
  Matrix ol(1, d), orr(d, 1);
  ol.setOnes();
  orr.setOnes();
  t.backward(matmul(t, matmul(t, t.push(ol), prod), t.push(orr)));
  auto f = [&](const Matrix& Av, const Matrix& Vv) {
    Tape s(false);
    int yy = attention_apply(s, s.push(Av), s.push(Vv), batch);
    return s.val(yy).cwiseProduct(W).sum();
  };
  const double eps = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < A.size(); ++i) {
    Matrix p = A, m = A;
    p.data()[i] += eps;
    m.data()[i] -= eps;
    double fd = (f(p, V) - f(m, V)) / (2 * eps);
    const Eigen::Index row = i / n, col = i % n;
    if (col > row) continue;  // masked coordinates never influence the output
    worst = std::max(worst, std::abs(fd - t.grad(aid).data()[i]) / std::max(1.0, std::abs(fd)));
  }
  for (Eigen::Index i = 0; i < V.size(); ++i) {
    Matrix p = V, m = V;
    p.data()[i] += eps;
    m.data()[i] -= eps;
    double fd = (f(A, p) - f(A, m)) / (2 * eps);
    worst = std::max(worst, std::abs(fd - t.grad(vid).data()[i]) / std::max(1.0, std::abs(fd)));
  }
  CHECK(worst < 1e-7);
}

TEST_CASE("multihead causal attention matches a per-head oracle") {
  const int n = 4, d = 6, heads = 3, batch = 2;
  Matrix Q = random_matrix(batch * n, d, 80);
  Matrix K = random_matrix(batch * n, d, 81);
  Matrix V = random_matrix(batch * n, d, 82);

  Tape t(true);
  int q = t.push(Q), k = t.push(K), v = t.push(V);
  std::vector<Matrix> attns;
  int y = multihead_causal_attention(t, q, k, v, batch, heads, &attns);
  REQUIRE(attns.size() == static_cast<std::size_t>(batch * heads));

  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      Matrix Qh = Q.block(b * n, h * hd, n, hd);
      Matrix Kh = K.block(b * n, h * hd, n, hd);
      Matrix Vh = V.block(b * n, h * hd, n, hd);
      Matrix A = masked_softmax_rows_value(Matrix(Qh * Kh.transpose() * scale), true);
      CHECK(attns[static_cast<std::size_t>(b * heads + h)].isApprox(A, 1e-12));
      CHECK(t.val(y).block(b * n, h * hd, n, hd).isApprox(Matrix(A * Vh), 1e-12));
    }
  }

  const Matrix W = random_matrix(batch * n, d, 83);
  int prod = matmul(t, t.push(W), y, true, false);
  Matrix ol(1, d), orr(d, 1);
  ol.setOnes();
  orr.setOnes();
  t.backward(matmul(t, matmul(t, t.push(ol), prod), t.push(orr)));
  auto f = [&](const Matrix& Qv, const Matrix& Kv, const Matrix& Vv) {
    Tape s(false);
    int yy = multihead_causal_attention(s, s.push(Qv), s.push(Kv), s.push(Vv), batch, heads);
    return s.val(yy).cwiseProduct(W).sum();
  };
  const double eps = 1e-6;
  double worst = 0.0;
  auto probe = [&](const Matrix& base, int id, auto make) {
    for (Eigen::Index i = 0; i < base.size(); ++i) {
      Matrix p = base, m = base;
      p.data()[i] += eps;
      m.data()[i] -= eps;
      double fd = (make(p) - make(m)) / (2 * eps);
      worst = std::max(worst, std::abs(fd - t.grad(id).data()[i]) / std::max(1.0, std::abs(fd)));
    }
  };
  probe(Q, q, [&](const Matrix& x) { return f(x, K, V); });
  probe(K, k, [&](const Matrix& x) { return f(Q, x, V); });
  probe(V, v, [&](const Matrix& x) { return f(Q, K, x); });
  CHECK(worst < 1e-7);

  CHECK_THROWS_AS(multihead_causal_attention(t, q, k, v, batch, 4), std::invalid_argument);
}

TEST_CASE("tape can only be walked once") {
  Tape t(true);
  Matrix x = random_matrix(1, 1, 90);
  int s = relu(t, t.push(x));
  t.backward(s);
  CHECK_THROWS_AS(t.backward(s), std::invalid_argument);

  Tape idle(false);
  int y = relu(idle, idle.push(x));
  CHECK_THROWS_AS(idle.backward(y), std::invalid_argument);
}
