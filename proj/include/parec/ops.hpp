#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "parec/matrix.hpp"
#include "parec/tape.hpp"

namespace parec {

/// How the causal mask interacts with the row softmax. `mask_logits` (the
/// default everywhere) sets masked logits to -inf so each row is a proper
/// distribution over the allowed positions. `mask_after_softmax` normalizes
/// over all positions first and zeroes masked entries afterwards, leaving
/// rows that sum to less than one; kept selectable for ablation.
enum class MaskOrder { mask_logits, mask_after_softmax };

namespace detail {

/// Row softmax restricted to columns [0, limit); remaining columns get 0.
inline void softmax_row_prefix(Matrix& m, Eigen::Index row, Eigen::Index limit) {
  auto seg = m.row(row).head(limit);
  double mx = seg.maxCoeff();
  seg = (seg.array() - mx).exp();
  seg /= seg.sum();
  if (limit < m.cols()) m.row(row).tail(m.cols() - limit).setZero();
}

}  // namespace detail

/// Plain (non-tape) masked row softmax; shared by the tape op, the fixed
/// inference path and the visualization pipeline.
inline Matrix masked_softmax_rows_value(const Matrix& logits, bool causal,
                                        MaskOrder order = MaskOrder::mask_logits) {
  if (causal) require(logits.rows() == logits.cols(), "masked_softmax: causal input must be square");
  Matrix out = logits;
  const Eigen::Index n = out.rows();
  if (order == MaskOrder::mask_logits) {
    for (Eigen::Index i = 0; i < n; ++i)
      detail::softmax_row_prefix(out, i, causal ? i + 1 : out.cols());
  } else {
    for (Eigen::Index i = 0; i < n; ++i) detail::softmax_row_prefix(out, i, out.cols());
    if (causal)
      for (Eigen::Index i = 0; i < n; ++i)
        if (i + 1 < out.cols()) out.row(i).tail(out.cols() - i - 1).setZero();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitive tape ops. Each returns the id of its output value.
// ---------------------------------------------------------------------------

/// C = op(A) * op(B) with optional transposes (A^T * B^T unused, unsupported).
inline int matmul(Tape& t, int a, int b, bool trans_a = false, bool trans_b = false) {
  require(!(trans_a && trans_b), "matmul: double transpose not supported");
  const Matrix& A = t.val(a);
  const Matrix& B = t.val(b);
  const Eigen::Index ar = trans_a ? A.cols() : A.rows();
  const Eigen::Index ac = trans_a ? A.rows() : A.cols();
  const Eigen::Index br = trans_b ? B.cols() : B.rows();
  const Eigen::Index bc = trans_b ? B.rows() : B.cols();
  require(ac == br, "matmul: inner dimension mismatch");
  Matrix C(ar, bc);
  if (trans_a)
    C.noalias() = A.transpose() * B;
  else if (trans_b)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A * B;
  int out = t.push(std::move(C));
  t.record([&t, a, b, out, trans_a, trans_b] {
    const Matrix& dC = t.grad(out);
    const Matrix& Av = t.val(a);
    const Matrix& Bv = t.val(b);
    if (!trans_a && !trans_b) {
      t.grad(a).noalias() += dC * Bv.transpose();
      t.grad(b).noalias() += Av.transpose() * dC;
    } else if (trans_b) {  // C = A * B^T
      t.grad(a).noalias() += dC * Bv;
      t.grad(b).noalias() += dC.transpose() * Av;
    } else {  // C = A^T * B
      t.grad(a).noalias() += Bv * dC.transpose();
      t.grad(b).noalias() += Av * dC;
    }
  });
  return out;
}

inline int add(Tape& t, int a, int b) {
  const Matrix& A = t.val(a);
  const Matrix& B = t.val(b);
  require_shape(B, A.rows(), A.cols(), "add");
  int out = t.push(A + B);
  t.record([&t, a, b, out] {
    t.grad(a) += t.grad(out);
    t.grad(b) += t.grad(out);
  });
  return out;
}

/// Y = X + 1*b where b is a 1xD row bias.
inline int add_row_bias(Tape& t, int x, int bias) {
  const Matrix& X = t.val(x);
  const Matrix& b = t.val(bias);
  require(b.rows() == 1 && b.cols() == X.cols(), "add_row_bias: bias must be 1 x cols(x)");
  Matrix Y = X;
  Y.rowwise() += b.row(0);
  int out = t.push(std::move(Y));
  t.record([&t, x, bias, out] {
    t.grad(x) += t.grad(out);
    t.grad(bias) += t.grad(out).colwise().sum();
  });
  return out;
}

inline int scale(Tape& t, int x, double s) {
  int out = t.push(t.val(x) * s);
  t.record([&t, x, out, s] { t.grad(x) += s * t.grad(out); });
  return out;
}

inline int relu(Tape& t, int x) {
  int out = t.push(t.val(x).cwiseMax(0.0));
  t.record([&t, x, out] {
    t.grad(x).array() += (t.val(x).array() > 0.0).cast<double>() * t.grad(out).array();
  });
  return out;
}

/// Row-wise layer normalization: (x - mean) / sqrt(var + eps) * gamma + beta.
inline int layer_norm(Tape& t, int x, int gamma, int beta, double eps = 1e-8) {
  const Matrix& X = t.val(x);
  const Matrix& G = t.val(gamma);
  const Matrix& B = t.val(beta);
  require(G.rows() == 1 && G.cols() == X.cols(), "layer_norm: gamma must be 1 x cols(x)");
  require(B.rows() == 1 && B.cols() == X.cols(), "layer_norm: beta must be 1 x cols(x)");
  const Eigen::Index rows = X.rows(), cols = X.cols();
  auto xhat = std::make_shared<Matrix>(rows, cols);
  auto inv_std = std::make_shared<Matrix>(rows, 1);
  Matrix Y(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double mean = X.row(i).mean();
    double var = (X.row(i).array() - mean).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(i, 0) = is;
    xhat->row(i) = (X.row(i).array() - mean) * is;
    Y.row(i) = xhat->row(i).cwiseProduct(G.row(0)) + B.row(0);
  }
  int out = t.push(std::move(Y));
  t.record([&t, x, gamma, beta, out, xhat, inv_std] {
    const Matrix& dY = t.grad(out);
    const Matrix& G = t.val(gamma);
    Matrix& dX = t.grad(x);
    t.grad(beta) += dY.colwise().sum();
    t.grad(gamma) += dY.cwiseProduct(*xhat).colwise().sum();
    const double inv_cols = 1.0 / static_cast<double>(dY.cols());
    for (Eigen::Index i = 0; i < dY.rows(); ++i) {
      Eigen::RowVectorXd dxh = dY.row(i).cwiseProduct(G.row(0));
      double m1 = dxh.sum() * inv_cols;
      double m2 = dxh.cwiseProduct(xhat->row(i)).sum() * inv_cols;
      dX.row(i) += (((dxh.array() - m1) - xhat->row(i).array() * m2) * (*inv_std)(i, 0)).matrix();
    }
  });
  return out;
}

/// Row softmax with optional causal mask; see MaskOrder for the two orders.
inline int masked_softmax_rows(Tape& t, int logits, bool causal,
                               MaskOrder order = MaskOrder::mask_logits) {
  Matrix A = masked_softmax_rows_value(t.val(logits), causal, order);
  // mask_after_softmax needs the unmasked softmax for its backward pass.
  std::shared_ptr<Matrix> full;
  if (order == MaskOrder::mask_after_softmax)
    full = std::make_shared<Matrix>(masked_softmax_rows_value(t.val(logits), false));
  int out = t.push(std::move(A));
  t.record([&t, logits, out, causal, order, full] {
    const Matrix& Y = t.val(out);
    const Matrix& dY = t.grad(out);
    Matrix& dX = t.grad(logits);
    const Eigen::Index n = Y.rows();
    if (order == MaskOrder::mask_logits) {
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index limit = causal ? i + 1 : Y.cols();
        auto y = Y.row(i).head(limit);
        auto dy = dY.row(i).head(limit);
        double s = y.cwiseProduct(dy).sum();
        dX.row(i).head(limit).array() += y.array() * (dy.array() - s);
      }
    } else {
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index limit = causal ? i + 1 : Y.cols();
        auto y = full->row(i);
        Eigen::RowVectorXd dy = Eigen::RowVectorXd::Zero(Y.cols());
        dy.head(limit) = dY.row(i).head(limit);
        double s = y.cwiseProduct(dy).sum();
        dX.row(i).array() += y.array() * (dy.array() - s);
      }
    }
  });
  return out;
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Identity (same node) when not training or rate == 0.
inline int dropout(Tape& t, int x, double rate, std::mt19937_64& rng, bool training) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const Matrix& X = t.val(x);
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<Matrix>(X.rows(), X.cols());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      (*mask)(i, j) = u(rng) < rate ? 0.0 : keep_scale;
  int out = t.push(X.cwiseProduct(*mask));
  t.record([&t, x, out, mask] { t.grad(x) += t.grad(out).cwiseProduct(*mask); });
  return out;
}

/// Rows of `table` gathered by a BxN index matrix, flattened to (B*N) x d.
/// Index 0 is the padding item: the lookup is a hard zero row and the
/// backward scatter skips it, so the padding embedding never trains.
inline int embedding_lookup(Tape& t, int table, const IntMat& idx) {
  const Matrix& M = t.val(table);
  const Eigen::Index rows = idx.rows() * idx.cols();
  Matrix out_m = Matrix::Zero(rows, M.cols());
  const auto* flat = idx.data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const std::int32_t v = flat[r];
    require(v >= 0 && v < M.rows(), "embedding_lookup: index out of range");
    if (v != 0) out_m.row(r) = M.row(v);
  }
  int out = t.push(std::move(out_m));
  t.record([&t, table, out, idx] {
    const Matrix& dY = t.grad(out);
    Matrix& dM = t.grad(table);
    const auto* flat = idx.data();
    for (Eigen::Index r = 0; r < dY.rows(); ++r)
      if (flat[r] != 0) dM.row(flat[r]) += dY.row(r);
  });
  return out;
}

/// X + P tiled over the batch: row (b*n + t) gets P row t.
inline int add_positional(Tape& t, int x, int pos, int batch) {
  const Matrix& X = t.val(x);
  const Matrix& P = t.val(pos);
  const Eigen::Index n = P.rows();
  require(X.rows() == batch * n && X.cols() == P.cols(), "add_positional: shape mismatch");
  Matrix Y = X;
  for (Eigen::Index b = 0; b < batch; ++b) Y.middleRows(b * n, n) += P;
  int out = t.push(std::move(Y));
  t.record([&t, x, pos, out, batch, n] {
    const Matrix& dY = t.grad(out);
    t.grad(x) += dY;
    Matrix& dP = t.grad(pos);
    for (Eigen::Index b = 0; b < batch; ++b) dP += dY.middleRows(b * n, n);
  });
  return out;
}

namespace detail {

/// Y_b = A * V_b for each n x d block of V; rows accumulate over columns
/// j <= t only, which makes position-level causality exact at the bit level.
inline void apply_attention_blocks(const Matrix& A, const Matrix& V, int batch, Matrix& Y) {
  const Eigen::Index n = A.rows();
  for (Eigen::Index b = 0; b < batch; ++b) {
    auto Vb = V.middleRows(b * n, n);
    auto Yb = Y.middleRows(b * n, n);
    for (Eigen::Index t = 0; t < n; ++t)
      Yb.row(t).noalias() = A.row(t).head(t + 1) * Vb.topRows(t + 1);
  }
}

}  // namespace detail

/// Shared causal attention matrix applied per batch block.
inline int attention_apply(Tape& t, int attn, int v, int batch) {
  const Matrix& A = t.val(attn);
  const Matrix& V = t.val(v);
  require(A.rows() == A.cols(), "attention_apply: attention matrix must be square");
  require(V.rows() == batch * A.rows(), "attention_apply: value rows must be batch * n");
  Matrix Y(V.rows(), V.cols());
  detail::apply_attention_blocks(A, V, batch, Y);
  int out = t.push(std::move(Y));
  t.record([&t, attn, v, out, batch] {
    const Matrix& A = t.val(attn);
    const Matrix& V = t.val(v);
    const Matrix& dY = t.grad(out);
    Matrix& dA = t.grad(attn);
    Matrix& dV = t.grad(v);
    const Eigen::Index n = A.rows();
    for (Eigen::Index b = 0; b < batch; ++b) {
      auto Vb = V.middleRows(b * n, n);
      auto dYb = dY.middleRows(b * n, n);
      dA.noalias() += dYb * Vb.transpose();
      dV.middleRows(b * n, n).noalias() += A.transpose() * dYb;
    }
  });
  return out;
}

/// Same application with a constant (non-learnable) attention matrix.
inline int attention_apply_const(Tape& t, const Matrix& attn, int v, int batch) {
  auto A = std::make_shared<Matrix>(attn);
  const Matrix& V = t.val(v);
  require(A->rows() == A->cols(), "attention_apply_const: attention matrix must be square");
  require(V.rows() == batch * A->rows(), "attention_apply_const: value rows must be batch * n");
  Matrix Y(V.rows(), V.cols());
  detail::apply_attention_blocks(*A, V, batch, Y);
  int out = t.push(std::move(Y));
  t.record([&t, A, v, out, batch] {
    const Matrix& dY = t.grad(out);
    Matrix& dV = t.grad(v);
    const Eigen::Index n = A->rows();
    for (Eigen::Index b = 0; b < batch; ++b)
      dV.middleRows(b * n, n).noalias() += A->transpose() * dY.middleRows(b * n, n);
  });
  return out;
}

/// Scaled dot-product causal self-attention over per-batch blocks, split
/// into `num_heads` column groups. Per head h and batch b:
///   A = softmax_causal(Q_bh K_bh^T / sqrt(d/h)),  Y_bh = A V_bh.
/// Cached attention matrices are exposed through `attention_out` (B*h of
/// them, batch-major) for inspection.
inline int multihead_causal_attention(Tape& t, int q, int k, int v, int batch, int num_heads,
                                      std::vector<Matrix>* attention_out = nullptr) {
  const Matrix& Q = t.val(q);
  const Matrix& K = t.val(k);
  const Matrix& V = t.val(v);
  const Eigen::Index d = Q.cols();
  require(num_heads >= 1 && d % num_heads == 0, "multihead: num_heads must divide d");
  require(Q.rows() == K.rows() && Q.rows() == V.rows() && K.cols() == d && V.cols() == d,
          "multihead: Q/K/V shape mismatch");
  require(batch > 0 && Q.rows() % batch == 0, "multihead: rows must be batch * n");
  const Eigen::Index n = Q.rows() / batch;
  const Eigen::Index hd = d / num_heads;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  auto attns = std::make_shared<std::vector<Matrix>>();
  attns->reserve(static_cast<std::size_t>(batch) * num_heads);
  Matrix Y(Q.rows(), d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int h = 0; h < num_heads; ++h) {
      auto Qbh = Q.block(b * n, h * hd, n, hd);
      auto Kbh = K.block(b * n, h * hd, n, hd);
      auto Vbh = V.block(b * n, h * hd, n, hd);
      Matrix L(n, n);
      L.noalias() = Qbh * Kbh.transpose();
      L *= inv_sqrt_hd;
      for (Eigen::Index i = 0; i < n; ++i) detail::softmax_row_prefix(L, i, i + 1);
      auto Ybh = Y.block(b * n, h * hd, n, hd);
      for (Eigen::Index i = 0; i < n; ++i)
        Ybh.row(i).noalias() = L.row(i).head(i + 1) * Vbh.topRows(i + 1);
      attns->push_back(std::move(L));
    }
  }
  if (attention_out) *attention_out = *attns;
  int out = t.push(std::move(Y));
  t.record([&t, q, k, v, out, batch, n, hd, num_heads, inv_sqrt_hd, attns] {
    const Matrix& Q = t.val(q);
    const Matrix& K = t.val(k);
    const Matrix& V = t.val(v);
    const Matrix& dY = t.grad(out);
    Matrix& dQ = t.grad(q);
    Matrix& dK = t.grad(k);
    Matrix& dV = t.grad(v);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (int h = 0; h < num_heads; ++h) {
        const Matrix& A = (*attns)[static_cast<std::size_t>(b) * num_heads + h];
        auto Qbh = Q.block(b * n, h * hd, n, hd);
        auto Kbh = K.block(b * n, h * hd, n, hd);
        auto Vbh = V.block(b * n, h * hd, n, hd);
        auto dYbh = dY.block(b * n, h * hd, n, hd);
        dV.block(b * n, h * hd, n, hd).noalias() += A.transpose() * dYbh;
        Matrix dA(n, n);
        dA.noalias() = dYbh * Vbh.transpose();
        Matrix dL = Matrix::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          auto a = A.row(i).head(i + 1);
          auto da = dA.row(i).head(i + 1);
          double s = a.cwiseProduct(da).sum();
          dL.row(i).head(i + 1).array() = a.array() * (da.array() - s);
        }
        dQ.block(b * n, h * hd, n, hd).noalias() += inv_sqrt_hd * (dL * Kbh);
        dK.block(b * n, h * hd, n, hd).noalias() += inv_sqrt_hd * (dL.transpose() * Qbh);
      }
    }
  });
  return out;
}

/// Mean over valid positions of -log softmax(logits)[target], with the
/// softmax taken over item columns 1..V (column 0, the padding item, is
/// excluded from the denominator and can never be predicted).
inline int cross_entropy(Tape& t, int logits, const IntMat& targets, const ByteMat& valid) {
  const Matrix& L = t.val(logits);
  require(targets.rows() == valid.rows() && targets.cols() == valid.cols(),
          "cross_entropy: targets/valid shape mismatch");
  require(L.rows() == targets.rows() * targets.cols(), "cross_entropy: logits rows mismatch");
  const Eigen::Index items = L.cols() - 1;
  require(items >= 1, "cross_entropy: need at least one item column");
  auto lse = std::make_shared<Eigen::VectorXd>(L.rows());
  const auto* tgt = targets.data();
  const auto* ok = valid.data();
  long count = 0;
  double total = 0.0;
  for (Eigen::Index r = 0; r < L.rows(); ++r) {
    if (!ok[r]) continue;
    const std::int32_t target = tgt[r];
    require(target >= 1 && target <= items, "cross_entropy: target out of range");
    auto seg = L.row(r).segment(1, items);
    double mx = seg.maxCoeff();
    double z = mx + std::log((seg.array() - mx).exp().sum());
    (*lse)(r) = z;
    total += z - L(r, target);
    ++count;
  }
  require(count > 0, "cross_entropy: no valid position in batch");
  Matrix loss(1, 1);
  loss(0, 0) = total / static_cast<double>(count);
  int out = t.push(std::move(loss));
  t.record([&t, logits, out, targets, valid, lse, count] {
    const Matrix& L = t.val(logits);
    Matrix& dL = t.grad(logits);
    const double g = t.grad(out)(0, 0) / static_cast<double>(count);
    const Eigen::Index items = L.cols() - 1;
    const auto* tgt = targets.data();
    const auto* ok = valid.data();
    for (Eigen::Index r = 0; r < L.rows(); ++r) {
      if (!ok[r]) continue;
      dL.row(r).segment(1, items).array() +=
          (L.row(r).segment(1, items).array() - (*lse)(r)).exp() * g;
      dL(r, tgt[r]) -= g;
    }
  });
  return out;
}

}  // namespace parec
