#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "parec/dataset.hpp"
#include "parec/matrix.hpp"
#include "parec/ops.hpp"
#include "parec/rng.hpp"
#include "parec/tape.hpp"

namespace parec {

enum class AttentionKind { positional, factorized, dot_product, fixed };
enum class FixedPattern { average, linear, exponential };

/// Which attention mechanism the blocks use.
struct AttentionSpec {
  AttentionKind kind = AttentionKind::factorized;
  int k = 20;                                    // factorization rank (factorized only)
  FixedPattern pattern = FixedPattern::average;  // fixed only
  int num_heads = 1;                             // dot_product only
};

struct Dims {
  int d = 64;         // hidden width
  int n = 50;         // maximum sequence length
  int blocks = 2;     // attention blocks
  int num_items = 0;  // |V|
};

inline void validate_spec(const AttentionSpec& spec, const Dims& dims) {
  require(dims.d >= 1 && dims.n >= 1 && dims.blocks >= 1 && dims.num_items >= 1,
          "dims must be positive");
  if (spec.kind == AttentionKind::factorized)
    require(spec.k >= 1 && spec.k <= dims.n, "factorized rank k must be in [1, n]");
  if (spec.kind == AttentionKind::dot_product)
    require(spec.num_heads >= 1 && dims.d % spec.num_heads == 0, "num_heads must divide d");
}

/// Learnable tensors of one attention block. Only the tensors the variant
/// uses are allocated; the rest stay empty.
struct BlockParams {
  Matrix R;        // positional: n x n
  Matrix R1, R2;   // factorized: n x k
  Matrix Wq, Wk;   // dot_product: d x d
  Matrix Wv;       // d x d
  Matrix W1, W2;   // ffn: d x d
  Matrix b1, b2;   // 1 x d
  Matrix ln_attn_gamma, ln_attn_beta;  // 1 x d
  Matrix ln_ffn_gamma, ln_ffn_beta;    // 1 x d
};

/// All learnable tensors of one model. Also reused as the container for
/// gradients and Adam moments, which are shape-congruent by construction.
struct ModelParams {
  AttentionSpec spec;
  Dims dims;
  Matrix M;  // (|V|+1) x d item embeddings; row 0 is the frozen padding row
  Matrix P;  // n x d positional embeddings (dot_product only)
  std::vector<BlockParams> blocks;
  Matrix ln_out_gamma, ln_out_beta;  // 1 x d
};

struct NamedTensor {
  std::string name;
  Matrix* tensor;
};

/// Every allocated tensor in a fixed, checkpoint-stable order.
inline std::vector<NamedTensor> tensor_refs(ModelParams& p) {
  std::vector<NamedTensor> out;
  auto put = [&out](std::string name, Matrix& m) {
    if (m.size() > 0) out.push_back({std::move(name), &m});
  };
  put("M", p.M);
  put("P", p.P);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "block" + std::to_string(l) + ".";
    put(pre + "R", b.R);
    put(pre + "R1", b.R1);
    put(pre + "R2", b.R2);
    put(pre + "Wq", b.Wq);
    put(pre + "Wk", b.Wk);
    put(pre + "Wv", b.Wv);
    put(pre + "W1", b.W1);
    put(pre + "b1", b.b1);
    put(pre + "W2", b.W2);
    put(pre + "b2", b.b2);
    put(pre + "ln_attn.gamma", b.ln_attn_gamma);
    put(pre + "ln_attn.beta", b.ln_attn_beta);
    put(pre + "ln_ffn.gamma", b.ln_ffn_gamma);
    put(pre + "ln_ffn.beta", b.ln_ffn_beta);
  }
  put("ln_out.gamma", p.ln_out_gamma);
  put("ln_out.beta", p.ln_out_beta);
  return out;
}

inline std::vector<NamedTensor> tensor_refs(const ModelParams& p) {
  return tensor_refs(const_cast<ModelParams&>(p));
}

/// Same structure as `like` with every tensor zeroed.
inline ModelParams zeros_like(const ModelParams& like) {
  ModelParams z = like;
  for (auto& t : tensor_refs(z)) t.tensor->setZero();
  return z;
}

/// Allocates the full tensor structure for a variant: zeros everywhere,
/// layer-norm gammas one. Checkpoint loading fills this in.
inline ModelParams alloc_params(const AttentionSpec& spec, const Dims& dims) {
  validate_spec(spec, dims);
  ModelParams p;
  p.spec = spec;
  p.dims = dims;
  const int d = dims.d, n = dims.n;
  p.M = Matrix::Zero(dims.num_items + 1, d);
  if (spec.kind == AttentionKind::dot_product) p.P = Matrix::Zero(n, d);
  p.blocks.resize(static_cast<std::size_t>(dims.blocks));
  for (auto& b : p.blocks) {
    switch (spec.kind) {
      case AttentionKind::positional:
        b.R = Matrix::Zero(n, n);
        break;
      case AttentionKind::factorized:
        b.R1 = Matrix::Zero(n, spec.k);
        b.R2 = Matrix::Zero(n, spec.k);
        break;
      case AttentionKind::dot_product:
        b.Wq = Matrix::Zero(d, d);
        b.Wk = Matrix::Zero(d, d);
        break;
      case AttentionKind::fixed:
        break;
    }
    b.Wv = Matrix::Zero(d, d);
    b.W1 = Matrix::Zero(d, d);
    b.W2 = Matrix::Zero(d, d);
    b.b1 = Matrix::Zero(1, d);
    b.b2 = Matrix::Zero(1, d);
    b.ln_attn_gamma = Matrix::Ones(1, d);
    b.ln_attn_beta = Matrix::Zero(1, d);
    b.ln_ffn_gamma = Matrix::Ones(1, d);
    b.ln_ffn_beta = Matrix::Zero(1, d);
  }
  p.ln_out_gamma = Matrix::Ones(1, d);
  p.ln_out_beta = Matrix::Zero(1, d);
  return p;
}

/// Weights start at truncated normal(0, 0.02); R starts at zero so every
/// variant opens with uniform causal attention; R1/R2 and P are plain
/// normal(0, 0.02); gammas one, biases and betas zero.
inline ModelParams init_params(const AttentionSpec& spec, const Dims& dims, std::uint64_t seed) {
  ModelParams p = alloc_params(spec, dims);
  std::mt19937_64 rng(seed);
  const double sd = 0.02;
  fill_truncated_normal(p.M, rng, sd);
  p.M.row(0).setZero();
  if (p.P.size() > 0) fill_normal(p.P, rng, sd);
  for (auto& b : p.blocks) {
    switch (p.spec.kind) {
      case AttentionKind::positional:
        break;  // R stays zero: uniform causal attention at step 0
      case AttentionKind::factorized:
        fill_normal(b.R1, rng, sd);
        fill_normal(b.R2, rng, sd);
        break;
      case AttentionKind::dot_product:
        fill_truncated_normal(b.Wq, rng, sd);
        fill_truncated_normal(b.Wk, rng, sd);
        break;
      case AttentionKind::fixed:
        break;
    }
    fill_truncated_normal(b.Wv, rng, sd);
    fill_truncated_normal(b.W1, rng, sd);
    fill_truncated_normal(b.W2, rng, sd);
  }
  return p;
}

/// CLI-facing variant names.
inline std::string variant_name(const AttentionSpec& spec) {
  switch (spec.kind) {
    case AttentionKind::positional: return "parec";
    case AttentionKind::factorized: return "fparec";
    case AttentionKind::dot_product: return "sasrec";
    case AttentionKind::fixed:
      switch (spec.pattern) {
        case FixedPattern::average: return "fixed-average";
        case FixedPattern::linear: return "fixed-linear";
        case FixedPattern::exponential: return "fixed-exponential";
      }
  }
  return "?";
}

inline AttentionSpec spec_from_variant(const std::string& name) {
  AttentionSpec s;
  if (name == "parec") s.kind = AttentionKind::positional;
  else if (name == "fparec") s.kind = AttentionKind::factorized;
  else if (name == "sasrec") s.kind = AttentionKind::dot_product;
  else if (name == "fixed-average") { s.kind = AttentionKind::fixed; s.pattern = FixedPattern::average; }
  else if (name == "fixed-linear") { s.kind = AttentionKind::fixed; s.pattern = FixedPattern::linear; }
  else if (name == "fixed-exponential") { s.kind = AttentionKind::fixed; s.pattern = FixedPattern::exponential; }
  else throw std::invalid_argument("unknown variant: " + name +
                                   " (expected parec|fparec|sasrec|fixed-average|fixed-linear|fixed-exponential)");
  return s;
}

/// Row-stochastic handcrafted attention. Unnormalized weights over j <= i
/// (0-based): average 1, linear j+1, exponential e^(j-i); rows divide by
/// their sums.
inline Matrix fixed_pattern_matrix(FixedPattern pattern, int n) {
  require(n >= 1, "fixed_pattern_matrix: n must be >= 1");
  Matrix a = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      switch (pattern) {
        case FixedPattern::average: a(i, j) = 1.0; break;
        case FixedPattern::linear: a(i, j) = static_cast<double>(j + 1); break;
        case FixedPattern::exponential: a(i, j) = std::exp(static_cast<double>(j - i)); break;
      }
    }
    a.row(i).head(i + 1) /= a.row(i).head(i + 1).sum();
  }
  return a;
}

/// Attention-layer parameter count: value projection plus the
/// attention-specific tensors (FFN and norms are counted separately).
inline std::int64_t parameter_count(const AttentionSpec& spec, const Dims& dims) {
  validate_spec(spec, dims);
  const std::int64_t d = dims.d, n = dims.n, k = spec.k;
  switch (spec.kind) {
    case AttentionKind::dot_product: return 3 * d * d;
    case AttentionKind::positional: return d * d + n * n;
    case AttentionKind::factorized: return d * d + 2 * k * n;
    case AttentionKind::fixed: return d * d;
  }
  return 0;
}

struct ForwardOptions {
  bool training = false;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
  bool record = false;          // keep backward closures for a later backward()
  bool compute_loss = true;     // requires at least one valid target
  bool want_attention = false;  // copy per-block attention matrices out
};

/// One forward pass: the tape, ids of the tensors that were pushed onto it
/// (parallel to tensor_refs order), per-block outputs and the loss.
struct ForwardTrace {
  Tape tape{false};
  std::vector<int> param_ids;
  std::vector<int> f_ids;  // F_0 .. F_L
  int fhat_id = -1;
  int logits_id = -1;
  int loss_id = -1;
  double loss = 0.0;
  /// Per block: the normalized attention matrices in effect (a single shared
  /// n x n matrix, or batch*num_heads of them for dot_product).
  std::vector<std::vector<Matrix>> attention;
  /// Ids of the FFN pre-activation values, one per block. ReLU is the only
  /// kink in the loss; gradient checks probe these to confirm the instance
  /// sits far enough from it for central differences to be trustworthy.
  std::vector<int> prerelu_ids;

  const Matrix& logits() const { return tape.val(logits_id); }
};

/// Smallest |pre-ReLU activation| seen in a trace.
inline double min_abs_prerelu(const ForwardTrace& trace) {
  double m = std::numeric_limits<double>::infinity();
  for (int id : trace.prerelu_ids) m = std::min(m, trace.tape.val(id).array().abs().minCoeff());
  return m;
}

namespace detail {

inline ForwardTrace forward_impl(const ModelParams& params, const SequenceBatch& batch,
                                 const ForwardOptions& opts, bool last_position_only) {
  const Dims& dims = params.dims;
  const AttentionSpec& spec = params.spec;
  const int batch_rows = static_cast<int>(batch.inputs.rows());
  require(batch.inputs.cols() == dims.n, "forward: batch width must equal n");
  require(batch_rows >= 1, "forward: empty batch");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dims.d));

  ForwardTrace trace;
  trace.tape = Tape(opts.record);
  Tape& t = trace.tape;
  std::mt19937_64 rng(mix_seed(opts.seed));

  auto refs = tensor_refs(params);
  std::vector<int> ids(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) ids[i] = t.push(*refs[i].tensor);
  trace.param_ids = ids;
  auto id_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < refs.size(); ++i)
      if (refs[i].name == name) return ids[i];
    throw std::logic_error("forward: unknown tensor " + name);
  };

  int f = embedding_lookup(t, id_of("M"), batch.inputs);
  if (spec.kind == AttentionKind::dot_product)
    f = add_positional(t, f, id_of("P"), batch_rows);
  trace.f_ids.push_back(f);

  Matrix fixed_attn;
  if (spec.kind == AttentionKind::fixed) fixed_attn = fixed_pattern_matrix(spec.pattern, dims.n);

  for (int l = 0; l < dims.blocks; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    int x = layer_norm(t, f, id_of(pre + "ln_attn.gamma"), id_of(pre + "ln_attn.beta"));
    int attn_out = -1;
    switch (spec.kind) {
      case AttentionKind::positional:
      case AttentionKind::factorized: {
        int logits = spec.kind == AttentionKind::positional
                         ? id_of(pre + "R")
                         : matmul(t, id_of(pre + "R1"), id_of(pre + "R2"), false, true);
        int a = masked_softmax_rows(t, scale(t, logits, inv_sqrt_d), true);
        if (opts.want_attention) trace.attention.push_back({t.val(a)});
        int v = matmul(t, x, id_of(pre + "Wv"));
        attn_out = attention_apply(t, a, v, batch_rows);
        break;
      }
      case AttentionKind::dot_product: {
        int q = matmul(t, x, id_of(pre + "Wq"));
        int k = matmul(t, x, id_of(pre + "Wk"));
        int v = matmul(t, x, id_of(pre + "Wv"));
        std::vector<Matrix> attns;
        attn_out = multihead_causal_attention(t, q, k, v, batch_rows, spec.num_heads,
                                              opts.want_attention ? &attns : nullptr);
        if (opts.want_attention) trace.attention.push_back(std::move(attns));
        break;
      }
      case AttentionKind::fixed: {
        if (opts.want_attention) trace.attention.push_back({fixed_attn});
        int v = matmul(t, x, id_of(pre + "Wv"));
        attn_out = attention_apply_const(t, fixed_attn, v, batch_rows);
        break;
      }
    }
    int f_mid = add(t, f, dropout(t, attn_out, opts.dropout_rate, rng, opts.training));

    int y = layer_norm(t, f_mid, id_of(pre + "ln_ffn.gamma"), id_of(pre + "ln_ffn.beta"));
    int pre_act = add_row_bias(t, matmul(t, y, id_of(pre + "W1")), id_of(pre + "b1"));
    trace.prerelu_ids.push_back(pre_act);
    int h = relu(t, pre_act);
    int ffn_out = add_row_bias(t, matmul(t, h, id_of(pre + "W2")), id_of(pre + "b2"));
    f = add(t, f_mid, dropout(t, ffn_out, opts.dropout_rate, rng, opts.training));
    trace.f_ids.push_back(f);
  }

  trace.fhat_id = layer_norm(t, f, id_of("ln_out.gamma"), id_of("ln_out.beta"));
  if (last_position_only) {
    const Matrix& fhat = t.val(trace.fhat_id);
    Matrix last(batch_rows, dims.d);
    for (int b = 0; b < batch_rows; ++b) last.row(b) = fhat.row(b * dims.n + dims.n - 1);
    trace.logits_id = matmul(t, t.push(std::move(last)), id_of("M"), false, true);
  } else {
    trace.logits_id = matmul(t, trace.fhat_id, id_of("M"), false, true);
    if (opts.compute_loss) {
      trace.loss_id = cross_entropy(t, trace.logits_id, batch.targets, batch.valid);
      trace.loss = t.val(trace.loss_id)(0, 0);
    }
  }
  return trace;
}

}  // namespace detail

/// Full architecture: embeddings, `blocks` pre-norm attention + FFN blocks
/// with residuals and dropout, final layer norm, tied-embedding logits and
/// cross-entropy loss over valid positions.
inline ForwardTrace forward(const ModelParams& params, const SequenceBatch& batch,
                            const ForwardOptions& opts = {}) {
  return detail::forward_impl(params, batch, opts, false);
}

/// Inference-only variant that projects just the final position of each
/// batch row, yielding a B x (|V|+1) score matrix. Not differentiable.
inline ForwardTrace forward_last_position(const ModelParams& params, const SequenceBatch& batch,
                                          const ForwardOptions& opts = {}) {
  require(!opts.record && !opts.compute_loss,
          "forward_last_position: inference only (no tape, no loss)");
  return detail::forward_impl(params, batch, opts, true);
}

/// Standalone loss evaluation for a given logits matrix (rows = B*n).
inline double loss_value(const Matrix& logits, const IntMat& targets, const ByteMat& valid) {
  Tape t(false);
  int id = t.push(logits);
  int loss = cross_entropy(t, id, targets, valid);
  return t.val(loss)(0, 0);
}

}  // namespace parec
