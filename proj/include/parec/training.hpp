#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <thread>
#include <vector>

#include "parec/dataset.hpp"
#include "parec/evaluation.hpp"
#include "parec/model.hpp"
#include "parec/rng.hpp"

namespace parec {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 128;
  int max_epochs = 200;
  int patience = 20;  // epochs without validation HR@10 improvement
  double dropout_rate = 0.2;
  std::uint64_t seed = 42;
  int eval_k = 10;
};

inline void validate_config(const TrainConfig& cfg) {
  require(cfg.learning_rate > 0.0, "learning_rate must be > 0");
  require(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0, "beta1 must be in [0, 1)");
  require(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0, "beta2 must be in [0, 1)");
  require(cfg.adam_eps > 0.0, "adam_eps must be > 0");
  require(cfg.batch_size >= 1, "batch_size must be >= 1");
  require(cfg.max_epochs >= 0, "max_epochs must be >= 0");
  require(cfg.patience >= 1, "patience must be >= 1");
  require(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0, "dropout must be in [0, 1)");
  require(cfg.eval_k >= 1, "eval_k must be >= 1");
}

/// Structure-matched gradients: one tensor per ModelParams tensor.
using GradientSet = ModelParams;

/// Pulls the gradient of the recorded loss for every parameter tensor.
/// A trace can be consumed once; the padding embedding row stays zero.
inline GradientSet backward(ForwardTrace& trace, const ModelParams& params) {
  require(trace.loss_id >= 0, "backward: trace has no loss");
  trace.tape.backward(trace.loss_id);
  GradientSet grads = zeros_like(params);
  auto refs = tensor_refs(grads);
  require(refs.size() == trace.param_ids.size(), "backward: trace/params mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    Matrix& g = trace.tape.grad(trace.param_ids[i]);
    if (g.size() > 0) *refs[i].tensor = std::move(g);
  }
  return grads;
}

struct AdamState {
  ModelParams m, v;
  std::int64_t step = 0;
};

inline AdamState make_adam_state(const ModelParams& params) {
  return {zeros_like(params), zeros_like(params), 0};
}

/// Standard bias-corrected Adam. Non-finite gradients abort.
inline void adam_step(ModelParams& params, const GradientSet& grads, AdamState& state,
                      const TrainConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto p = tensor_refs(params);
  auto g = tensor_refs(const_cast<GradientSet&>(grads));
  auto m = tensor_refs(state.m);
  auto v = tensor_refs(state.v);
  require(p.size() == g.size() && p.size() == m.size() && p.size() == v.size(),
          "adam_step: tensor structure mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Matrix& grad = *g[i].tensor;
    if (!grad.allFinite())
      throw std::runtime_error("adam_step: non-finite gradient in " + g[i].name +
                               " at step " + std::to_string(state.step));
    Matrix& mm = *m[i].tensor;
    Matrix& vv = *v[i].tensor;
    mm = cfg.beta1 * mm + (1.0 - cfg.beta1) * grad;
    vv = cfg.beta2 * vv + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    p[i].tensor->array() -=
        cfg.learning_rate * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + cfg.adam_eps);
  }
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_hr10 = 0.0;
  double val_ndcg10 = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  ModelParams best_params;
  std::vector<EpochLog> log;
  int best_epoch = 0;        // 0 = never improved (initial params returned)
  double best_val_hr = 0.0;
};

/// Epoch loop with seeded shuffling, Adam updates, per-epoch validation and
/// early stopping on validation HR@k. Returns the best-validation
/// checkpoint, never a later, worse one.
inline TrainResult train(const InteractionDataset& ds, const AttentionSpec& spec, Dims dims,
                         const TrainConfig& cfg, std::ostream* progress = nullptr) {
  validate_config(cfg);
  require(ds.num_users >= 1, "train: empty dataset");
  if (dims.num_items == 0) dims.num_items = ds.num_items;
  require(dims.num_items == ds.num_items, "train: dims.num_items does not match dataset");

  TrainResult result;
  ModelParams params = init_params(spec, dims, cfg.seed);
  AdamState adam = make_adam_state(params);
  result.best_params = params;
  double best_hr = -1.0;
  int epochs_since_best = 0;

  std::vector<std::int32_t> order(static_cast<std::size_t>(ds.num_users));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0x5u));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double ce_sum = 0.0;
    std::int64_t valid_count = 0;
    int batch_index = 0;
    for (const auto& batch : build_sequences(ds, dims.n, Phase::train, cfg.batch_size, &order)) {
      ForwardOptions opts;
      opts.training = true;
      opts.dropout_rate = cfg.dropout_rate;
      opts.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                           static_cast<std::uint64_t>(batch_index));
      opts.record = true;
      ForwardTrace trace = forward(params, batch, opts);
      if (!std::isfinite(trace.loss))
        throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));
      const std::int64_t batch_valid = batch.valid.cast<std::int64_t>().sum();
      ce_sum += trace.loss * static_cast<double>(batch_valid);
      valid_count += batch_valid;
      GradientSet grads = backward(trace, params);
      adam_step(params, grads, adam, cfg);
      ++batch_index;
    }

    RankingReport val = evaluate(params, ds, Phase::valid, cfg.batch_size, cfg.eval_k);
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = valid_count ? ce_sum / static_cast<double>(valid_count) : 0.0;
    entry.val_hr10 = val.hr;
    entry.val_ndcg10 = val.ndcg;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (progress)
      (*progress) << "epoch " << epoch << " loss " << entry.train_loss << " val_hr" << cfg.eval_k
                  << " " << entry.val_hr10 << " val_ndcg" << cfg.eval_k << " " << entry.val_ndcg10
                  << " (" << entry.seconds << "s)\n";

    if (val.hr > best_hr) {
      best_hr = val.hr;
      result.best_params = params;
      result.best_epoch = epoch;
      result.best_val_hr = val.hr;
      epochs_since_best = 0;
    } else if (++epochs_since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

inline double median(std::vector<double> values) {
  require(!values.empty(), "median: empty input");
  std::sort(values.begin(), values.end());
  return values[values.size() / 2];
}

struct ExperimentRun {
  std::uint64_t seed = 0;
  double test_hr = 0.0;
  double test_ndcg = 0.0;
  int best_epoch = 0;
  double best_val_hr = 0.0;
  std::vector<EpochLog> log;
  ModelParams best_params;
};

struct ExperimentResult {
  std::vector<ExperimentRun> runs;
  double median_hr = 0.0;
  double median_ndcg = 0.0;
};

/// Trains `repeats` models with seeds cfg.seed + 0..repeats-1, evaluates each
/// best checkpoint on the test split and reports per-metric medians along
/// with every raw value. Runs are independent; `jobs` > 1 executes them on
/// worker threads without changing any per-run result.
inline ExperimentResult run_experiment(const InteractionDataset& ds, const AttentionSpec& spec,
                                       const Dims& dims, const TrainConfig& cfg, int repeats = 3,
                                       int jobs = 1, std::ostream* progress = nullptr) {
  require(repeats >= 1 && repeats % 2 == 1, "run_experiment: repeats must be odd");
  ExperimentResult result;
  result.runs.resize(static_cast<std::size_t>(repeats));

  auto run_one = [&](int r) {
    TrainConfig run_cfg = cfg;
    run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(r);
    TrainResult tr = train(ds, spec, dims, run_cfg, jobs > 1 ? nullptr : progress);
    RankingReport test = evaluate(tr.best_params, ds, Phase::test, cfg.batch_size, cfg.eval_k);
    ExperimentRun& out = result.runs[static_cast<std::size_t>(r)];
    out.seed = run_cfg.seed;
    out.test_hr = test.hr;
    out.test_ndcg = test.ndcg;
    out.best_epoch = tr.best_epoch;
    out.best_val_hr = tr.best_val_hr;
    out.log = std::move(tr.log);
    out.best_params = std::move(tr.best_params);
  };

  if (jobs <= 1) {
    for (int r = 0; r < repeats; ++r) run_one(r);
  } else {
    std::atomic<int> next{0};
    auto worker = [&] {
      for (int r = next.fetch_add(1); r < repeats; r = next.fetch_add(1)) run_one(r);
    };
    std::vector<std::thread> pool;
    const int workers = std::min(jobs, repeats);
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::vector<double> hrs, ndcgs;
  for (const auto& run : result.runs) {
    hrs.push_back(run.test_hr);
    ndcgs.push_back(run.test_ndcg);
  }
  result.median_hr = median(hrs);
  result.median_ndcg = median(ndcgs);
  return result;
}

}  // namespace parec
