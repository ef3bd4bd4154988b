#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "parec/dataset.hpp"
#include "parec/model.hpp"

namespace parec {

/// Full-ranking metrics at cutoff k plus the per-user 1-based ranks they
/// were computed from.
struct RankingReport {
  int k = 10;
  double hr = 0.0;
  double ndcg = 0.0;
  std::vector<std::int32_t> per_user_rank;
  std::int64_t num_users_evaluated = 0;
};

/// 1-based rank of the target item among scores for items 1..|V|
/// (scores[v-1] is item v). Ties resolve in favor of the target.
inline std::int32_t rank_of_target(std::span<const double> scores, std::int32_t target) {
  require(target >= 1 && static_cast<std::size_t>(target) <= scores.size(),
          "rank_of_target: target out of range");
  const double ts = scores[static_cast<std::size_t>(target - 1)];
  std::int32_t greater = 0;
  for (double s : scores)
    if (s > ts) ++greater;
  return 1 + greater;
}

inline RankingReport metrics_at_k(const std::vector<std::int32_t>& ranks, int k = 10) {
  require(!ranks.empty(), "metrics_at_k: empty ranks");
  require(k >= 1, "metrics_at_k: k must be >= 1");
  RankingReport r;
  r.k = k;
  r.per_user_rank = ranks;
  r.num_users_evaluated = static_cast<std::int64_t>(ranks.size());
  double hits = 0.0, gain = 0.0;
  for (std::int32_t rank : ranks) {
    if (rank <= k) {
      hits += 1.0;
      gain += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
  }
  r.hr = hits / static_cast<double>(ranks.size());
  r.ndcg = gain / static_cast<double>(ranks.size());
  return r;
}

/// Scores every item 1..|V| at each user's final input position and ranks
/// the held-out item against all of them. Dropout is off and parameters are
/// untouched; only the last position's hidden state is projected, which
/// avoids the full B*n x |V| logits product.
inline RankingReport evaluate(const ModelParams& params, const InteractionDataset& ds,
                              Phase phase, int batch_size, int k = 10) {
  require(phase != Phase::train, "evaluate: phase must be valid or test");
  require(ds.num_items == params.dims.num_items, "evaluate: dataset/model item count mismatch");
  const int n = params.dims.n;
  std::vector<std::int32_t> ranks;
  ranks.reserve(static_cast<std::size_t>(ds.num_users));
  for (const auto& batch : build_sequences(ds, n, phase, batch_size)) {
    ForwardOptions opts;
    opts.compute_loss = false;
    ForwardTrace trace = forward_last_position(params, batch, opts);
    const Matrix& scores = trace.tape.val(trace.logits_id);  // B x (|V|+1)
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      const std::int32_t target = batch.targets(r, n - 1);
      std::span<const double> row(scores.row(r).data() + 1,
                                  static_cast<std::size_t>(ds.num_items));
      ranks.push_back(rank_of_target(row, target));
    }
  }
  return metrics_at_k(ranks, k);
}

}  // namespace parec
