#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "parec/model.hpp"
#include "parec/rng.hpp"

namespace parec {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

/// Central finite differences against a supplied gradient set, over a random
/// subsample of at least `min_coords` coordinates (all of them when the model
/// is smaller). `f` must be deterministic — run it with dropout disabled.
/// The relative error is |fd - g| / max(|fd|, |g|, 1e-6); the floor keeps
/// difference-quotient rounding noise (~1e-11 absolute here) from drowning
/// coordinates whose true gradient is itself below the noise scale, while a
/// genuinely wrong gradient of any magnitude still reports an error many
/// orders above tolerance. Frozen coordinates report exactly 0.
inline GradCheckResult finite_diff_check(ModelParams& params,
                                         const std::function<double()>& f,
                                         const ModelParams& grads, int min_coords = 200,
                                         double epsilon = 1e-4, std::uint64_t seed = 0) {
  auto prefs = tensor_refs(params);
  auto grefs = tensor_refs(const_cast<ModelParams&>(grads));
  require(prefs.size() == grefs.size(), "finite_diff_check: params/grads mismatch");

  struct Coord {
    std::size_t tensor;
    Eigen::Index flat;
  };
  std::vector<Coord> all;
  for (std::size_t ti = 0; ti < prefs.size(); ++ti)
    for (Eigen::Index i = 0; i < prefs[ti].tensor->size(); ++i) all.push_back({ti, i});

  std::mt19937_64 rng(mix_seed(seed, 0xfdU));
  std::shuffle(all.begin(), all.end(), rng);
  const std::size_t take = std::min(all.size(), static_cast<std::size_t>(min_coords));

  GradCheckResult result;
  for (std::size_t c = 0; c < take; ++c) {
    Matrix& tensor = *prefs[all[c].tensor].tensor;
    double* coord = tensor.data() + all[c].flat;
    const double saved = *coord;
    *coord = saved + epsilon;
    const double f_plus = f();
    *coord = saved - epsilon;
    const double f_minus = f();
    *coord = saved;
    require(std::isfinite(f_plus) && std::isfinite(f_minus), "finite_diff_check: non-finite f");
    const double fd = (f_plus - f_minus) / (2.0 * epsilon);
    const double g = *(grefs[all[c].tensor].tensor->data() + all[c].flat);
    const double denom = std::max({std::abs(fd), std::abs(g), 1e-6});
    result.max_rel_err = std::max(result.max_rel_err, std::abs(fd - g) / denom);
  }
  result.coords_checked = static_cast<int>(take);
  return result;
}

}  // namespace parec
