#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "parec/dataset.hpp"

namespace parec {

namespace detail {

inline InteractionDataset finish_synthetic(InteractionDataset ds, int num_items) {
  ds.num_users = static_cast<std::int32_t>(ds.sequences.size());
  ds.num_items = num_items;
  ds.user_ids.reserve(ds.sequences.size());
  for (std::size_t u = 0; u < ds.sequences.size(); ++u) ds.user_ids.push_back("u" + std::to_string(u));
  for (int v = 1; v <= num_items; ++v) ds.item_ids.push_back("i" + std::to_string(v));
  return ds;
}

}  // namespace detail

/// Deterministic-successor sequences: item i is always followed by
/// (i mod num_items) + 1; users start at a seeded random item.
inline InteractionDataset make_cyclic_dataset(int num_items, int num_users, int seq_len,
                                              std::uint64_t seed) {
  require(num_items >= 2 && num_users >= 1 && seq_len >= 3, "make_cyclic_dataset: bad sizes");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> start(1, num_items);
  InteractionDataset ds;
  ds.sequences.reserve(static_cast<std::size_t>(num_users));
  for (int u = 0; u < num_users; ++u) {
    std::vector<std::int32_t> seq(static_cast<std::size_t>(seq_len));
    const int s = start(rng);
    for (int t = 0; t < seq_len; ++t) seq[static_cast<std::size_t>(t)] = (s - 1 + t) % num_items + 1;
    ds.sequences.push_back(std::move(seq));
  }
  return detail::finish_synthetic(std::move(ds), num_items);
}

/// Lagged-successor sequences: v[t] = v[t - lag] + step (mod num_items), with
/// seeded random starts for the first `lag` positions. Predicting the next
/// item requires looking exactly lag positions back from it, so uniform
/// "average" attention cannot isolate the relevant input while a learned
/// positional pattern can.
inline InteractionDataset make_lagged_dataset(int num_items, int num_users, int seq_len, int lag,
                                              int step, std::uint64_t seed) {
  require(lag >= 1 && seq_len > lag, "make_lagged_dataset: need seq_len > lag >= 1");
  require(num_items >= 2 && num_users >= 1 && seq_len >= 3, "make_lagged_dataset: bad sizes");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> start(1, num_items);
  InteractionDataset ds;
  ds.sequences.reserve(static_cast<std::size_t>(num_users));
  for (int u = 0; u < num_users; ++u) {
    std::vector<std::int32_t> seq(static_cast<std::size_t>(seq_len));
    for (int t = 0; t < lag; ++t) seq[static_cast<std::size_t>(t)] = start(rng);
    for (int t = lag; t < seq_len; ++t)
      seq[static_cast<std::size_t>(t)] = (seq[static_cast<std::size_t>(t - lag)] - 1 + step) % num_items + 1;
    ds.sequences.push_back(std::move(seq));
  }
  return detail::finish_synthetic(std::move(ds), num_items);
}

/// Expands a dataset back into raw interactions with the position index as
/// timestamp; lets prepared data round-trip through the text pipeline.
inline std::vector<RawInteraction> dataset_to_raw(const InteractionDataset& ds) {
  std::vector<RawInteraction> raw;
  raw.reserve(static_cast<std::size_t>(ds.num_interactions()));
  for (std::int32_t u = 0; u < ds.num_users; ++u) {
    const auto& seq = ds.sequences[static_cast<std::size_t>(u)];
    for (std::size_t p = 0; p < seq.size(); ++p)
      raw.push_back({ds.user_ids[static_cast<std::size_t>(u)],
                     ds.item_ids[static_cast<std::size_t>(seq[p] - 1)],
                     static_cast<std::int64_t>(p)});
  }
  return raw;
}

/// Writes interactions as the generic TSV input format.
inline void write_interactions_tsv(const std::vector<RawInteraction>& raw, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : raw) out << r.user_id << '\t' << r.item_id << '\t' << r.timestamp << '\n';
}

}  // namespace parec
