#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "parec/matrix.hpp"

namespace parec {

struct RawInteraction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
};

enum class InputFormat { movielens_dat, tsv };

/// Per-user chronological item sequences with dense 1-based item indices
/// (0 reserved for padding). The leave-one-out split is positional: the last
/// item of each sequence is the test item, the second to last the validation
/// item, everything before is training.
struct InteractionDataset {
  std::int32_t num_users = 0;
  std::int32_t num_items = 0;
  std::vector<std::vector<std::int32_t>> sequences;
  std::vector<std::string> user_ids;  // index u -> external id
  std::vector<std::string> item_ids;  // index v-1 -> external id

  std::int64_t num_interactions() const {
    std::int64_t total = 0;
    for (const auto& s : sequences) total += static_cast<std::int64_t>(s.size());
    return total;
  }

  /// Training prefix of user u (everything except the last two items).
  std::span<const std::int32_t> train_items(std::int32_t u) const {
    const auto& s = sequences[static_cast<std::size_t>(u)];
    return {s.data(), s.size() - 2};
  }
  std::int32_t valid_item(std::int32_t u) const {
    const auto& s = sequences[static_cast<std::size_t>(u)];
    return s[s.size() - 2];
  }
  std::int32_t test_item(std::int32_t u) const { return sequences[static_cast<std::size_t>(u)].back(); }
};

struct DatasetStats {
  std::int64_t num_users = 0;
  std::int64_t num_items = 0;
  std::int64_t num_interactions = 0;
  double avg_length = 0.0;
};

enum class Phase { train, valid, test };

/// Fixed-length, left-padded next-item batch. Row r of inputs/targets is one
/// user's window; valid marks positions with a real (non padding) target.
struct SequenceBatch {
  IntMat inputs;
  IntMat targets;
  ByteMat valid;
  std::vector<std::int32_t> users;  // dataset user index per row
};

namespace detail {

inline std::int64_t parse_timestamp(std::string_view s, const std::string& where) {
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || v < 0)
    throw std::runtime_error(where + ": bad timestamp '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_by(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
  return out;
}

}  // namespace detail

/// Parses an interaction log. movielens_dat lines are
/// `user::item::rating::timestamp` (rating discarded); tsv lines are
/// `user<TAB>item<TAB>timestamp`.
inline std::vector<RawInteraction> load_interactions(const std::string& path, InputFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open input file: " + path);
  std::vector<RawInteraction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    auto fields = detail::split_by(line, format == InputFormat::movielens_dat ? "::" : "\t");
    RawInteraction r;
    if (format == InputFormat::movielens_dat) {
      if (fields.size() != 4) throw std::runtime_error(where + ": expected user::item::rating::timestamp");
      r.user_id = std::string(fields[0]);
      r.item_id = std::string(fields[1]);
      r.timestamp = detail::parse_timestamp(fields[3], where);
    } else {
      if (fields.size() != 3) throw std::runtime_error(where + ": expected user<TAB>item<TAB>timestamp");
      r.user_id = std::string(fields[0]);
      r.item_id = std::string(fields[1]);
      r.timestamp = detail::parse_timestamp(fields[2], where);
    }
    if (r.user_id.empty() || r.item_id.empty())
      throw std::runtime_error(where + ": empty user or item id");
    out.push_back(std::move(r));
  }
  if (out.empty()) throw std::runtime_error(path + ": no interactions found");
  return out;
}

struct PreprocessOptions {
  /// Users/items with fewer than this many interactions are dropped.
  int min_count = 5;
  /// Iterate the filter to a fixed point (dropping users can push items
  /// below threshold and vice versa). Single pass filters on raw counts once.
  bool iterative = true;
};

/// Applies the count filter, orders each user's interactions by
/// (timestamp, input order), densely re-indexes items from 1 and fixes the
/// leave-one-out split. Users always need at least 3 interactions so that
/// train/valid/test are all non-empty, whatever min_count says.
inline InteractionDataset preprocess(const std::vector<RawInteraction>& raw,
                                     const PreprocessOptions& opt = {}) {
  require(!raw.empty(), "preprocess: empty input");
  const std::size_t user_min =
      static_cast<std::size_t>(std::max(opt.min_count, 3));
  const std::size_t item_min = static_cast<std::size_t>(std::max(opt.min_count, 0));

  std::unordered_map<std::string, std::size_t> user_count, item_count;
  for (const auto& r : raw) {
    ++user_count[r.user_id];
    ++item_count[r.item_id];
  }

  std::unordered_map<std::string, bool> user_alive, item_alive;
  for (const auto& [u, c] : user_count) user_alive[u] = c >= user_min;
  for (const auto& [v, c] : item_count) item_alive[v] = c >= item_min;

  if (opt.iterative) {
    bool changed = true;
    while (changed) {
      changed = false;
      std::unordered_map<std::string, std::size_t> uc, ic;
      for (const auto& r : raw) {
        if (!user_alive[r.user_id] || !item_alive[r.item_id]) continue;
        ++uc[r.user_id];
        ++ic[r.item_id];
      }
      for (auto& [u, alive] : user_alive) {
        if (alive && uc[u] < user_min) {
          alive = false;
          changed = true;
        }
      }
      for (auto& [v, alive] : item_alive) {
        if (alive && ic[v] < item_min) {
          alive = false;
          changed = true;
        }
      }
    }
  }

  // Users in first-appearance order; per-user interactions as
  // (timestamp, input index, item id) so ties keep file order.
  struct Event {
    std::int64_t ts;
    std::size_t order;
    const std::string* item;
  };
  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<Event>> per_user;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto& r = raw[i];
    if (!user_alive[r.user_id] || !item_alive[r.item_id]) continue;
    auto [it, inserted] = per_user.try_emplace(r.user_id);
    if (inserted) user_order.push_back(r.user_id);
    it->second.push_back({r.timestamp, i, &r.item_id});
  }
  if (user_order.empty()) throw std::runtime_error("preprocess: filtering emptied the dataset");

  InteractionDataset ds;
  std::unordered_map<std::string, std::int32_t> item_index;
  for (const auto& uid : user_order) {
    auto& events = per_user[uid];
    // The minimum-3 rule can only bite for min_count < 3 in single-pass mode.
    if (events.size() < 3) continue;
    std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
      return a.ts != b.ts ? a.ts < b.ts : a.order < b.order;
    });
    std::vector<std::int32_t> seq;
    seq.reserve(events.size());
    for (const auto& e : events) {
      auto [it, inserted] = item_index.try_emplace(*e.item, static_cast<std::int32_t>(item_index.size() + 1));
      if (inserted) ds.item_ids.push_back(*e.item);
      seq.push_back(it->second);
    }
    ds.user_ids.push_back(uid);
    ds.sequences.push_back(std::move(seq));
  }
  if (ds.sequences.empty()) throw std::runtime_error("preprocess: filtering emptied the dataset");
  ds.num_users = static_cast<std::int32_t>(ds.sequences.size());
  ds.num_items = static_cast<std::int32_t>(ds.item_ids.size());
  return ds;
}

inline DatasetStats dataset_stats(const InteractionDataset& ds) {
  DatasetStats s;
  s.num_users = ds.num_users;
  s.num_items = ds.num_items;
  s.num_interactions = ds.num_interactions();
  s.avg_length = s.num_users ? static_cast<double>(s.num_interactions) / static_cast<double>(s.num_users) : 0.0;
  return s;
}

/// Streams fixed-length batches for one phase. The phase sequence is the
/// training prefix (train), prefix + validation item (valid) or the full
/// sequence (test); consecutive (item -> next item) pairs are right-aligned
/// into windows of length n. Users whose phase sequence has no pair (a
/// 1-item training prefix) are skipped for the train phase.
inline std::vector<SequenceBatch> build_sequences(const InteractionDataset& ds, int n, Phase phase,
                                                  int batch_size,
                                                  const std::vector<std::int32_t>* user_order = nullptr) {
  require(n >= 2, "build_sequences: n must be >= 2");
  require(batch_size >= 1, "build_sequences: batch_size must be >= 1");
  std::vector<std::int32_t> order;
  if (user_order) {
    order = *user_order;
  } else {
    order.resize(static_cast<std::size_t>(ds.num_users));
    std::iota(order.begin(), order.end(), 0);
  }

  std::vector<SequenceBatch> batches;
  std::vector<std::int32_t> pending;
  pending.reserve(static_cast<std::size_t>(batch_size));

  auto flush = [&]() {
    if (pending.empty()) return;
    const auto rows = static_cast<Eigen::Index>(pending.size());
    SequenceBatch b;
    b.inputs = IntMat::Zero(rows, n);
    b.targets = IntMat::Zero(rows, n);
    b.valid = ByteMat::Zero(rows, n);
    b.users = pending;
    for (Eigen::Index r = 0; r < rows; ++r) {
      const auto& seq = ds.sequences[static_cast<std::size_t>(pending[static_cast<std::size_t>(r)])];
      std::size_t len = seq.size();
      if (phase == Phase::train) len -= 2;
      else if (phase == Phase::valid) len -= 1;
      const auto pairs = static_cast<std::int64_t>(len) - 1;
      const std::int64_t take = std::min<std::int64_t>(pairs, n);
      for (std::int64_t i = 0; i < take; ++i) {
        const std::int64_t src = pairs - take + i;  // pair index into the phase sequence
        const Eigen::Index col = n - take + i;
        b.inputs(r, col) = seq[static_cast<std::size_t>(src)];
        b.targets(r, col) = seq[static_cast<std::size_t>(src) + 1];
        b.valid(r, col) = 1;
      }
    }
    batches.push_back(std::move(b));
    pending.clear();
  };

  for (std::int32_t u : order) {
    const auto& seq = ds.sequences[static_cast<std::size_t>(u)];
    std::size_t len = seq.size();
    if (phase == Phase::train) len -= 2;
    else if (phase == Phase::valid) len -= 1;
    if (len < 2) continue;  // no (input, target) pair to emit
    pending.push_back(u);
    if (pending.size() == static_cast<std::size_t>(batch_size)) flush();
  }
  flush();
  return batches;
}

// ---------------------------------------------------------------------------
// On-disk form: a line-oriented interactions file plus a JSON header, so a
// prepared dataset can be reloaded without re-filtering.
// ---------------------------------------------------------------------------

inline void save_dataset(const InteractionDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "interactions.tsv");
    if (!out) throw std::runtime_error("cannot write " + dir + "/interactions.tsv");
    for (std::int32_t u = 0; u < ds.num_users; ++u) {
      const auto& seq = ds.sequences[static_cast<std::size_t>(u)];
      for (std::size_t p = 0; p < seq.size(); ++p)
        out << u << '\t' << seq[p] << '\t' << p << '\n';
    }
  }
  nlohmann::json header;
  header["format"] = 1;
  header["num_users"] = ds.num_users;
  header["num_items"] = ds.num_items;
  header["num_interactions"] = ds.num_interactions();
  header["user_ids"] = ds.user_ids;
  header["item_ids"] = ds.item_ids;
  std::ofstream out(fs::path(dir) / "header.json");
  if (!out) throw std::runtime_error("cannot write " + dir + "/header.json");
  out << header.dump(2) << '\n';
}

inline InteractionDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream hin(fs::path(dir) / "header.json");
  if (!hin) throw std::runtime_error("cannot open " + dir + "/header.json");
  nlohmann::json header = nlohmann::json::parse(hin);
  InteractionDataset ds;
  ds.num_users = header.at("num_users").get<std::int32_t>();
  ds.num_items = header.at("num_items").get<std::int32_t>();
  ds.user_ids = header.at("user_ids").get<std::vector<std::string>>();
  ds.item_ids = header.at("item_ids").get<std::vector<std::string>>();
  ds.sequences.assign(static_cast<std::size_t>(ds.num_users), {});

  std::ifstream in(fs::path(dir) / "interactions.tsv");
  if (!in) throw std::runtime_error("cannot open " + dir + "/interactions.tsv");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::int64_t u, v, p;
    if (!(ss >> u >> v >> p) || u < 0 || u >= ds.num_users || v < 1 || v > ds.num_items)
      throw std::runtime_error(dir + "/interactions.tsv:" + std::to_string(lineno) + ": bad record");
    auto& seq = ds.sequences[static_cast<std::size_t>(u)];
    if (static_cast<std::size_t>(p) != seq.size())
      throw std::runtime_error(dir + "/interactions.tsv:" + std::to_string(lineno) + ": positions out of order");
    seq.push_back(static_cast<std::int32_t>(v));
  }
  for (const auto& seq : ds.sequences)
    if (seq.size() < 3) throw std::runtime_error(dir + ": user sequence shorter than 3");
  return ds;
}

}  // namespace parec
