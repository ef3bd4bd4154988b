#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "parec/model.hpp"

namespace parec {

struct CheckpointMeta {
  AttentionSpec spec;
  Dims dims;
  std::uint64_t seed = 0;
  int epoch = 0;
  double val_hr = 0.0;
  double val_ndcg = 0.0;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'P', 'A', 'R', 'E', 'C', 'K', 'P', '1'};

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace detail

inline nlohmann::json spec_to_json(const AttentionSpec& spec) {
  nlohmann::json j;
  j["variant"] = variant_name(spec);
  if (spec.kind == AttentionKind::factorized) j["k"] = spec.k;
  if (spec.kind == AttentionKind::dot_product) j["num_heads"] = spec.num_heads;
  return j;
}

inline AttentionSpec spec_from_json(const nlohmann::json& j) {
  AttentionSpec spec = spec_from_variant(j.at("variant").get<std::string>());
  if (j.contains("k")) spec.k = j["k"].get<int>();
  if (j.contains("num_heads")) spec.num_heads = j["num_heads"].get<int>();
  return spec;
}

/// Writes <base>.bin (named tensors: name, shape, row-major doubles) and
/// <base>.json (spec, dims, seed, epoch).
inline void save_checkpoint(const std::string& base, const ModelParams& params,
                            const CheckpointMeta& meta) {
  {
    std::ofstream out(base + ".bin", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + base + ".bin");
    out.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
    auto refs = tensor_refs(params);
    detail::write_u32(out, static_cast<std::uint32_t>(refs.size()));
    for (const auto& r : refs) {
      detail::write_u32(out, static_cast<std::uint32_t>(r.name.size()));
      out.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
      detail::write_u32(out, static_cast<std::uint32_t>(r.tensor->rows()));
      detail::write_u32(out, static_cast<std::uint32_t>(r.tensor->cols()));
      out.write(reinterpret_cast<const char*>(r.tensor->data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(r.tensor->size())));
    }
    if (!out) throw std::runtime_error("write failed for " + base + ".bin");
  }
  nlohmann::json j;
  j["format"] = 1;
  j["spec"] = spec_to_json(params.spec);
  j["dims"] = {{"d", params.dims.d},
               {"n", params.dims.n},
               {"blocks", params.dims.blocks},
               {"num_items", params.dims.num_items}};
  j["seed"] = meta.seed;
  j["epoch"] = meta.epoch;
  j["val_hr"] = meta.val_hr;
  j["val_ndcg"] = meta.val_ndcg;
  std::ofstream out(base + ".json");
  if (!out) throw std::runtime_error("cannot write " + base + ".json");
  out << j.dump(2) << '\n';
}

inline ModelParams load_checkpoint(const std::string& base, CheckpointMeta* meta_out = nullptr) {
  std::ifstream min(base + ".json");
  if (!min) throw std::runtime_error("cannot open " + base + ".json");
  nlohmann::json j = nlohmann::json::parse(min);
  CheckpointMeta meta;
  meta.spec = spec_from_json(j.at("spec"));
  meta.dims.d = j.at("dims").at("d").get<int>();
  meta.dims.n = j.at("dims").at("n").get<int>();
  meta.dims.blocks = j.at("dims").at("blocks").get<int>();
  meta.dims.num_items = j.at("dims").at("num_items").get<int>();
  meta.seed = j.value("seed", 0ULL);
  meta.epoch = j.value("epoch", 0);
  meta.val_hr = j.value("val_hr", 0.0);
  meta.val_ndcg = j.value("val_ndcg", 0.0);

  ModelParams params = alloc_params(meta.spec, meta.dims);
  auto refs = tensor_refs(params);

  std::ifstream in(base + ".bin", std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + base + ".bin");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0)
    throw std::runtime_error(base + ".bin: not a checkpoint file");
  const std::uint32_t count = detail::read_u32(in);
  if (count != refs.size())
    throw std::runtime_error(base + ".bin: tensor count does not match manifest spec");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rows = detail::read_u32(in);
    const std::uint32_t cols = detail::read_u32(in);
    if (!in) throw std::runtime_error(base + ".bin: truncated");
    if (name != refs[i].name || rows != refs[i].tensor->rows() || cols != refs[i].tensor->cols())
      throw std::runtime_error(base + ".bin: tensor " + name + " does not match manifest shape");
    in.read(reinterpret_cast<char*>(refs[i].tensor->data()),
            static_cast<std::streamsize>(sizeof(double) * rows * cols));
    if (!in) throw std::runtime_error(base + ".bin: truncated tensor " + name);
  }
  if (meta_out) *meta_out = meta;
  return params;
}

}  // namespace parec
