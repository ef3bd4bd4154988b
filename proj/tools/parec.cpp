// Command-line driver: prepare / train / eval / visualize / experiment.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "parec/analysis.hpp"
#include "parec/checkpoint.hpp"
#include "parec/dataset.hpp"
#include "parec/evaluation.hpp"
#include "parec/io.hpp"
#include "parec/model.hpp"
#include "parec/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Usage or configuration problem: exit code 2, runtime failures exit 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string dataset;
  std::string variant = "fparec";
  int d = 64;
  int n = 50;
  int blocks = 2;
  int k = 20;
  int num_heads = 1;
  bool k_explicit = false;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 128;
  int max_epochs = 200;
  int patience = 20;
  double dropout = 0.2;
  std::uint64_t seed = 42;
  std::string out;
};

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  RunConfig c;
  c.dataset = j.value("dataset", c.dataset);
  c.variant = j.value("variant", c.variant);
  c.d = j.value("d", c.d);
  c.n = j.value("n", c.n);
  c.blocks = j.value("blocks", c.blocks);
  if (j.contains("k")) {
    c.k = j["k"].get<int>();
    c.k_explicit = true;
  }
  c.num_heads = j.value("num_heads", c.num_heads);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.dropout = j.value("dropout", c.dropout);
  c.seed = j.value("seed", c.seed);
  c.out = j.value("out", c.out);
  return c;
}

json config_to_json(const RunConfig& c) {
  json j;
  j["dataset"] = c.dataset;
  j["variant"] = c.variant;
  j["d"] = c.d;
  j["n"] = c.n;
  j["blocks"] = c.blocks;
  if (c.variant == "fparec") j["k"] = c.k;
  if (c.variant == "sasrec") j["num_heads"] = c.num_heads;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["dropout"] = c.dropout;
  j["seed"] = c.seed;
  j["out"] = c.out;
  return j;
}

/// Collects every violation before rejecting, so one run reports them all.
void validate_run_config(const RunConfig& c, bool need_out) {
  std::vector<std::string> errors;
  if (c.dataset.empty())
    errors.push_back("dataset: required (prepared dataset directory)");
  else if (!fs::exists(fs::path(c.dataset) / "header.json"))
    errors.push_back("dataset: " + c.dataset + "/header.json not found (run `parec prepare` first)");
  try {
    parec::spec_from_variant(c.variant);
  } catch (const std::exception& e) {
    errors.push_back(std::string("variant: ") + e.what());
  }
  if (c.d < 1) errors.push_back("d: must be >= 1");
  if (c.n < 2) errors.push_back("n: must be >= 2");
  if (c.blocks < 1) errors.push_back("blocks: must be >= 1");
  if (c.variant == "fparec") {
    if (c.k < 1 || c.k > c.n) errors.push_back("k: must be in [1, n] for fparec");
  } else if (c.k_explicit) {
    errors.push_back("k: only valid for the fparec variant");
  }
  if (c.variant == "sasrec" && (c.num_heads < 1 || c.d % c.num_heads != 0))
    errors.push_back("num_heads: must divide d");
  if (c.learning_rate <= 0) errors.push_back("learning_rate: must be > 0");
  if (c.beta1 < 0 || c.beta1 >= 1) errors.push_back("beta1: must be in [0, 1)");
  if (c.beta2 < 0 || c.beta2 >= 1) errors.push_back("beta2: must be in [0, 1)");
  if (c.batch_size < 1) errors.push_back("batch_size: must be >= 1");
  if (c.max_epochs < 0) errors.push_back("max_epochs: must be >= 0");
  if (c.patience < 1) errors.push_back("patience: must be >= 1");
  if (c.dropout < 0 || c.dropout >= 1) errors.push_back("dropout: must be in [0, 1)");
  if (need_out && c.out.empty()) errors.push_back("out: required");
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

parec::AttentionSpec spec_from_config(const RunConfig& c) {
  parec::AttentionSpec spec = parec::spec_from_variant(c.variant);
  spec.k = c.k;
  spec.num_heads = c.num_heads;
  return spec;
}

parec::TrainConfig train_config(const RunConfig& c) {
  parec::TrainConfig t;
  t.learning_rate = c.learning_rate;
  t.beta1 = c.beta1;
  t.beta2 = c.beta2;
  t.adam_eps = c.adam_eps;
  t.batch_size = c.batch_size;
  t.max_epochs = c.max_epochs;
  t.patience = c.patience;
  t.dropout_rate = c.dropout;
  t.seed = c.seed;
  return t;
}

void refuse_existing(const fs::path& marker, bool force) {
  if (!force && fs::exists(marker))
    throw ConfigError(marker.string() + " already exists; pass --force to overwrite");
}

std::string log_to_jsonl(const std::vector<parec::EpochLog>& log) {
  std::string out;
  for (const auto& e : log) {
    json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_hr10"] = e.val_hr10;
    j["val_ndcg10"] = e.val_ndcg10;
    j["seconds"] = e.seconds;
    out += j.dump() + "\n";
  }
  return out;
}

json report_to_json(const parec::RankingReport& r) {
  json j;
  j["k"] = r.k;
  j["hr"] = r.hr;
  j["ndcg"] = r.ndcg;
  j["n_users"] = r.num_users_evaluated;
  return j;
}

/// Resolved config plus the dataset fingerprint, written into every run
/// directory so results can be reproduced bit for bit.
void write_provenance(const RunConfig& cfg, const fs::path& dir) {
  json j = config_to_json(cfg);
  char hash[32];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(
                    parec::fnv1a_file((fs::path(cfg.dataset) / "interactions.tsv").string())));
  j["dataset_hash_fnv1a64"] = hash;
  parec::write_text_file((dir / "config.json").string(), j.dump(2) + "\n");
}

int cmd_prepare(const std::string& input, const std::string& format, int min_count,
                bool single_pass, const std::string& out, bool force) {
  if (!fs::exists(input)) throw ConfigError("input file not found: " + input);
  refuse_existing(fs::path(out) / "header.json", force);
  parec::InputFormat fmt;
  if (format == "movielens_dat") fmt = parec::InputFormat::movielens_dat;
  else if (format == "tsv") fmt = parec::InputFormat::tsv;
  else throw ConfigError("format must be movielens_dat or tsv");

  auto raw = parec::load_interactions(input, fmt);
  parec::PreprocessOptions opt;
  opt.min_count = min_count;
  opt.iterative = !single_pass;
  auto ds = parec::preprocess(raw, opt);
  auto stats = parec::dataset_stats(ds);
  parec::save_dataset(ds, out);

  json j;
  j["num_users"] = stats.num_users;
  j["num_items"] = stats.num_items;
  j["num_interactions"] = stats.num_interactions;
  j["avg_length"] = stats.avg_length;
  j["min_count"] = min_count;
  j["iterative_filter"] = !single_pass;
  parec::write_text_file((fs::path(out) / "stats.json").string(), j.dump(2) + "\n");
  std::cout << "prepared " << out << ": " << stats.num_users << " users, " << stats.num_items
            << " items, " << stats.num_interactions << " interactions, avg length "
            << stats.avg_length << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, bool force) {
  validate_run_config(cfg, true);
  refuse_existing(fs::path(cfg.out) / "config.json", force);
  auto ds = parec::load_dataset(cfg.dataset);
  parec::Dims dims{cfg.d, cfg.n, cfg.blocks, ds.num_items};
  auto spec = spec_from_config(cfg);
  fs::create_directories(cfg.out);
  write_provenance(cfg, cfg.out);

  auto result = parec::train(ds, spec, dims, train_config(cfg), &std::cout);
  parec::write_text_file((fs::path(cfg.out) / "training_log.jsonl").string(), log_to_jsonl(result.log));
  parec::CheckpointMeta meta;
  meta.spec = spec;
  meta.dims = dims;
  meta.seed = cfg.seed;
  meta.epoch = result.best_epoch;
  meta.val_hr = result.best_val_hr;
  parec::save_checkpoint((fs::path(cfg.out) / "model").string(), result.best_params, meta);
  std::cout << "best epoch " << result.best_epoch << " val_hr10 " << result.best_val_hr
            << "; checkpoint written to " << cfg.out << "/model.{bin,json}\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& phase,
             int k, int batch_size, const std::string& out, const std::string& ranks_out) {
  std::vector<std::string> errors;
  if (!fs::exists(checkpoint + ".json")) errors.push_back("checkpoint: " + checkpoint + ".json not found");
  if (!fs::exists(fs::path(dataset) / "header.json"))
    errors.push_back("dataset: " + dataset + "/header.json not found");
  if (phase != "valid" && phase != "test") errors.push_back("phase: must be valid or test");
  if (k < 1) errors.push_back("k: must be >= 1");
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }

  auto params = parec::load_checkpoint(checkpoint);
  auto ds = parec::load_dataset(dataset);
  auto report = parec::evaluate(params, ds, phase == "valid" ? parec::Phase::valid : parec::Phase::test,
                                batch_size, k);
  json j = report_to_json(report);
  j["phase"] = phase;
  if (!out.empty()) parec::write_text_file(out, j.dump(2) + "\n");
  if (!ranks_out.empty()) {
    std::string tsv;
    for (std::size_t i = 0; i < report.per_user_rank.size(); ++i)
      tsv += std::to_string(i) + "\t" + std::to_string(report.per_user_rank[i]) + "\n";
    parec::write_text_file(ranks_out, tsv);
  }
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_visualize(const std::string& checkpoint, const std::string& what, const std::string& out,
                  bool raw) {
  if (!fs::exists(checkpoint + ".json")) throw ConfigError("checkpoint: " + checkpoint + ".json not found");
  if (what != "attention" && what != "correlation")
    throw ConfigError("--what must be attention or correlation");
  auto params = parec::load_checkpoint(checkpoint);
  fs::create_directories(out);
  const std::string variant = parec::variant_name(params.spec);
  const std::string n_tag = "_n" + std::to_string(params.dims.n);
  auto write_both = [&](const parec::HeatGrid& grid, const std::string& stem) {
    parec::export_grid(grid, (fs::path(out) / (stem + ".csv")).string(), parec::GridFormat::csv);
    parec::export_grid(grid, (fs::path(out) / (stem + ".pgm")).string(), parec::GridFormat::pgm);
    std::cout << "wrote " << out << "/" << stem << ".{csv,pgm}\n";
  };
  if (what == "attention") {
    for (int l = 1; l <= params.dims.blocks; ++l)
      write_both(parec::attention_map(params, l, !raw),
                 "attention_" + variant + "_block" + std::to_string(l) + n_tag);
  } else {
    if (params.spec.kind != parec::AttentionKind::dot_product)
      throw ConfigError("correlation maps need a sasrec checkpoint (positional embeddings)");
    write_both(parec::positional_correlation(params.P), "correlation_" + variant + n_tag);
  }
  return 0;
}

int cmd_experiment(const RunConfig& cfg, int repeats, int jobs, bool force) {
  validate_run_config(cfg, true);
  if (repeats < 1 || repeats % 2 == 0) throw ConfigError("repeats: must be odd and >= 1");
  if (jobs < 1) throw ConfigError("jobs: must be >= 1");
  refuse_existing(fs::path(cfg.out) / "experiment.json", force);
  auto ds = parec::load_dataset(cfg.dataset);
  parec::Dims dims{cfg.d, cfg.n, cfg.blocks, ds.num_items};
  auto spec = spec_from_config(cfg);
  fs::create_directories(cfg.out);
  write_provenance(cfg, cfg.out);

  auto result = parec::run_experiment(ds, spec, dims, train_config(cfg), repeats, jobs, &std::cout);

  json j;
  j["repeats"] = repeats;
  j["runs"] = json::array();
  for (std::size_t r = 0; r < result.runs.size(); ++r) {
    const auto& run = result.runs[r];
    const fs::path run_dir = fs::path(cfg.out) / ("run" + std::to_string(r));
    fs::create_directories(run_dir);
    parec::write_text_file((run_dir / "training_log.jsonl").string(), log_to_jsonl(run.log));
    parec::CheckpointMeta meta;
    meta.spec = spec;
    meta.dims = dims;
    meta.seed = run.seed;
    meta.epoch = run.best_epoch;
    meta.val_hr = run.best_val_hr;
    parec::save_checkpoint((run_dir / "model").string(), run.best_params, meta);
    json rj;
    rj["seed"] = run.seed;
    rj["test_hr10"] = run.test_hr;
    rj["test_ndcg10"] = run.test_ndcg;
    rj["best_epoch"] = run.best_epoch;
    rj["best_val_hr10"] = run.best_val_hr;
    j["runs"].push_back(rj);
  }
  j["median_hr10"] = result.median_hr;
  j["median_ndcg10"] = result.median_ndcg;
  parec::write_text_file((fs::path(cfg.out) / "experiment.json").string(), j.dump(2) + "\n");
  std::cout << "median test hr10 " << result.median_hr << " ndcg10 " << result.median_ndcg
            << " over " << repeats << " runs (raw values in " << cfg.out << "/experiment.json)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"positional-attention sequential recommender"};
  app.require_subcommand(1);

  // prepare
  auto* prep = app.add_subcommand("prepare", "preprocess an interaction log into a dataset directory");
  std::string prep_input, prep_format = "tsv", prep_out;
  int prep_min_count = 5;
  bool prep_single_pass = false, prep_force = false;
  prep->add_option("--input", prep_input, "raw interaction log")->required();
  prep->add_option("--format", prep_format, "movielens_dat | tsv");
  prep->add_option("--min-count", prep_min_count, "drop users/items with fewer interactions");
  prep->add_flag("--single-pass", prep_single_pass, "filter once instead of to a fixed point");
  prep->add_option("--out", prep_out, "output dataset directory")->required();
  prep->add_flag("--force", prep_force, "overwrite existing output");

  // shared train/experiment configuration
  std::string cfg_path, cfg_dataset, cfg_variant, cfg_out;
  int cfg_d = -1, cfg_n = -1, cfg_blocks = -1, cfg_k = -1, cfg_heads = -1;
  int cfg_batch = -1, cfg_epochs = -1, cfg_patience = -1;
  double cfg_dropout = -1, cfg_lr = -1;
  std::int64_t cfg_seed = -1;
  bool train_force = false;
  auto add_run_options = [&](CLI::App* cmd) {
    cmd->add_option("--config", cfg_path, "JSON config file (flags override it)");
    cmd->add_option("--dataset", cfg_dataset, "prepared dataset directory");
    cmd->add_option("--variant", cfg_variant,
                    "parec | fparec | sasrec | fixed-average | fixed-linear | fixed-exponential");
    cmd->add_option("--dim", cfg_d, "hidden dimension d");
    cmd->add_option("--max-len", cfg_n, "maximum sequence length n");
    cmd->add_option("--blocks", cfg_blocks, "number of attention blocks");
    cmd->add_option("--rank-k", cfg_k, "factorization rank (fparec)");
    cmd->add_option("--num-heads", cfg_heads, "attention heads (sasrec)");
    cmd->add_option("--dropout", cfg_dropout, "dropout rate");
    cmd->add_option("--lr", cfg_lr, "Adam learning rate");
    cmd->add_option("--batch-size", cfg_batch, "training batch size");
    cmd->add_option("--epochs", cfg_epochs, "maximum training epochs");
    cmd->add_option("--patience", cfg_patience, "early-stopping patience");
    cmd->add_option("--seed", cfg_seed, "base RNG seed");
    cmd->add_option("--out", cfg_out, "run output directory");
    cmd->add_flag("--force", train_force, "overwrite existing run output");
  };
  auto resolve_config = [&]() {
    RunConfig c = cfg_path.empty() ? RunConfig{} : load_config_file(cfg_path);
    if (!cfg_dataset.empty()) c.dataset = cfg_dataset;
    if (!cfg_variant.empty()) c.variant = cfg_variant;
    if (cfg_d >= 0) c.d = cfg_d;
    if (cfg_n >= 0) c.n = cfg_n;
    if (cfg_blocks >= 0) c.blocks = cfg_blocks;
    if (cfg_k >= 0) { c.k = cfg_k; c.k_explicit = true; }
    if (cfg_heads >= 0) c.num_heads = cfg_heads;
    if (cfg_dropout >= 0) c.dropout = cfg_dropout;
    if (cfg_lr >= 0) c.learning_rate = cfg_lr;
    if (cfg_batch >= 0) c.batch_size = cfg_batch;
    if (cfg_epochs >= 0) c.max_epochs = cfg_epochs;
    if (cfg_patience >= 0) c.patience = cfg_patience;
    if (cfg_seed >= 0) c.seed = static_cast<std::uint64_t>(cfg_seed);
    if (!cfg_out.empty()) c.out = cfg_out;
    return c;
  };

  auto* train_cmd = app.add_subcommand("train", "train one model and keep the best checkpoint");
  add_run_options(train_cmd);

  auto* exp_cmd = app.add_subcommand("experiment", "train repeated seeds and report median test metrics");
  int exp_repeats = 3, exp_jobs = 1;
  add_run_options(exp_cmd);
  exp_cmd->add_option("--repeats", exp_repeats, "number of seeded runs (odd)");
  exp_cmd->add_option("--jobs", exp_jobs, "parallel runs (each run stays single-threaded)");

  auto* eval_cmd = app.add_subcommand("eval", "rank held-out items with a checkpoint");
  std::string eval_ckpt, eval_dataset, eval_phase = "test", eval_out, eval_ranks;
  int eval_k = 10, eval_batch = 128;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint base path (without .bin/.json)")->required();
  eval_cmd->add_option("--dataset", eval_dataset, "prepared dataset directory")->required();
  eval_cmd->add_option("--phase", eval_phase, "valid | test");
  eval_cmd->add_option("--k", eval_k, "metric cutoff");
  eval_cmd->add_option("--batch-size", eval_batch, "evaluation batch size");
  eval_cmd->add_option("--out", eval_out, "write report JSON here");
  eval_cmd->add_option("--ranks", eval_ranks, "write per-user ranks TSV here");

  auto* vis_cmd = app.add_subcommand("visualize", "export attention or correlation heat grids");
  std::string vis_ckpt, vis_what = "attention", vis_out;
  bool vis_raw = false;
  vis_cmd->add_option("--checkpoint", vis_ckpt, "checkpoint base path")->required();
  vis_cmd->add_option("--what", vis_what, "attention | correlation");
  vis_cmd->add_option("--out", vis_out, "output directory")->required();
  vis_cmd->add_flag("--raw", vis_raw, "row-stochastic values instead of row-max normalized");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (prep->parsed())
      return cmd_prepare(prep_input, prep_format, prep_min_count, prep_single_pass, prep_out, prep_force);
    if (train_cmd->parsed()) return cmd_train(resolve_config(), train_force);
    if (exp_cmd->parsed()) return cmd_experiment(resolve_config(), exp_repeats, exp_jobs, train_force);
    if (eval_cmd->parsed())
      return cmd_eval(eval_ckpt, eval_dataset, eval_phase, eval_k, eval_batch, eval_out, eval_ranks);
    if (vis_cmd->parsed()) return cmd_visualize(vis_ckpt, vis_what, vis_out, vis_raw);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
