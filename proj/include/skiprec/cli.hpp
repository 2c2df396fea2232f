#pragma once

// Command-line workflows: prepare, synth, train, evaluate, compare.
// Exit codes: 0 success, 1 runtime fault, 2 usage or configuration error.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "skiprec/checkpoint.hpp"
#include "skiprec/config.hpp"
#include "skiprec/corpus.hpp"
#include "skiprec/eval.hpp"
#include "skiprec/synth.hpp"
#include "skiprec/trainer.hpp"

namespace skiprec::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFault = 1;
inline constexpr int kExitUsage = 2;

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << content;
}

/// A prepared corpus directory: corpus.jsonl + vocab.json (+ stats.json).
struct PreparedCorpus {
  std::vector<Session> sessions;
  Vocabulary vocab;
  std::string fingerprint;        // hash of corpus.jsonl and vocab.json
  std::string vocab_fingerprint;  // hash of vocab.json
};

inline void write_prepared(const fs::path& dir, const Corpus& c) {
  fs::create_directories(dir);
  std::ostringstream cache;
  write_corpus_cache(cache, c.sessions);
  write_file(dir / "corpus.jsonl", cache.str());
  write_file(dir / "vocab.json", nlohmann::json({{"keys", c.vocab.keys()}}).dump() + "\n");
  write_file(dir / "stats.json", nlohmann::json(c.stats).dump(2) + "\n");
}

inline PreparedCorpus load_prepared(const fs::path& dir) {
  if (dir.empty()) throw ConfigError("no prepared corpus given (use --corpus or data.cache)");
  PreparedCorpus pc;
  const std::string vocab_text = read_file(dir / "vocab.json");
  const std::string cache_text = read_file(dir / "corpus.jsonl");
  try {
    pc.vocab = Vocabulary::from_keys(nlohmann::json::parse(vocab_text).at("keys").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad vocab.json: ") + e.what(), 0);
  }
  std::istringstream in(cache_text);
  pc.sessions = read_corpus_cache(in, pc.vocab);
  pc.vocab_fingerprint = hex64(fnv1a(vocab_text));
  pc.fingerprint = hex64(fnv1a(cache_text, fnv1a(vocab_text)));
  return pc;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  nlohmann::json config = default_config();
  std::string config_path;
  std::vector<std::string> overrides;
};

inline void resolve_config(Context& ctx) {
  std::string path = ctx.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv); env && *env) path = env;
  }
  if (!path.empty()) merge_config(ctx.config, load_config_file(path));
  for (const auto& o : ctx.overrides) apply_override(ctx.config, o);
}

inline nlohmann::json manifest(const std::string& command, const nlohmann::json& cfg, const std::string& started) {
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  nlohmann::json seeds = {{"root", seed}};
  for (const char* s : {"init", "negatives", "masking", "dropout", "shuffle", "eval"}) seeds[s] = substream_seed(seed, s);
  return {{"command", command}, {"config", cfg}, {"seeds", seeds}, {"started_at", started}};
}

// ---------------------------------------------------------------------------

inline int cmd_prepare(Context& ctx, const std::string& data, const std::string& columns, const std::string& out_dir) {
  const std::string started = timestamp();
  if (!data.empty()) ctx.config["data"]["path"] = data;
  if (!columns.empty()) {
    try {
      merge_config(ctx.config["data"]["columns"], nlohmann::json::parse(columns));
    } catch (const nlohmann::json::parse_error&) {
      throw ConfigError("--columns must be a JSON object, e.g. '{\"track\": \"track_id\"}'");
    }
  }
  const auto path = ctx.config["data"]["path"].get<std::string>();
  if (path.empty()) throw ConfigError("no input log given (use --data or data.path)");
  if (out_dir.empty()) throw ConfigError("--out is required");
  const auto cols = column_mapping(ctx.config);
  const auto limits = length_limits(ctx.config);

  const std::string text = read_file(path);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw ConfigError("input log '" + path + "' is empty");
  std::istringstream in(text);
  Corpus c = parse_session_log(in, cols, limits);
  if (c.sessions.empty()) throw ConfigError("no sessions survived length filtering");
  write_prepared(out_dir, c);

  auto m = manifest("prepare", ctx.config, started);
  m["input_fingerprint"] = hex64(fnv1a(text));
  m["corpus_fingerprint"] = load_prepared(out_dir).fingerprint;
  m["stats"] = c.stats;
  m["artifacts"] = {{"corpus", (fs::path(out_dir) / "corpus.jsonl").string()},
                    {"vocab", (fs::path(out_dir) / "vocab.json").string()},
                    {"stats", (fs::path(out_dir) / "stats.json").string()}};
  m["finished_at"] = timestamp();
  write_file(fs::path(out_dir) / "manifest.json", m.dump(2) + "\n");
  ctx.out << nlohmann::json(c.stats).dump(2) << "\n";
  return kExitOk;
}

inline int cmd_synth(Context& ctx, const std::string& out_dir) {
  const std::string started = timestamp();
  if (out_dir.empty()) throw ConfigError("--out is required");
  const auto sc = synth_config(ctx.config);
  const auto gen = generate_markov_corpus(sc);
  fs::create_directories(out_dir);
  std::ostringstream log;
  write_session_log(log, gen.corpus.sessions, gen.corpus.vocab, column_mapping(ctx.config));
  write_file(fs::path(out_dir) / "sessions.csv", log.str());
  write_file(fs::path(out_dir) / "ground_truth.json", synth_ground_truth(gen).dump(2) + "\n");
  auto m = manifest("synth", ctx.config, started);
  m["stats"] = gen.corpus.stats;
  m["artifacts"] = {{"sessions", (fs::path(out_dir) / "sessions.csv").string()},
                    {"ground_truth", (fs::path(out_dir) / "ground_truth.json").string()}};
  m["finished_at"] = timestamp();
  write_file(fs::path(out_dir) / "manifest.json", m.dump(2) + "\n");
  ctx.out << nlohmann::json(gen.corpus.stats).dump(2) << "\n";
  return kExitOk;
}

inline int cmd_train(Context& ctx, const std::string& corpus_dir, const std::string& out_dir) {
  const std::string started = timestamp();
  if (!corpus_dir.empty()) ctx.config["data"]["cache"] = corpus_dir;
  if (out_dir.empty()) throw ConfigError("--out is required");
  TrainSetup setup;
  setup.model = model_config(ctx.config);
  setup.train = train_config(ctx.config);
  setup.loss = loss_weights(ctx.config);
  setup.context_mode = context_mode(ctx.config);
  setup.validation = eval_config(ctx.config);

  const auto pc = load_prepared(ctx.config["data"]["cache"].get<std::string>());
  const auto data = prepare_training_data(pc.sessions, pc.vocab);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
  if (!log) throw ConfigError("cannot write training log in '" + out_dir + "'");
  auto res = train(data, setup, [&](const nlohmann::json& rec) {
    log << rec.dump() << '\n';
    log.flush();
  });
  for (const auto& w : res.warnings) ctx.err << "warning: " << w << "\n";

  std::ofstream timings(dir / "timings.jsonl", std::ios::trunc);
  for (std::size_t e = 0; e < res.epoch_seconds.size(); ++e) {
    timings << nlohmann::json({{"epoch", e + 1}, {"wall_time", res.epoch_seconds[e]}}).dump() << '\n';
  }

  setup.model.causal = setup.train.mode == TrainMode::unidirectional;
  nlohmann::json meta = {{"model", setup.model},
                         {"mode", to_string(setup.train.mode)},
                         {"context_mode", to_string(setup.context_mode)},
                         {"alpha", setup.loss.alpha},
                         {"beta", setup.loss.beta},
                         {"temperature", setup.loss.temperature},
                         {"vocab_size", pc.vocab.num_tracks()},
                         {"table_size", pc.vocab.table_size()},
                         {"seed", setup.train.seed},
                         {"best_epoch", res.best_epoch},
                         {"best_val_hr", res.best_val},
                         {"corpus_fingerprint", pc.fingerprint},
                         {"vocab_fingerprint", pc.vocab_fingerprint}};
  save_checkpoint((dir / "checkpoint.bin").string(), res.best, meta);

  std::vector<std::pair<std::string, const Mat<float>*>> opt_tensors;
  res.optimizer.m.visit([&](const std::string& n, const Mat<float>& m) { opt_tensors.emplace_back("m." + n, &m); });
  res.optimizer.v.visit([&](const std::string& n, const Mat<float>& m) { opt_tensors.emplace_back("v." + n, &m); });
  res.last.visit([&](const std::string& n, const Mat<float>& m) { opt_tensors.emplace_back("param." + n, &m); });
  write_tensor_file((dir / "optimizer.bin").string(),
                    {{"format", "skiprec-optimizer"}, {"step", res.optimizer.step}, {"epochs_run", res.epochs_run}},
                    opt_tensors);

  auto m = manifest("train", ctx.config, started);
  m["corpus_fingerprint"] = pc.fingerprint;
  m["artifacts"] = {{"checkpoint", (dir / "checkpoint.bin").string()},
                    {"optimizer", (dir / "optimizer.bin").string()},
                    {"log", (dir / "train_log.jsonl").string()},
                    {"timings", (dir / "timings.jsonl").string()}};
  m["result"] = {{"best_epoch", res.best_epoch}, {"best_val_hr", res.best_val}, {"epochs_run", res.epochs_run},
                 {"diverged", res.diverged}, {"warnings", res.warnings}};
  m["finished_at"] = timestamp();
  write_file(dir / "manifest.json", m.dump(2) + "\n");
  ctx.out << nlohmann::json({{"best_epoch", res.best_epoch}, {"best_val_hr", res.best_val},
                             {"epochs_run", res.epochs_run}, {"diverged", res.diverged}})
                 .dump()
          << "\n";
  return res.diverged ? kExitFault : kExitOk;
}

inline EvalReport evaluate_checkpoint(const LoadedCheckpoint& ck, const PreparedCorpus& pc, const EvalConfig& ec) {
  if (ck.meta.value("table_size", std::size_t{0}) != pc.vocab.table_size() ||
      ck.meta.value("vocab_fingerprint", std::string()) != pc.vocab_fingerprint) {
    throw NumericFault("vocabulary mismatch: checkpoint was trained on a different vocabulary (" +
                       std::to_string(ck.meta.value("table_size", std::size_t{0})) + " vs " +
                       std::to_string(pc.vocab.table_size()) + " table rows)");
  }
  const bool bidir = ck.meta.value("mode", std::string("unidirectional")) == "bidirectional";
  const auto holdouts = split_all(pc.sessions);
  return evaluate(holdouts.splits, pc.vocab.num_tracks(), make_model_scorer(ck.params, ck.config, bidir), ec);
}

inline int cmd_evaluate(Context& ctx, const std::string& checkpoint, const std::string& corpus_dir,
                        const std::string& split, const std::string& out_path) {
  const std::string started = timestamp();
  if (!corpus_dir.empty()) ctx.config["data"]["cache"] = corpus_dir;
  if (!split.empty()) ctx.config["eval"]["split"] = split;
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const auto ec = eval_config(ctx.config);
  const auto pc = load_prepared(ctx.config["data"]["cache"].get<std::string>());
  const auto ck = load_checkpoint(checkpoint);
  const auto rep = evaluate_checkpoint(ck, pc, ec);

  nlohmann::json j = rep;
  j["corpus_fingerprint"] = pc.fingerprint;
  if (out_path.empty()) {
    ctx.out << j.dump(2) << "\n";
  } else {
    write_file(out_path, j.dump(2) + "\n");
    auto m = manifest("evaluate", ctx.config, started);
    m["corpus_fingerprint"] = pc.fingerprint;
    m["artifacts"] = {{"checkpoint", checkpoint}, {"report", out_path}};
    m["finished_at"] = timestamp();
    write_file(out_path + ".manifest.json", m.dump(2) + "\n");
  }
  return kExitOk;
}

/// Table-style CSV: one row per HR@K, one column per variant. Columns after the first
/// carry the relative change over the first, (variant - baseline) / baseline, in percent.
inline std::string comparison_csv(const std::vector<std::string>& labels, const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "metric";
  for (const auto& l : labels) os << ',' << l;
  os << '\n';
  if (reports.empty()) return os.str();
  for (auto k : reports.front().ks) {
    os << "HR@" << k;
    const double base = reports.front().hr.at(k);
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const double v = reports[i].hr.at(k);
      os << ',' << std::fixed << std::setprecision(4) << v;
      if (i > 0) {
        if (base > 0) {
          os << " (" << std::showpos << std::setprecision(2) << 100.0 * (v - base) / base << "%)" << std::noshowpos;
        } else {
          os << " (n/a)";
        }
      }
    }
    os << '\n';
  }
  return os.str();
}

inline int cmd_compare(Context& ctx, const std::vector<std::string>& checkpoints, std::vector<std::string> labels,
                       const std::string& corpus_dir, const std::string& split, const std::string& out_path) {
  if (checkpoints.size() < 2) throw ConfigError("compare needs at least two --checkpoint values (baseline first)");
  if (!labels.empty() && labels.size() != checkpoints.size()) throw ConfigError("--label count must match --checkpoint");
  if (labels.empty()) {
    for (const auto& c : checkpoints) labels.push_back(fs::path(c).parent_path().filename().string());
  }
  if (!corpus_dir.empty()) ctx.config["data"]["cache"] = corpus_dir;
  if (!split.empty()) ctx.config["eval"]["split"] = split;
  const auto ec = eval_config(ctx.config);
  const auto pc = load_prepared(ctx.config["data"]["cache"].get<std::string>());
  std::vector<EvalReport> reports;
  for (const auto& c : checkpoints) reports.push_back(evaluate_checkpoint(load_checkpoint(c), pc, ec));
  const auto csv = comparison_csv(labels, reports);
  if (out_path.empty()) {
    ctx.out << csv;
  } else {
    write_file(out_path, csv);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx{out, err, default_config(), {}, {}};
  CLI::App app{"skip-aware sequential recommendation: prepare, synth, train, evaluate, compare"};
  app.require_subcommand(1);
  app.add_option("--config", ctx.config_path, "JSON config file (default: $SKIPREC_CONFIG)");
  app.add_option("--set", ctx.overrides, "dotted-key override, e.g. --set train.lr=0.001");

  std::string data, columns, out_dir, corpus, mode, context, split, checkpoint, out_path;
  std::vector<std::string> checkpoints, labels;
  double alpha = -1.0;

  auto* prepare = app.add_subcommand("prepare", "parse a session log into a normalized corpus cache");
  prepare->add_option("--data", data, "delimited session log");
  prepare->add_option("--columns", columns, "JSON column mapping overrides");
  prepare->add_option("--out", out_dir, "output directory")->required();

  auto* synth = app.add_subcommand("synth", "generate a synthetic Markov session log");
  synth->add_option("--out", out_dir, "output directory")->required();

  auto* trn = app.add_subcommand("train", "train a model on a prepared corpus");
  trn->add_option("--corpus", corpus, "prepared corpus directory");
  trn->add_option("--mode", mode, "unidirectional | bidirectional");
  trn->add_option("--alpha", alpha, "contrastive loss weight")->check(CLI::NonNegativeNumber);
  trn->add_option("--context-mode", context, "predicted | embedding");
  trn->add_option("--out", out_dir, "output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "HR@K of a checkpoint on the holdout targets");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--corpus", corpus, "prepared corpus directory");
  ev->add_option("--split", split, "validation | test");
  ev->add_option("--out", out_path, "report path (default stdout)");

  auto* cmp = app.add_subcommand("compare", "HR@K table across checkpoints, first one is the baseline");
  cmp->add_option("--checkpoint", checkpoints, "checkpoint files")->required();
  cmp->add_option("--label", labels, "column labels");
  cmp->add_option("--corpus", corpus, "prepared corpus directory");
  cmp->add_option("--split", split, "validation | test");
  cmp->add_option("--out", out_path, "CSV path (default stdout)");

  // Subcommand options may also appear after the subcommand name.
  for (auto* sub : {prepare, synth, trn, ev, cmp}) {
    sub->add_option("--config", ctx.config_path, "JSON config file");
    sub->add_option("--set", ctx.overrides, "dotted-key override");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    resolve_config(ctx);
    if (!mode.empty()) ctx.config["train"]["mode"] = mode;
    if (alpha >= 0.0) ctx.config["loss"]["alpha"] = alpha;
    if (!context.empty()) ctx.config["loss"]["context_mode"] = context;

    if (prepare->parsed()) return cmd_prepare(ctx, data, columns, out_dir);
    if (synth->parsed()) return cmd_synth(ctx, out_dir);
    if (trn->parsed()) return cmd_train(ctx, corpus, out_dir);
    if (ev->parsed()) return cmd_evaluate(ctx, checkpoint, corpus, split, out_path);
    if (cmp->parsed()) return cmd_compare(ctx, checkpoints, labels, corpus, split, out_path);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFault;
  }
  return kExitUsage;
}

}  // namespace skiprec::cli
