#pragma once

// Subcommands of the dasent tool as plain functions: configuration
// resolution, run directories with manifests, and the ingest / train / eval /
// transfer / analyze / gradcheck pipelines.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dasent/analysis.hpp"
#include "dasent/autodiff.hpp"
#include "dasent/corpus.hpp"
#include "dasent/errors.hpp"
#include "dasent/kv.hpp"
#include "dasent/metrics.hpp"
#include "dasent/model.hpp"
#include "dasent/training.hpp"

namespace dasent::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Configuration

inline constexpr const char* kEnvPrefix = "DASENT_";

/// Every key accepted in a config file, in an environment variable
/// (DASENT_<KEY>, upper case) or through --set.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "train",          "dev",        "test",        "out",          "seed",      "seeds",
      "jobs",           "embed_dim",  "lstm_hidden", "dialog_hidden", "dropout",  "lr_grid",
      "max_epochs",     "restarts",   "target",      "sentiment_weight", "dialog_act_weight",
      "regime",         "budgets",    "poor_cap",    "dev_folds",    "min_count", "lowercase",
      "alpha",          "divergence_threshold"};
  return keys;
}

struct ExperimentConfig {
  std::string train_path;
  std::string dev_path;
  std::string test_path;
  std::string out = "run";
  std::vector<std::uint64_t> seeds;  // transfer repeats; empty = {train.seed}
  ModelConfig model;
  TrainConfig train;
  std::vector<Regime> regimes{Regime::BothRich};
  std::vector<std::size_t> budgets = default_budget_curve();
  TransferOptions transfer;
  bool lowercase = false;
  double alpha = 0.0;

  void apply(const KeyValues& kv, const std::string& source);
  KeyValues to_kv() const;

  std::vector<std::uint64_t> seed_list() const { return seeds.empty() ? std::vector<std::uint64_t>{train.seed} : seeds; }
};

namespace detail {

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& text, Parse parse) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse(item));
  }
  return out;
}

template <typename T, typename Fmt>
std::string join(const std::vector<T>& xs, Fmt fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v.front() == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw UsageError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw UsageError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw UsageError(key + ": expected a boolean, got '" + v + "'");
}

}  // namespace detail

inline void ExperimentConfig::apply(const KeyValues& kv, const std::string& source) {
  using namespace detail;
  const auto& known = config_keys();
  for (const auto& [key, value] : kv) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw UsageError(source + ": unknown configuration key '" + key + "'");
    if (key == "train") train_path = value;
    else if (key == "dev") dev_path = value;
    else if (key == "test") test_path = value;
    else if (key == "out") out = value;
    else if (key == "seed") train.seed = to_u64(key, value);
    else if (key == "seeds") seeds = parse_list<std::uint64_t>(value, [&](const std::string& s) { return to_u64(key, s); });
    else if (key == "jobs") train.jobs = to_u64(key, value);
    else if (key == "embed_dim") model.embed_dim = to_u64(key, value);
    else if (key == "lstm_hidden") model.lstm_hidden = to_u64(key, value);
    else if (key == "dialog_hidden") model.dialog_hidden = to_u64(key, value);
    else if (key == "dropout") model.dropout_rate = to_double(key, value);
    else if (key == "lr_grid") train.lr_grid = parse_list<double>(value, [&](const std::string& s) { return to_double(key, s); });
    else if (key == "max_epochs") train.max_epochs = static_cast<int>(to_u64(key, value));
    else if (key == "restarts") train.restarts = static_cast<int>(to_u64(key, value));
    else if (key == "target") train.target = parse_target(value);
    else if (key == "sentiment_weight") train.loss_weights.sentiment = to_double(key, value);
    else if (key == "dialog_act_weight") train.loss_weights.dialog_act = to_double(key, value);
    else if (key == "regime") regimes = parse_list<Regime>(value, [](const std::string& s) { return parse_regime(s); });
    else if (key == "budgets") budgets = parse_list<std::size_t>(value, [&](const std::string& s) { return to_u64(key, s); });
    else if (key == "poor_cap") transfer.poor_cap = to_u64(key, value);
    else if (key == "dev_folds") transfer.dev_folds = to_u64(key, value);
    else if (key == "min_count") transfer.min_count = static_cast<int>(to_u64(key, value));
    else if (key == "lowercase") lowercase = to_bool(key, value);
    else if (key == "alpha") alpha = to_double(key, value);
    else if (key == "divergence_threshold") train.divergence_threshold = to_double(key, value);
  }
}

inline KeyValues ExperimentConfig::to_kv() const {
  using detail::join;
  auto num = [](double d) { return ad::format_double(d); };
  auto integer = [](auto x) { return std::to_string(x); };
  return {{"train", train_path},
          {"dev", dev_path},
          {"test", test_path},
          {"out", out},
          {"seed", std::to_string(train.seed)},
          {"seeds", join(seeds, integer)},
          {"jobs", std::to_string(train.jobs)},
          {"embed_dim", std::to_string(model.embed_dim)},
          {"lstm_hidden", std::to_string(model.lstm_hidden)},
          {"dialog_hidden", std::to_string(model.dialog_hidden)},
          {"dropout", num(model.dropout_rate)},
          {"lr_grid", join(train.lr_grid, num)},
          {"max_epochs", std::to_string(train.max_epochs)},
          {"restarts", std::to_string(train.restarts)},
          {"target", std::string(target_name(train.target))},
          {"sentiment_weight", num(train.loss_weights.sentiment)},
          {"dialog_act_weight", num(train.loss_weights.dialog_act)},
          {"regime", join(regimes, [](Regime r) { return std::string(regime_name(r)); })},
          {"budgets", join(budgets, integer)},
          {"poor_cap", std::to_string(transfer.poor_cap)},
          {"dev_folds", std::to_string(transfer.dev_folds)},
          {"min_count", std::to_string(transfer.min_count)},
          {"lowercase", lowercase ? "true" : "false"},
          {"alpha", num(alpha)},
          {"divergence_threshold", num(train.divergence_threshold)}};
}

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline std::optional<std::string> process_env(const std::string& name) {
  if (const char* v = std::getenv(name.c_str())) return std::string(v);
  return std::nullopt;
}

/// defaults < config file < environment < command-line overrides
inline ExperimentConfig resolve_config(const std::optional<fs::path>& config_file, const KeyValues& overrides,
                                       const EnvLookup& env = process_env) {
  ExperimentConfig cfg;
  if (config_file) {
    std::ifstream in(*config_file);
    if (!in) throw UsageError("cannot open config file " + config_file->string());
    cfg.apply(parse_key_values(in, config_file->string()), config_file->string());
  }
  KeyValues from_env;
  for (const auto& key : config_keys()) {
    std::string name = kEnvPrefix;
    for (char c : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (auto v = env(name)) from_env[key] = *v;
  }
  cfg.apply(from_env, "environment");
  cfg.apply(overrides, "command line");
  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const ValidationError& e) {
    throw UsageError(std::string("configuration: ") + e.what());
  }
  return cfg;
}

/// Parses "key=value" strings from --set.
inline KeyValues parse_assignments(const std::vector<std::string>& items) {
  KeyValues out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("expected key=value, got '" + item + "'");
    out[trim(item.substr(0, eq))] = trim(item.substr(eq + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run directories

/// Collects the files written by a command and records them, together with
/// the configuration and wall-clock timestamps, in manifest.json. Timestamps
/// appear nowhere else.
class RunDirectory {
 public:
  RunDirectory(fs::path root, std::string command)
      : root_(std::move(root)), command_(std::move(command)), started_(now_iso()) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec) throw DataError("cannot create output directory " + root_.string() + ": " + ec.message());
  }

  const fs::path& root() const { return root_; }
  fs::path path(const std::string& name) const { return root_ / name; }

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(path(name), std::ios::binary);
    out << content;
    if (!out) throw DataError("cannot write " + path(name).string());
    files_.push_back(name);
  }

  // The output directory itself is left out so that two runs differing only
  // in --out write identical files.
  void write_config(const KeyValues& kv) {
    KeyValues content = kv;
    content.erase("out");
    std::ostringstream os;
    write_key_values(os, content);
    write("config.conf", os.str());
    config_ = kv;
  }

  void finish(const json& summary = json::object()) {
    json m;
    m["command"] = command_;
    m["format_version"] = 1;
    m["started"] = started_;
    m["finished"] = now_iso();
    m["config"] = json::object();
    for (const auto& [k, v] : config_) m["config"][k] = v;
    m["summary"] = summary;
    json files = json::array();
    for (const auto& f : files_) files.push_back({{"name", f}, {"bytes", fs::file_size(path(f))}});
    m["files"] = files;
    std::ofstream out(path("manifest.json"), std::ios::binary);
    out << m.dump(2) << '\n';
    if (!out) throw DataError("cannot write manifest in " + root_.string());
  }

 private:
  static std::string now_iso() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
  }

  fs::path root_;
  std::string command_;
  std::string started_;
  std::vector<std::string> files_;
  KeyValues config_;
};

// ---------------------------------------------------------------------------
// Shared helpers

inline std::vector<LinearDialog> load_dialogs(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("no ") + what + " corpus given");
  auto trees = parse_corpus(fs::path(path));
  if (trees.empty()) throw DataError(path + ": no posts");
  return linearize(trees);
}

inline std::string tsv_of(std::span<const LinearDialog> dialogs) {
  std::ostringstream os;
  write_linear_tsv(os, dialogs);
  return os.str();
}

inline json to_json(const ClassScores& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
}

inline json metrics_json(const TaskConfusions& cm) {
  json j;
  json sent = json::object(), da = json::object();
  const auto ss = f1_per_class(cm.sentiment);
  for (Sentiment s : kAllSentiments) sent[std::string(sentiment_name(s))] = to_json(ss[static_cast<std::size_t>(s)]);
  const auto ds = f1_per_class(cm.dialog_act);
  for (std::size_t k = 0; k < kDialogActCount; ++k)
    da[std::string(1, kDialogActCodes[k])] = to_json(ds[k]);
  j["sentiment"] = {{"posts", cm.sentiment.total()},
                    {"macro_f1", cm.sentiment_f1()},
                    {"macro_f1_3class", sentiment_macro_f1_3class(cm.sentiment)},
                    {"per_class", sent}};
  j["dialog_act"] = {{"posts", cm.dialog_act.total()}, {"weighted_f1", cm.dialog_act_f1()}, {"per_class", da}};
  return j;
}

inline std::string metrics_table(const TaskConfusions& cm) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  auto row = [&](const std::string& label, const ClassScores& s) {
    os << std::left << std::setw(10) << label << std::right << std::setw(10) << s.precision << std::setw(10)
       << s.recall << std::setw(10) << s.f1 << std::setw(9) << s.support << '\n';
  };
  os << "sentiment (" << cm.sentiment.total() << " posts)\n";
  os << std::left << std::setw(10) << "class" << std::right << std::setw(10) << "precision" << std::setw(10)
     << "recall" << std::setw(10) << "f1" << std::setw(9) << "support" << '\n';
  const auto ss = f1_per_class(cm.sentiment);
  for (Sentiment s : kAllSentiments) row(std::string(sentiment_name(s)), ss[static_cast<std::size_t>(s)]);
  os << "macro F1 (positive, negative): " << cm.sentiment_f1() << '\n';
  os << "macro F1 (3 classes):          " << sentiment_macro_f1_3class(cm.sentiment) << "\n\n";
  os << "dialog act (" << cm.dialog_act.total() << " posts)\n";
  const auto ds = f1_per_class(cm.dialog_act);
  for (std::size_t k = 0; k < kDialogActCount; ++k)
    if (ds[k].support || cm.dialog_act.col_sum(k))
      row(std::string(1, kDialogActCodes[k]) + " " + std::string(dialog_act_name(static_cast<DialogAct>(k))).substr(0, 7),
          ds[k]);
  os << "weighted F1: " << cm.dialog_act_f1() << '\n';
  return os.str();
}

inline json report_json(const RunReport& r) {
  json j;
  j["regime"] = r.regime;
  j["budget"] = r.budget;
  j["seed"] = r.seed;
  j["target"] = std::string(target_name(r.target));
  j["lr"] = r.lr;
  j["restart"] = r.restart;
  j["epoch"] = r.epoch;
  j["dev_metric"] = r.dev_metric;
  j["train_dialogs"] = r.train_dialogs;
  j["dev_dialogs"] = r.dev_dialogs;
  j["runs_executed"] = r.runs_executed;
  j["runs_diverged"] = r.runs_diverged;
  j["test_sentiment_f1"] = r.test_sentiment_f1 ? json(*r.test_sentiment_f1) : json(nullptr);
  j["test_dialog_act_f1"] = r.test_dialog_act_f1 ? json(*r.test_dialog_act_f1) : json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// ingest

inline json stats_json(const CorpusStats& s) {
  json j;
  j["trees"] = s.trees;
  j["dialogs"] = s.dialogs;
  j["posts"] = s.posts;
  j["branch_posts"] = s.branch_posts;
  j["max_dialog_length"] = s.max_dialog_length;
  j["vocabulary"] = s.vocabulary;
  json hist = json::object();
  for (auto [size, n] : s.tree_size_histogram) hist[std::to_string(size)] = n;
  j["tree_size_histogram"] = hist;
  json sent = json::object(), da = json::object();
  for (Sentiment x : kAllSentiments)
    sent[std::string(sentiment_name(x))] = {{"count", s.sentiment_counts[static_cast<std::size_t>(x)]},
                                            {"percent", s.sentiment_percent(x)},
                                            {"reference_percent", kReferenceSentimentPercent[static_cast<std::size_t>(x)]}};
  for (std::size_t k = 0; k < kDialogActCount; ++k) {
    const auto d = static_cast<DialogAct>(k);
    da[std::string(1, kDialogActCodes[k])] = {{"count", s.dialog_act_counts[k]},
                                             {"percent", s.dialog_act_percent(d)},
                                             {"reference_percent", kReferenceDialogActPercent[k]}};
  }
  j["sentiment"] = sent;
  j["dialog_act"] = da;
  j["sentiment_withheld"] = s.sentiment_withheld;
  j["dialog_act_withheld"] = s.dialog_act_withheld;
  return j;
}

inline std::string stats_table(const CorpusStats& s) {
  std::ostringstream os;
  os << "trees " << s.trees << ", dialogs " << s.dialogs << ", posts " << s.posts << ", posts over all dialogs "
     << s.branch_posts << ", vocabulary " << s.vocabulary << ", longest dialog " << s.max_dialog_length << "\n\n";
  os << std::fixed << std::setprecision(1);
  os << "label       count   corpus%  reference%\n";
  for (Sentiment x : kAllSentiments)
    os << std::left << std::setw(10) << sentiment_name(x) << std::right << std::setw(7)
       << s.sentiment_counts[static_cast<std::size_t>(x)] << std::setw(10) << s.sentiment_percent(x) << std::setw(12)
       << kReferenceSentimentPercent[static_cast<std::size_t>(x)] << '\n';
  for (std::size_t k = 0; k < kDialogActCount; ++k)
    os << std::left << std::setw(10) << (std::string(1, kDialogActCodes[k]) + " act") << std::right << std::setw(7)
       << s.dialog_act_counts[k] << std::setw(10) << s.dialog_act_percent(static_cast<DialogAct>(k)) << std::setw(12)
       << kReferenceDialogActPercent[k] << '\n';
  return os.str();
}

/// Reads a tree-TSV corpus and writes the normalized trees, the linearized
/// dialogs and corpus statistics.
inline CorpusStats cmd_ingest(const fs::path& input, const fs::path& out_dir, std::ostream& log) {
  const auto trees = parse_corpus(input);
  if (trees.empty()) throw DataError(input.string() + ": no posts");
  const auto stats = corpus_stats(trees);
  RunDirectory run(out_dir, "ingest");
  run.write_config({{"input", input.string()}});
  std::ostringstream tree_tsv;
  write_tree_tsv(tree_tsv, trees);
  run.write("trees.tsv", tree_tsv.str());
  run.write("dialogs.tsv", tsv_of(linearize(trees)));
  run.write("stats.json", stats_json(stats).dump(2) + "\n");
  run.write("stats.txt", stats_table(stats));
  run.finish({{"trees", stats.trees}, {"dialogs", stats.dialogs}, {"posts", stats.posts}});
  log << "ingested " << stats.trees << " trees, " << stats.dialogs << " dialogs, " << stats.posts << " posts into "
      << out_dir.string() << '\n';
  return stats;
}

// ---------------------------------------------------------------------------
// train

struct TrainOutput {
  FitResult fit;
  Vocabulary vocab;
};

/// Without an explicit dev corpus, one tree-level fold (of `dev_folds`) of the
/// training corpus is held out.
inline void split_dev(const ExperimentConfig& cfg, std::vector<LinearDialog>& train, std::vector<LinearDialog>& dev) {
  if (!cfg.dev_path.empty()) {
    dev = load_dialogs(cfg.dev_path, "dev");
    return;
  }
  std::vector<std::string> trees;
  for (const auto& d : train)
    if (std::find(trees.begin(), trees.end(), d.tree_id) == trees.end()) trees.push_back(d.tree_id);
  if (trees.size() < 2) {
    dev = train;
    return;
  }
  const auto folds = make_folds(train, std::min(cfg.transfer.dev_folds, trees.size()),
                                Rng::derive(cfg.train.seed, dasent::detail::kFoldStream).next());
  std::vector<char> is_dev(train.size(), 0);
  for (std::size_t i : folds.front()) is_dev[i] = 1;
  std::vector<LinearDialog> rest;
  for (std::size_t i = 0; i < train.size(); ++i) (is_dev[i] ? dev : rest).push_back(std::move(train[i]));
  train = std::move(rest);
}

inline TrainOutput cmd_train(const ExperimentConfig& cfg, std::ostream& log) {
  auto train = load_dialogs(cfg.train_path, "training");
  std::vector<LinearDialog> dev;
  split_dev(cfg, train, dev);
  const Vocabulary vocab = build_vocabulary(train, cfg.transfer.min_count, cfg.lowercase);
  log << "training on " << train.size() << " dialogs, selecting on " << dev.size() << " (vocabulary "
      << vocab.size() << ")\n";
  FitResult result = fit(train, dev, vocab, cfg.model, cfg.train);

  std::optional<TaskConfusions> test_cm;
  if (!cfg.test_path.empty()) {
    const auto test = load_dialogs(cfg.test_path, "test");
    test_cm = evaluate(result.params, test, vocab);
    result.report.test_sentiment_f1 = test_cm->sentiment_f1();
    result.report.test_dialog_act_f1 = test_cm->dialog_act_f1();
  }

  RunDirectory run(cfg.out, "train");
  run.write_config(cfg.to_kv());
  std::ostringstream ckpt, model_conf, vocab_txt, traces;
  ad::save_checkpoint(ckpt, std::as_const(result.params).parameters());
  run.write("params.ckpt", ckpt.str());
  write_key_values(model_conf, result.params.config().to_kv());
  run.write("model.conf", model_conf.str());
  vocab.save(vocab_txt);
  run.write("vocab.txt", vocab_txt.str());
  traces << "lr,restart,epoch,train_loss,dev_metric\n";
  for (const auto& t : result.runs)
    for (std::size_t e = 0; e < t.dev_metric.size(); ++e)
      traces << ad::format_double(t.lr) << ',' << t.restart << ',' << e + 1 << ','
             << ad::format_double(t.train_loss[e]) << ',' << ad::format_double(t.dev_metric[e]) << '\n';
  run.write("runs.csv", traces.str());
  json report = report_json(result.report);
  json diverged = json::array();
  for (const auto& t : result.runs)
    if (t.diverged) diverged.push_back({{"lr", t.lr}, {"restart", t.restart}, {"reason", t.failure}});
  report["diverged_runs"] = diverged;
  run.write("report.json", report.dump(2) + "\n");
  if (test_cm) {
    run.write("metrics.json", metrics_json(*test_cm).dump(2) + "\n");
    run.write("metrics.txt", metrics_table(*test_cm));
  }
  run.finish({{"dev_metric", result.report.dev_metric}, {"lr", result.report.lr}, {"epoch", result.report.epoch}});
  log << "selected lr " << ad::format_double(result.report.lr) << " restart " << result.report.restart << " epoch "
      << result.report.epoch << ", dev " << target_name(cfg.train.target) << " "
      << ad::format_double(result.report.dev_metric) << '\n';
  return {std::move(result), vocab};
}

// ---------------------------------------------------------------------------
// eval

struct LoadedModel {
  ModelParams params;
  Vocabulary vocab;
};

inline LoadedModel load_model(const fs::path& dir) {
  auto open = [&](const char* name) {
    std::ifstream in(dir / name);
    if (!in) throw DataError("cannot open " + (dir / name).string());
    return in;
  };
  auto conf_in = open("model.conf");
  const ModelConfig mc = ModelConfig::from_kv(parse_key_values(conf_in, (dir / "model.conf").string()));
  auto vocab_in = open("vocab.txt");
  Vocabulary vocab = Vocabulary::load(vocab_in);
  if (vocab.size() != mc.vocab_size)
    throw DataError("vocabulary has " + std::to_string(vocab.size()) + " entries, model expects " +
                    std::to_string(mc.vocab_size));
  ModelParams params(mc);
  auto ckpt_in = open("params.ckpt");
  ad::load_checkpoint(ckpt_in, params.parameters());
  return {std::move(params), std::move(vocab)};
}

inline std::string predictions_tsv(std::span<const LinearDialog> dialogs,
                                   std::span<const std::vector<PostPrediction>> preds) {
  std::ostringstream os;
  for (std::size_t i = 0; i < dialogs.size(); ++i) {
    const auto& d = dialogs[i];
    for (std::size_t t = 0; t < d.posts.size(); ++t) {
      os << d.branch_id() << '\t' << t << '\t';
      dasent::detail::write_post_columns(os, d.tree_id, d.posts[t]);
      os << '\t' << sentiment_code(preds[i][t].sentiment) << '\t' << dialog_act_code(preds[i][t].dialog_act) << '\n';
    }
  }
  return os.str();
}

/// Scores a trained model (run directory) on a corpus.
inline TaskConfusions cmd_eval_model(const fs::path& model_dir, const fs::path& test_path, const fs::path& out_dir,
                                     std::ostream& log) {
  const LoadedModel m = load_model(model_dir);
  const auto test = load_dialogs(test_path.string(), "test");
  TaskConfusions cm;
  std::vector<std::vector<PostPrediction>> preds;
  for (const auto& d : test) {
    preds.push_back(predict(m.params, encode_dialog(d, m.vocab)));
    for (std::size_t t = 0; t < d.posts.size(); ++t) cm.add(d.posts[t], preds.back()[t].sentiment, preds.back()[t].dialog_act);
  }
  RunDirectory run(out_dir, "eval");
  run.write_config({{"model", model_dir.string()}, {"test", test_path.string()}});
  run.write("predictions.tsv", predictions_tsv(test, preds));
  run.write("metrics.json", metrics_json(cm).dump(2) + "\n");
  run.write("metrics.txt", metrics_table(cm));
  run.finish({{"sentiment_f1", cm.sentiment_f1()}, {"dialog_act_f1", cm.dialog_act_f1()}});
  log << metrics_table(cm);
  return cm;
}

/// Scores a predictions file: linearized TSV plus predicted sentiment and
/// dialog-act columns.
inline TaskConfusions cmd_eval_predictions(const fs::path& predictions, const fs::path& out_dir, std::ostream& log) {
  std::ifstream in(predictions);
  if (!in) throw DataError("cannot open " + predictions.string());
  std::vector<std::pair<Sentiment, DialogAct>> pred;
  const auto dialogs = parse_linear_tsv(in, predictions.string(), &pred);
  if (dialogs.empty()) throw DataError(predictions.string() + ": no predictions");
  TaskConfusions cm;
  std::size_t k = 0;
  for (const auto& d : dialogs)
    for (const auto& p : d.posts) {
      cm.add(p, pred[k].first, pred[k].second);
      ++k;
    }
  RunDirectory run(out_dir, "eval");
  run.write_config({{"predictions", predictions.string()}});
  run.write("metrics.json", metrics_json(cm).dump(2) + "\n");
  run.write("metrics.txt", metrics_table(cm));
  run.finish({{"sentiment_f1", cm.sentiment_f1()}, {"dialog_act_f1", cm.dialog_act_f1()}});
  log << metrics_table(cm);
  return cm;
}

// ---------------------------------------------------------------------------
// transfer

struct CurvePoint {
  Regime regime;
  std::size_t budget;
  std::size_t seeds;
  double mean_sentiment_f1;
  double mean_dialog_act_f1;
};

/// Mean test F1 per (regime, budget) over seeds, in first-seen order.
inline std::vector<CurvePoint> summarize_curves(std::span<const RunReport> reports) {
  std::vector<CurvePoint> out;
  for (const auto& r : reports) {
    const Regime regime = parse_regime(r.regime);
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const CurvePoint& p) { return p.regime == regime && p.budget == r.budget; });
    if (it == out.end()) it = out.insert(out.end(), {regime, r.budget, 0, 0.0, 0.0});
    ++it->seeds;
    it->mean_sentiment_f1 += r.test_sentiment_f1.value_or(0.0);
    it->mean_dialog_act_f1 += r.test_dialog_act_f1.value_or(0.0);
  }
  for (auto& p : out) {
    p.mean_sentiment_f1 /= static_cast<double>(p.seeds);
    p.mean_dialog_act_f1 /= static_cast<double>(p.seeds);
  }
  return out;
}

/// Runs every configured regime for every seed over the budget curve and
/// writes one curve CSV per regime plus a seed-averaged summary.
inline std::vector<RunReport> cmd_transfer(const ExperimentConfig& cfg, std::ostream& log) {
  const auto pool = load_dialogs(cfg.train_path, "training");
  const auto test = load_dialogs(cfg.test_path, "test");
  std::vector<std::size_t> budgets = cfg.budgets;
  if (budgets.empty()) throw UsageError("empty budget list");
  for (std::size_t& b : budgets) b = std::min(b, pool.size());
  budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());

  RunDirectory run(cfg.out, "transfer");
  run.write_config(cfg.to_kv());
  std::vector<RunReport> all;
  for (Regime regime : cfg.regimes) {
    std::vector<RunReport> rows;
    for (std::uint64_t seed : cfg.seed_list()) {
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      auto reports = transfer_experiment(pool, test, regime, budgets, cfg.model, tc, cfg.transfer);
      for (const auto& r : reports)
        log << regime_name(regime) << " seed " << seed << " budget " << r.budget << ": sentiment F1 "
            << ad::format_double(*r.test_sentiment_f1) << ", dialog act F1 " << ad::format_double(*r.test_dialog_act_f1)
            << '\n';
      rows.insert(rows.end(), reports.begin(), reports.end());
    }
    std::ostringstream csv;
    write_curve_csv(csv, rows);
    run.write("curve_" + std::string(regime_name(regime)) + ".csv", csv.str());
    all.insert(all.end(), rows.begin(), rows.end());
  }
  std::ostringstream summary;
  summary << "regime,budget,seeds,mean_sent_f1,mean_da_f1\n";
  for (const auto& p : summarize_curves(all))
    summary << regime_name(p.regime) << ',' << p.budget << ',' << p.seeds << ',' << ad::format_double(p.mean_sentiment_f1)
            << ',' << ad::format_double(p.mean_dialog_act_f1) << '\n';
  run.write("summary.csv", summary.str());
  json reports = json::array();
  for (const auto& r : all) reports.push_back(report_json(r));
  run.write("report.json", reports.dump(2) + "\n");
  run.finish({{"runs", all.size()}});
  return all;
}

// ---------------------------------------------------------------------------
// analyze

inline constexpr const char* kNegInfSentinel = "-inf";

inline std::string format_log_prob(double lp) {
  return std::isinf(lp) ? std::string(kNegInfSentinel) : ad::format_double(lp);
}

inline std::string transitions_csv(const TransitionTable& t) {
  std::ostringstream os;
  os << "prev_sent,da,sent,count,log_prob\n";
  for (auto prev : kAllPrevSentiments)
    for (std::size_t k = 0; k < kDialogActCount; ++k) {
      const auto act = static_cast<DialogAct>(k);
      if (!t.probability(prev, act, Sentiment::Positive)) continue;
      for (auto s : kAllSentiments)
        os << prev_sentiment_name(prev) << ',' << dialog_act_code(act) << ',' << sentiment_name(s) << ','
           << t.count(prev, act, s) << ',' << format_log_prob(*t.log_probability(prev, act, s)) << '\n';
    }
  return os.str();
}

/// Long format for plotting: one panel per previous-sentiment condition.
inline std::string transitions_plot_csv(const TransitionTable& t) {
  std::ostringstream os;
  os << "panel,da,da_name,sent,prob,log_prob,support\n";
  for (auto prev : kAllPrevSentiments)
    for (std::size_t k = 0; k < kDialogActCount; ++k) {
      const auto act = static_cast<DialogAct>(k);
      for (auto s : kAllSentiments) {
        const auto p = t.probability(prev, act, s);
        if (!p) continue;
        os << "prev_" << prev_sentiment_name(prev) << ',' << dialog_act_code(act) << ',' << dialog_act_name(act) << ','
           << sentiment_name(s) << ',' << ad::format_double(*p) << ',' << format_log_prob(*t.log_probability(prev, act, s))
           << ',' << t.total(prev, act) << '\n';
      }
    }
  return os.str();
}

/// For each act after a polar post: how often the polarity is kept, flipped
/// or neutralized.
inline std::string polarity_csv(const TransitionTable& t) {
  std::ostringstream os;
  os << "da,prev_sent,n,keep,flip,neutral\n";
  for (std::size_t k = 0; k < kDialogActCount; ++k) {
    const auto act = static_cast<DialogAct>(k);
    for (auto [prev, same, other] : {std::tuple{PrevSentiment::Positive, Sentiment::Positive, Sentiment::Negative},
                                     std::tuple{PrevSentiment::Negative, Sentiment::Negative, Sentiment::Positive}}) {
      const std::size_t n = t.total(prev, act);
      if (n == 0) continue;
      const auto frac = [&](Sentiment s) { return ad::format_double(static_cast<double>(t.count(prev, act, s)) / static_cast<double>(n)); };
      os << dialog_act_code(act) << ',' << prev_sentiment_name(prev) << ',' << n << ',' << frac(same) << ','
         << frac(other) << ',' << frac(Sentiment::Neutral) << '\n';
    }
  }
  return os.str();
}

inline std::string positional_csv(const PositionalSentiment& p) {
  std::ostringstream os;
  os << "position,posts,positive,negative,neutral\n";
  auto row = [&](const std::string& name, std::size_t n, const SentimentDistribution& d) {
    os << name << ',' << n << ',' << ad::format_double(d[0]) << ',' << ad::format_double(d[1]) << ','
       << ad::format_double(d[2]) << '\n';
  };
  row("first", p.dialogs, p.first);
  for (std::size_t b = 0; b < kPositionBins; ++b)
    row("bin" + std::to_string(b * 10) + "-" + std::to_string(b * 10 + 10), p.bin_posts[b], p.bins[b]);
  row("last", p.dialogs, p.last);
  return os.str();
}

struct AnalysisOutput {
  TransitionTable transitions;
  ChangeRates rates;
  PositionalSentiment positions;
};

inline AnalysisOutput cmd_analyze(const fs::path& corpus, double alpha, const fs::path& out_dir, std::ostream& log) {
  const auto dialogs = load_dialogs(corpus.string(), "labeled");
  AnalysisOutput a{transition_log_probs(dialogs, alpha), change_rates(dialogs), positional_sentiment(dialogs)};
  RunDirectory run(out_dir, "analyze");
  run.write_config({{"corpus", corpus.string()}, {"alpha", ad::format_double(alpha)}});
  run.write("transitions.csv", transitions_csv(a.transitions));
  run.write("transitions_plot.csv", transitions_plot_csv(a.transitions));
  run.write("polarity.csv", polarity_csv(a.transitions));
  json rates{{"sentiment_change_rate", a.rates.sentiment},
             {"dialog_act_change_rate", a.rates.dialog_act},
             {"sentiment_pairs", a.rates.sentiment_pairs},
             {"dialog_act_pairs", a.rates.dialog_act_pairs}};
  run.write("change_rates.json", rates.dump(2) + "\n");
  run.write("positional.csv", positional_csv(a.positions));
  run.finish({{"dialogs", dialogs.size()}});
  log << "sentiment change rate " << ad::format_double(a.rates.sentiment) << ", dialog act change rate "
      << ad::format_double(a.rates.dialog_act) << '\n';
  return a;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckEntry {
  std::string name;
  ad::GradCheckResult result;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;

  const GradcheckEntry& worst() const {
    return *std::max_element(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      return a.result.max_rel_error < b.result.max_rel_error;
    });
  }
  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [&](const auto& e) { return e.result.passed(tolerance); });
  }
};

struct GradcheckOptions {
  double eps = 1e-3;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
  bool inject_fault = false;  // negative control: one op gets a wrong backward
  bool default_size_model = true;
};

namespace detail {

/// tanh whose backward drops the (1 - y^2) factor.
inline ad::Var faulty_tanh(ad::Var a) {
  ad::Tensor out = a.value();
  for (double& v : out.mutable_values()) v = std::tanh(v);
  const std::size_t ia = a.id();
  return a.tape().record("faulty_tanh", std::move(out), {a}, [ia](ad::Tape& t, std::size_t self) {
    const auto g = t.grad(self).values();
    auto ga = t.grad(ia).mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline ad::Tensor uniform_tensor(ad::Shape shape, Rng& rng, double margin = 0.0) {
  std::vector<double> v(shape.size());
  for (double& x : v) {
    do x = rng.uniform(-2.0, 2.0);
    while (std::abs(x) < margin);
  }
  return ad::Tensor(shape, std::move(v));
}

inline ad::Var projected(ad::Var out, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(out, out.tape().constant(uniform_tensor(out.shape(), rng))));
}

}  // namespace detail

/// Central-difference checks of every op and of the full model with dropout
/// disabled.
inline GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  using namespace ad;
  GradcheckReport report;
  report.tolerance = opt.tolerance;
  Rng rng(opt.seed);
  auto check = [&](const std::string& name, std::vector<Parameter> params, auto build, std::size_t max_coords = 0) {
    std::vector<Parameter*> ptrs;
    for (auto& p : params) ptrs.push_back(&p);
    report.entries.push_back({name, grad_check([&](Tape& t) { return build(t, params); }, ptrs, opt.eps, max_coords,
                                               opt.seed)});
  };
  auto P = [&](const char* n, Shape s, double margin = 0.0) { return Parameter(n, detail::uniform_tensor(s, rng, margin)); };

  check("matmul", {P("a", Shape{3, 4}), P("b", Shape{4, 2})},
        [](Tape& t, auto& ps) { return detail::projected(matmul(t.param(ps[0]), t.param(ps[1])), 1); });
  check("add", {P("a", Shape{2, 3}), P("b", Shape{2, 3})},
        [](Tape& t, auto& ps) { return detail::projected(add(t.param(ps[0]), t.param(ps[1])), 2); });
  check("add_bias", {P("a", Shape{2, 3}), P("b", Shape{3})},
        [](Tape& t, auto& ps) { return detail::projected(add(t.param(ps[0]), t.param(ps[1])), 3); });
  check("mul", {P("a", Shape{2, 3}), P("b", Shape{2, 3})},
        [](Tape& t, auto& ps) { return detail::projected(mul(t.param(ps[0]), t.param(ps[1])), 4); });
  check("scale", {P("a", Shape{2, 3})}, [](Tape& t, auto& ps) { return detail::projected(scale(t.param(ps[0]), -1.3), 5); });
  check("sum", {P("a", Shape{2, 3})}, [](Tape& t, auto& ps) { return sum(t.param(ps[0])); });
  check("sigmoid", {P("a", Shape{2, 4})}, [](Tape& t, auto& ps) { return detail::projected(sigmoid(t.param(ps[0])), 6); });
  check("tanh", {P("a", Shape{2, 4})}, [&](Tape& t, auto& ps) {
    return detail::projected(opt.inject_fault ? detail::faulty_tanh(t.param(ps[0])) : ad::tanh(t.param(ps[0])), 7);
  });
  check("relu", {P("a", Shape{2, 4}, 0.05)}, [](Tape& t, auto& ps) { return detail::projected(relu(t.param(ps[0])), 8); });
  check("concat_rows", {P("a", Shape{1, 3}), P("b", Shape{2, 3})},
        [](Tape& t, auto& ps) { return detail::projected(concat(t.param(ps[0]), t.param(ps[1]), 0), 9); });
  check("concat_cols", {P("a", Shape{2, 1}), P("b", Shape{2, 3})},
        [](Tape& t, auto& ps) { return detail::projected(concat(t.param(ps[0]), t.param(ps[1]), 1), 10); });
  check("embedding_lookup", {P("table", Shape{5, 3})}, [](Tape& t, auto& ps) {
    const int idx[] = {4, 1, 4};
    return detail::projected(embedding_lookup(t.param(ps[0]), idx), 11);
  });
  check("dropout", {P("a", Shape{2, 5})}, [](Tape& t, auto& ps) {
    Rng mask(12);  // same mask on every evaluation
    return detail::projected(dropout(t.param(ps[0]), 0.4, true, mask), 12);
  });
  check("softmax_cross_entropy", {P("logits", Shape{1, 15})},
        [](Tape& t, auto& ps) { return softmax_cross_entropy(t.param(ps[0]), 6); });

  auto model_check = [&](const std::string& name, ModelConfig mc, std::size_t max_coords) {
    mc.vocab_size = 6;
    mc.dropout_rate = 0.0;
    ModelParams params = ModelParams::initialize(mc, opt.seed);
    Rng brng = Rng::derive(opt.seed, 1);
    for (auto* q : params.parameters())
      if (q->value.shape().rank() == 1)
        for (double& v : q->value.mutable_values()) v += brng.uniform(-0.5, 0.5);
    const EncodedDialog dialog{{1, 2}, {3}};
    const LabeledPost gold0{"p0", std::nullopt, {"x"}, Sentiment::Negative, DialogAct::Q};
    const LabeledPost gold1{"p1", "p0", {"y"}, Sentiment::Positive, DialogAct::A};
    const std::vector<LabeledPost> gold{gold0, gold1};
    auto loss = [&](Tape& tape) {
      Network net(tape, params, Mode::Train, nullptr);
      return multitask_loss(net.forward(dialog), gold, {});
    };
    report.entries.push_back({name, grad_check(loss, params.parameters(), opt.eps, max_coords, opt.seed)});
  };
  ModelConfig small;
  small.embed_dim = 4;
  small.lstm_hidden = 3;
  small.dialog_hidden = 5;
  model_check("model_small", small, 0);
  if (opt.default_size_model) model_check("model_default_size", ModelConfig{}, 400);
  return report;
}

inline std::string gradcheck_table(const GradcheckReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "check" << std::setw(14) << "max_rel_err" << std::setw(8) << "coords"
     << "worst coordinate\n";
  for (const auto& e : r.entries)
    os << std::left << std::setw(24) << e.name << std::setw(14) << std::setprecision(3) << std::scientific
       << e.result.max_rel_error << std::setw(8) << e.result.checked << e.result.param << '[' << e.result.coordinate
       << "]" << (e.result.passed(r.tolerance) ? "" : "  FAIL") << '\n';
  const auto& w = r.worst();
  os << "worst: " << w.name << ' ' << w.result.param << '[' << w.result.coordinate << "] analytic "
     << ad::format_double(w.result.analytic) << " numeric " << ad::format_double(w.result.numeric) << '\n';
  os << (r.passed() ? "all checks below " : "some checks above ") << ad::format_double(r.tolerance) << '\n';
  return os.str();
}

}  // namespace dasent::cli
