#pragma once

// Multi-task training with per-task label masking, model selection over a
// learning-rate grid and random restarts, k-fold cross-validation, and the
// label-budget transfer experiments.

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dasent/autodiff.hpp"
#include "dasent/corpus.hpp"
#include "dasent/errors.hpp"
#include "dasent/metrics.hpp"
#include "dasent/model.hpp"
#include "dasent/rng.hpp"

namespace dasent {

enum class TargetTask { Sentiment, DialogAct, Joint };

inline std::string_view target_name(TargetTask t) {
  switch (t) {
    case TargetTask::Sentiment: return "sentiment";
    case TargetTask::DialogAct: return "dialog_act";
    case TargetTask::Joint: return "joint";
  }
  return "?";
}

inline TargetTask parse_target(std::string_view s) {
  if (s == "sentiment") return TargetTask::Sentiment;
  if (s == "dialog_act" || s == "dialog-act") return TargetTask::DialogAct;
  if (s == "joint") return TargetTask::Joint;
  throw UsageError("unknown target task '" + std::string(s) + "'");
}

enum class Regime { BothRich, SentimentPoor, DialogActPoor, BothPoor, MonoTask };

inline std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::BothRich: return "both-rich";
    case Regime::SentimentPoor: return "sentiment-poor";
    case Regime::DialogActPoor: return "dialog-act-poor";
    case Regime::BothPoor: return "both-poor";
    case Regime::MonoTask: return "mono-task";
  }
  return "?";
}

inline Regime parse_regime(std::string_view s) {
  for (Regime r : {Regime::BothRich, Regime::SentimentPoor, Regime::DialogActPoor, Regime::BothPoor, Regime::MonoTask})
    if (s == regime_name(r)) return r;
  throw UsageError("unknown regime '" + std::string(s) + "'");
}

struct LossWeights {
  double sentiment = 1.0;
  double dialog_act = 1.0;
};

struct TrainConfig {
  std::vector<double> lr_grid{0.1, 0.01, 0.001};
  int max_epochs = 500;
  int restarts = 2;
  std::uint64_t seed = 1;
  TargetTask target = TargetTask::Sentiment;
  LossWeights loss_weights;
  std::size_t jobs = 1;
  double divergence_threshold = 1e6;

  void validate() const {
    if (lr_grid.empty()) throw ValidationError("lr_grid must not be empty");
    for (double lr : lr_grid)
      if (!(lr > 0.0)) throw ValidationError("learning rates must be positive");
    if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    if (restarts < 1) throw ValidationError("restarts must be >= 1");
    if (loss_weights.sentiment < 0 || loss_weights.dialog_act < 0) throw ValidationError("loss weights must be >= 0");
  }
};

/// Sum over posts of the weighted cross-entropies of whichever gold labels
/// are present. A post missing a label contributes nothing for that task.
inline ad::Var multitask_loss(const DialogOutputs& out, std::span<const LabeledPost> gold, LossWeights w) {
  if (out.sentiment_logits.size() != gold.size() || out.dialog_act_logits.size() != gold.size())
    throw ValidationError("multitask_loss: " + std::to_string(out.sentiment_logits.size()) + " outputs for " +
                          std::to_string(gold.size()) + " posts");
  if (gold.empty()) throw ValidationError("multitask_loss: empty dialog");
  ad::Tape& tape = out.sentiment_logits.front().tape();
  std::optional<ad::Var> total;
  auto accumulate = [&](ad::Var term, double weight) {
    if (weight != 1.0) term = ad::scale(term, weight);
    total = total ? ad::add(*total, term) : term;
  };
  for (std::size_t t = 0; t < gold.size(); ++t) {
    if (gold[t].sentiment && w.sentiment > 0)
      accumulate(ad::softmax_cross_entropy(out.sentiment_logits[t], static_cast<std::size_t>(*gold[t].sentiment)),
                 w.sentiment);
    if (gold[t].dialog_act && w.dialog_act > 0)
      accumulate(
          ad::softmax_cross_entropy(out.dialog_act_logits[t], static_cast<std::size_t>(*gold[t].dialog_act)),
          w.dialog_act);
  }
  return total ? *total : tape.constant(ad::Tensor::scalar(0.0));
}

inline bool has_trainable_label(const LinearDialog& d, LossWeights w) {
  for (const auto& p : d.posts)
    if ((p.sentiment && w.sentiment > 0) || (p.dialog_act && w.dialog_act > 0)) return true;
  return false;
}

/// Scores every (dialog, post) occurrence that carries a gold label.
inline TaskConfusions evaluate(const ModelParams& params, std::span<const LinearDialog> dialogs,
                               std::span<const EncodedDialog> encoded) {
  TaskConfusions cm;
  for (std::size_t i = 0; i < dialogs.size(); ++i) {
    const auto preds = predict(params, encoded[i]);
    for (std::size_t t = 0; t < preds.size(); ++t) cm.add(dialogs[i].posts[t], preds[t].sentiment, preds[t].dialog_act);
  }
  return cm;
}

inline TaskConfusions evaluate(const ModelParams& params, std::span<const LinearDialog> dialogs, const Vocabulary& vocab) {
  std::vector<EncodedDialog> enc;
  for (const auto& d : dialogs) enc.push_back(encode_dialog(d, vocab));
  return evaluate(params, dialogs, enc);
}

inline double target_metric(const TaskConfusions& cm, TargetTask t) {
  switch (t) {
    case TargetTask::Sentiment: return cm.sentiment_f1();
    case TargetTask::DialogAct: return cm.dialog_act_f1();
    case TargetTask::Joint: return 0.5 * (cm.sentiment_f1() + cm.dialog_act_f1());
  }
  return 0.0;
}

/// One (learning rate, restart) training run.
struct RunTrace {
  double lr = 0.0;
  int restart = 0;
  bool diverged = false;
  std::string failure;
  int epochs_run = 0;
  int best_epoch = 0;  // 1-based; 0 when nothing was kept
  double best_dev = -std::numeric_limits<double>::infinity();
  std::vector<double> train_loss;  // mean per-dialog loss, per epoch
  std::vector<double> dev_metric;  // per epoch
};

struct RunReport {
  std::string regime = std::string(regime_name(Regime::BothRich));
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  TargetTask target = TargetTask::Sentiment;
  double lr = 0.0;
  int restart = 0;
  int epoch = 0;
  double dev_metric = 0.0;
  std::size_t train_dialogs = 0;
  std::size_t dev_dialogs = 0;
  std::size_t runs_executed = 0;
  std::size_t runs_diverged = 0;
  std::optional<double> test_sentiment_f1;
  std::optional<double> test_dialog_act_f1;

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

struct FitResult {
  ModelParams params;
  RunReport report;
  std::vector<RunTrace> runs;
};

namespace detail {

inline constexpr std::uint64_t kInitStream = 0x1000;
inline constexpr std::uint64_t kShuffleStream = 0x2000;
inline constexpr std::uint64_t kBudgetStream = 0x3000;
inline constexpr std::uint64_t kFoldStream = 0x4000;

struct RunOutcome {
  RunTrace trace;
  std::optional<ModelParams> best;
  bool cancelled = false;
};

/// `cancel_after` holds the grid index of the earliest run known to reach a
/// perfect dev score; a run with a larger index can never be selected and
/// stops at the next epoch boundary.
inline RunOutcome train_run(std::span<const LinearDialog> train, std::span<const EncodedDialog> train_enc,
                            std::span<const LinearDialog> dev, std::span<const EncodedDialog> dev_enc,
                            const ModelConfig& mcfg, const TrainConfig& cfg, double lr, int restart,
                            std::size_t index = 0, const std::atomic<std::size_t>* cancel_after = nullptr) {
  RunOutcome out;
  out.trace.lr = lr;
  out.trace.restart = restart;
  // Initialization and shuffling depend on the restart only, so every
  // learning rate starts from the same weights.
  const std::uint64_t init_seed = Rng::derive(cfg.seed, detail::kInitStream + static_cast<std::uint64_t>(restart)).next();
  Rng rng = Rng::derive(cfg.seed, detail::kShuffleStream + static_cast<std::uint64_t>(restart));
  ModelParams params = ModelParams::initialize(mcfg, init_seed);
  const auto plist = params.parameters();

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (has_trainable_label(train[i], cfg.loss_weights)) order.push_back(i);

  try {
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      if (cancel_after && cancel_after->load() < index) {
        out.cancelled = true;
        return out;
      }
      rng.shuffle(std::span<std::size_t>(order));
      double loss_sum = 0.0;
      for (std::size_t i : order) {
        ad::Tape tape;
        Network net(tape, params, Mode::Train, &rng);
        const auto outputs = net.forward(train_enc[i]);
        const ad::Var loss = multitask_loss(outputs, train[i].posts, cfg.loss_weights);
        const double value = loss.value().item();
        if (!(value <= cfg.divergence_threshold))
          throw NumericError("loss " + ad::format_double(value) + " above divergence threshold");
        loss_sum += value;
        tape.backward(loss);
        ad::sgd_step(plist, lr);
      }
      out.trace.epochs_run = epoch;
      out.trace.train_loss.push_back(order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size()));
      const double metric = target_metric(evaluate(params, dev, dev_enc), cfg.target);
      out.trace.dev_metric.push_back(metric);
      if (metric > out.trace.best_dev) {
        out.trace.best_dev = metric;
        out.trace.best_epoch = epoch;
        out.best = params;
      }
      // Later epochs could at best tie a perfect score, and ties keep the
      // earliest epoch, so stopping here selects the same checkpoint.
      if (metric >= 1.0) break;
    }
  } catch (const NumericError& e) {
    out.trace.diverged = true;
    out.trace.failure = e.what();
    out.best.reset();
  }
  return out;
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t w = 0; w < std::min(jobs, n); ++w)
    workers.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : workers) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

/// Trains one run per (learning rate, restart), tracks the dev target metric
/// after every epoch and keeps the best (lr, restart, epoch). Ties go to the
/// earlier learning rate in the grid, then the earlier restart, then the
/// earlier epoch. Runs that diverge are discarded.
inline FitResult fit(std::span<const LinearDialog> train, std::span<const LinearDialog> dev, const Vocabulary& vocab,
                     const ModelConfig& model_config, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ValidationError("fit: empty training set");
  if (dev.empty()) throw ValidationError("fit: empty development set");
  ModelConfig mcfg = model_config;
  mcfg.vocab_size = vocab.size();
  mcfg.validate();

  std::vector<EncodedDialog> train_enc, dev_enc;
  for (const auto& d : train) train_enc.push_back(encode_dialog(d, vocab));
  for (const auto& d : dev) dev_enc.push_back(encode_dialog(d, vocab));

  const std::size_t n_runs = cfg.lr_grid.size() * static_cast<std::size_t>(cfg.restarts);
  std::vector<detail::RunOutcome> outcomes(n_runs);
  // Once a run scores a perfect dev metric, later runs in grid order could at
  // best tie it and lose the tie, so they are skipped. Which runs count as
  // executed is fixed afterwards from the grid order alone, so the result does
  // not depend on `jobs`.
  std::atomic<std::size_t> first_perfect{n_runs};
  detail::parallel_for(n_runs, cfg.jobs, [&](std::size_t k) {
    const double lr = cfg.lr_grid[k / static_cast<std::size_t>(cfg.restarts)];
    const int restart = static_cast<int>(k % static_cast<std::size_t>(cfg.restarts));
    outcomes[k] = detail::train_run(train, train_enc, dev, dev_enc, mcfg, cfg, lr, restart, k, &first_perfect);
    if (!outcomes[k].cancelled && !outcomes[k].trace.diverged && outcomes[k].trace.best_dev >= 1.0) {
      std::size_t cur = first_perfect.load();
      while (k < cur && !first_perfect.compare_exchange_weak(cur, k)) {
      }
    }
  });
  const std::size_t executed = std::min(n_runs, first_perfect.load() + 1);
  outcomes.resize(executed);

  std::optional<std::size_t> best;
  std::size_t diverged = 0;
  for (std::size_t k = 0; k < executed; ++k) {
    if (outcomes[k].trace.diverged || !outcomes[k].best) {
      ++diverged;
      continue;
    }
    if (!best || outcomes[k].trace.best_dev > outcomes[*best].trace.best_dev) best = k;
  }
  if (!best) throw NumericError("all " + std::to_string(executed) + " training runs diverged");

  const RunTrace& winner = outcomes[*best].trace;
  RunReport report;
  report.seed = cfg.seed;
  report.target = cfg.target;
  report.lr = winner.lr;
  report.restart = winner.restart;
  report.epoch = winner.best_epoch;
  report.dev_metric = winner.best_dev;
  report.train_dialogs = train.size();
  report.dev_dialogs = dev.size();
  report.runs_executed = executed;
  report.runs_diverged = diverged;

  std::vector<RunTrace> traces;
  for (auto& o : outcomes) traces.push_back(std::move(o.trace));
  return FitResult{std::move(*outcomes[*best].best), report, std::move(traces)};
}

inline void attach_test_metrics(RunReport& report, const ModelParams& params, std::span<const LinearDialog> test,
                                const Vocabulary& vocab) {
  const auto cm = evaluate(params, test, vocab);
  report.test_sentiment_f1 = cm.sentiment_f1();
  report.test_dialog_act_f1 = cm.dialog_act_f1();
}

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldResult {
  std::size_t fold = 0;
  std::size_t train_size = 0;
  std::size_t dev_size = 0;
  RunReport report;
};

struct CrossValidationReport {
  std::vector<FoldResult> folds;
  double mean_dev_metric = 0.0;
  double mean_dev_size = 0.0;
};

/// Each tree-level fold serves once as the development set; the vocabulary is
/// rebuilt from each fold's training part.
inline CrossValidationReport cross_validate(std::span<const LinearDialog> dialogs, std::size_t folds,
                                            const ModelConfig& model_config, const TrainConfig& cfg,
                                            int min_count = 1) {
  if (dialogs.size() < folds)
    throw ValidationError("cross_validate: " + std::to_string(dialogs.size()) + " dialogs for " +
                          std::to_string(folds) + " folds");
  const auto parts = make_folds(dialogs, folds, Rng::derive(cfg.seed, detail::kFoldStream).next());
  CrossValidationReport out;
  for (std::size_t f = 0; f < parts.size(); ++f) {
    std::vector<LinearDialog> train, dev;
    std::vector<char> in_dev(dialogs.size(), 0);
    for (std::size_t i : parts[f]) in_dev[i] = 1;
    for (std::size_t i = 0; i < dialogs.size(); ++i) (in_dev[i] ? dev : train).push_back(dialogs[i]);
    const Vocabulary vocab = build_vocabulary(train, min_count);
    FitResult r = fit(train, dev, vocab, model_config, cfg);
    out.folds.push_back({f, train.size(), dev.size(), r.report});
    out.mean_dev_metric += r.report.dev_metric;
    out.mean_dev_size += static_cast<double>(dev.size());
  }
  out.mean_dev_metric /= static_cast<double>(parts.size());
  out.mean_dev_size /= static_cast<double>(parts.size());
  return out;
}

// ---------------------------------------------------------------------------
// Label budgets and transfer experiments

inline constexpr std::size_t kPoorTaskCap = 38;

/// Number of dialogs (from the front of the budget order) that keep each
/// task's labels. nullopt = all selected dialogs.
struct Budget {
  std::optional<std::size_t> sentiment_dialogs;
  std::optional<std::size_t> dialog_act_dialogs;
};

inline Budget regime_budget(Regime r, std::size_t cap = kPoorTaskCap) {
  Budget b;
  if (r == Regime::SentimentPoor || r == Regime::BothPoor) b.sentiment_dialogs = cap;
  if (r == Regime::DialogActPoor || r == Regime::BothPoor) b.dialog_act_dialogs = cap;
  return b;
}

struct BudgetedCorpus {
  std::vector<LinearDialog> train;
  std::vector<LinearDialog> dev;
  std::size_t selected = 0;
  std::size_t sentiment_labeled = 0;   // dialogs keeping sentiment labels
  std::size_t dialog_act_labeled = 0;  // dialogs keeping dialog-act labels
};

/// Orders the pool by seeded-shuffled tree (branches of a tree stay
/// contiguous), keeps the first `size` dialogs, and strips each task's labels
/// past its budget so withheld labels are physically absent. The development
/// set is one tree-level fold of the dialogs labeled for both tasks; when that
/// prefix holds a single tree it doubles as the training data.
inline BudgetedCorpus make_budgeted_corpus(std::span<const LinearDialog> pool, std::size_t size, Budget budget,
                                           std::uint64_t seed, std::size_t dev_folds = 10) {
  if (size == 0) throw ValidationError("budget must be >= 1 dialog");
  if (size > pool.size())
    throw ValidationError("budget " + std::to_string(size) + " exceeds the " + std::to_string(pool.size()) +
                          " available dialogs");
  std::vector<std::string> tree_order;
  std::unordered_map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    auto [it, fresh] = members.try_emplace(pool[i].tree_id);
    if (fresh) tree_order.push_back(pool[i].tree_id);
    it->second.push_back(i);
  }
  Rng rng = Rng::derive(seed, detail::kBudgetStream);
  rng.shuffle(std::span<std::string>(tree_order));
  std::vector<LinearDialog> selected;
  for (const auto& tid : tree_order)
    for (std::size_t i : members.at(tid))
      if (selected.size() < size) selected.push_back(pool[i]);

  BudgetedCorpus out;
  out.selected = size;
  out.sentiment_labeled = std::min(size, budget.sentiment_dialogs.value_or(size));
  out.dialog_act_labeled = std::min(size, budget.dialog_act_dialogs.value_or(size));
  for (std::size_t i = 0; i < selected.size(); ++i)
    for (auto& p : selected[i].posts) {
      if (i >= out.sentiment_labeled) p.sentiment.reset();
      if (i >= out.dialog_act_labeled) p.dialog_act.reset();
    }

  const std::size_t labeled = std::max<std::size_t>(1, std::min(out.sentiment_labeled, out.dialog_act_labeled));
  const std::span<const LinearDialog> prefix(selected.data(), labeled);
  std::unordered_set<std::string> prefix_trees;
  for (const auto& d : prefix) prefix_trees.insert(d.tree_id);
  if (prefix_trees.size() < 2) {
    out.dev.assign(prefix.begin(), prefix.end());
    out.train = std::move(selected);
    return out;
  }
  const auto folds = make_folds(prefix, std::min(dev_folds, prefix_trees.size()), rng.next());
  std::unordered_set<std::string> dev_trees;
  for (std::size_t i : folds.front()) {
    out.dev.push_back(prefix[i]);
    dev_trees.insert(prefix[i].tree_id);
  }
  for (auto& d : selected)
    if (!dev_trees.count(d.tree_id)) out.train.push_back(std::move(d));
  return out;
}

/// Training-set sizes of the learning curves.
inline const std::vector<std::size_t>& default_budget_curve() {
  static const std::vector<std::size_t> curve{1, 10, 50, 100, 150, 200, 239};
  return curve;
}

struct TransferOptions {
  std::size_t poor_cap = kPoorTaskCap;
  std::size_t dev_folds = 10;
  int min_count = 1;
};

/// Trains one model per budget point under `regime` and scores it once on
/// `test`. Mono-task zeroes the loss weight of the task that is not the
/// target.
inline std::vector<RunReport> transfer_experiment(std::span<const LinearDialog> pool, std::span<const LinearDialog> test,
                                                  Regime regime, std::span<const std::size_t> budgets,
                                                  const ModelConfig& model_config, TrainConfig cfg,
                                                  const TransferOptions& opt = {}) {
  if (!std::is_sorted(budgets.begin(), budgets.end())) throw ValidationError("budget curve must be ascending");
  if (regime == Regime::MonoTask) {
    if (cfg.target == TargetTask::Joint) throw ValidationError("mono-task needs a single target task");
    (cfg.target == TargetTask::Sentiment ? cfg.loss_weights.dialog_act : cfg.loss_weights.sentiment) = 0.0;
  }
  const Budget budget = regime_budget(regime, opt.poor_cap);
  std::vector<RunReport> reports;
  for (std::size_t b : budgets) {
    const BudgetedCorpus corpus = make_budgeted_corpus(pool, b, budget, cfg.seed, opt.dev_folds);
    const Vocabulary vocab = build_vocabulary(corpus.train, opt.min_count);
    FitResult r = fit(corpus.train, corpus.dev, vocab, model_config, cfg);
    r.report.regime = std::string(regime_name(regime));
    r.report.budget = b;
    attach_test_metrics(r.report, r.params, test, vocab);
    reports.push_back(r.report);
  }
  return reports;
}

inline void write_curve_csv(std::ostream& os, std::span<const RunReport> reports, bool header = true) {
  if (header) os << "regime,budget,seed,lr,epoch,sent_f1,da_f1\n";
  for (const auto& r : reports)
    os << r.regime << ',' << r.budget << ',' << r.seed << ',' << ad::format_double(r.lr) << ',' << r.epoch << ','
       << ad::format_double(r.test_sentiment_f1.value_or(0.0)) << ','
       << ad::format_double(r.test_dialog_act_f1.value_or(0.0)) << '\n';
}

}  // namespace dasent
