#pragma once

// Corpus analyses relating sentiment and dialog acts: sentiment transition
// probabilities conditioned on the current act, label change rates, and
// sentiment by position in the dialog. Also a generator for synthetic corpora
// whose labels follow a known coupled transition model.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dasent/corpus.hpp"
#include "dasent/errors.hpp"
#include "dasent/rng.hpp"

namespace dasent {

/// Previous-sentiment condition; Start marks the first post of a dialog.
enum class PrevSentiment : std::uint8_t { Start, Positive, Negative, Neutral };

inline constexpr std::size_t kPrevSentimentCount = 4;
inline constexpr std::array<PrevSentiment, kPrevSentimentCount> kAllPrevSentiments{
    PrevSentiment::Start, PrevSentiment::Positive, PrevSentiment::Negative, PrevSentiment::Neutral};

inline constexpr PrevSentiment as_prev(Sentiment s) { return static_cast<PrevSentiment>(static_cast<int>(s) + 1); }

inline constexpr std::string_view prev_sentiment_name(PrevSentiment p) {
  constexpr std::string_view names[] = {"START", "positive", "negative", "neutral"};
  return names[static_cast<std::size_t>(p)];
}

/// Counts of (previous sentiment, current act, current sentiment) with
/// additive smoothing: p = (count + alpha) / (total + 3 alpha).
class TransitionTable {
 public:
  explicit TransitionTable(double alpha = 0.0) : alpha_(alpha) {
    if (!(alpha >= 0.0)) throw std::invalid_argument("smoothing alpha must be >= 0");
  }

  double alpha() const { return alpha_; }

  void add(PrevSentiment prev, DialogAct act, Sentiment s, std::size_t n = 1) { counts_[slot(prev, act, s)] += n; }

  std::size_t count(PrevSentiment prev, DialogAct act, Sentiment s) const { return counts_[slot(prev, act, s)]; }

  std::size_t total(PrevSentiment prev, DialogAct act) const {
    std::size_t n = 0;
    for (Sentiment s : kAllSentiments) n += count(prev, act, s);
    return n;
  }

  /// nullopt when the condition has no mass (no data and alpha = 0).
  std::optional<double> probability(PrevSentiment prev, DialogAct act, Sentiment s) const {
    const double denom = static_cast<double>(total(prev, act)) + 3.0 * alpha_;
    if (denom <= 0.0) return std::nullopt;
    return (static_cast<double>(count(prev, act, s)) + alpha_) / denom;
  }

  /// Natural log; -inf for an unseen outcome of an observed condition.
  std::optional<double> log_probability(PrevSentiment prev, DialogAct act, Sentiment s) const {
    const auto p = probability(prev, act, s);
    if (!p) return std::nullopt;
    return *p > 0.0 ? std::log(*p) : -std::numeric_limits<double>::infinity();
  }

  friend bool operator==(const TransitionTable&, const TransitionTable&) = default;

 private:
  static std::size_t slot(PrevSentiment prev, DialogAct act, Sentiment s) {
    return (static_cast<std::size_t>(prev) * kDialogActCount + static_cast<std::size_t>(act)) * kSentimentCount +
           static_cast<std::size_t>(s);
  }

  double alpha_;
  std::array<std::size_t, kPrevSentimentCount * kDialogActCount * kSentimentCount> counts_{};
};

inline TransitionTable transition_log_probs(std::span<const LinearDialog> dialogs, double alpha = 0.0) {
  TransitionTable table(alpha);
  for (const auto& d : dialogs) {
    PrevSentiment prev = PrevSentiment::Start;
    for (const auto& p : d.posts) {
      if (!p.sentiment || !p.dialog_act)
        throw DataError("transition_log_probs: post " + p.post_id + " in " + d.branch_id() + " is not fully labeled");
      table.add(prev, *p.dialog_act, *p.sentiment);
      prev = as_prev(*p.sentiment);
    }
  }
  return table;
}

struct ChangeRates {
  double sentiment = 0.0;
  double dialog_act = 0.0;
  std::size_t sentiment_pairs = 0;
  std::size_t dialog_act_pairs = 0;
};

/// Fraction of adjacent post pairs whose label differs, per task. Pairs
/// missing either label are skipped.
inline ChangeRates change_rates(std::span<const LinearDialog> dialogs) {
  ChangeRates r;
  std::size_t s_changes = 0, d_changes = 0;
  for (const auto& d : dialogs)
    for (std::size_t t = 1; t < d.posts.size(); ++t) {
      const auto& a = d.posts[t - 1];
      const auto& b = d.posts[t];
      if (a.sentiment && b.sentiment) {
        ++r.sentiment_pairs;
        s_changes += *a.sentiment != *b.sentiment;
      }
      if (a.dialog_act && b.dialog_act) {
        ++r.dialog_act_pairs;
        d_changes += *a.dialog_act != *b.dialog_act;
      }
    }
  if (r.sentiment_pairs) r.sentiment = static_cast<double>(s_changes) / static_cast<double>(r.sentiment_pairs);
  if (r.dialog_act_pairs) r.dialog_act = static_cast<double>(d_changes) / static_cast<double>(r.dialog_act_pairs);
  return r;
}

inline constexpr std::size_t kPositionBins = 10;

using SentimentDistribution = std::array<double, kSentimentCount>;

struct PositionalSentiment {
  SentimentDistribution first{};
  SentimentDistribution last{};
  std::array<SentimentDistribution, kPositionBins> bins{};
  std::array<std::size_t, kPositionBins> bin_posts{};
  std::size_t dialogs = 0;
};

/// Sentiment distribution of the first and last post of each dialog, and of
/// all posts by relative position t/(n-1) in 10% bins (single-post dialogs
/// fall in bin 0). Unlabeled posts are skipped.
inline PositionalSentiment positional_sentiment(std::span<const LinearDialog> dialogs) {
  PositionalSentiment r;
  std::array<std::size_t, kSentimentCount> first{}, last{};
  std::array<std::array<std::size_t, kSentimentCount>, kPositionBins> bins{};
  for (const auto& d : dialogs) {
    if (d.posts.empty()) continue;
    ++r.dialogs;
    if (d.posts.front().sentiment) ++first[static_cast<std::size_t>(*d.posts.front().sentiment)];
    if (d.posts.back().sentiment) ++last[static_cast<std::size_t>(*d.posts.back().sentiment)];
    const std::size_t n = d.posts.size();
    for (std::size_t t = 0; t < n; ++t) {
      if (!d.posts[t].sentiment) continue;
      const double rel = n > 1 ? static_cast<double>(t) / static_cast<double>(n - 1) : 0.0;
      const std::size_t bin = std::min(kPositionBins - 1, static_cast<std::size_t>(rel * kPositionBins));
      ++bins[bin][static_cast<std::size_t>(*d.posts[t].sentiment)];
    }
  }
  auto normalize = [](const std::array<std::size_t, kSentimentCount>& c, SentimentDistribution& out) {
    std::size_t n = 0;
    for (auto v : c) n += v;
    for (std::size_t i = 0; i < kSentimentCount; ++i)
      out[i] = n ? static_cast<double>(c[i]) / static_cast<double>(n) : 0.0;
    return n;
  };
  normalize(first, r.first);
  normalize(last, r.last);
  for (std::size_t b = 0; b < kPositionBins; ++b) r.bin_posts[b] = normalize(bins[b], r.bins[b]);
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

/// Generative model for labeled dialog trees. Along every root-to-leaf path
/// dialog acts follow a first-order Markov chain and each sentiment is drawn
/// from p(s_t | d_t, s_{t-1}). Each token comes from the current act's word
/// pool, the current sentiment's word pool, or a shared noise pool.
struct CoupledCorpusModel {
  std::vector<DialogAct> acts;
  std::vector<double> initial_act;                     // over `acts`
  std::vector<std::vector<double>> act_transition;     // [prev act][next act]
  std::vector<std::array<SentimentDistribution, kPrevSentimentCount>> sentiment;  // [act][prev][s]

  std::size_t min_posts = 2;
  std::size_t max_posts = 7;
  double branch_probability = 0.0;  // chance a non-root post gets an extra sibling branch

  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;
  std::size_t act_words = 30;
  std::size_t sentiment_words = 30;
  std::size_t noise_words = 60;
  double act_word_rate = 0.35;
  double sentiment_word_rate = 0.25;

  std::size_t act_index(DialogAct d) const {
    for (std::size_t i = 0; i < acts.size(); ++i)
      if (acts[i] == d) return i;
    throw std::out_of_range("act not in model");
  }

  double sentiment_probability(PrevSentiment prev, DialogAct act, Sentiment s) const {
    return sentiment[act_index(act)][static_cast<std::size_t>(prev)][static_cast<std::size_t>(s)];
  }

  void validate() const {
    const std::size_t k = acts.size();
    if (k == 0 || initial_act.size() != k || act_transition.size() != k || sentiment.size() != k)
      throw ValidationError("coupled corpus model: inconsistent act tables");
    if (min_posts < 1 || max_posts < min_posts || min_tokens < 1 || max_tokens < min_tokens)
      throw ValidationError("coupled corpus model: bad length ranges");
  }

  /// Six acts whose sentiment is largely set by the act, with agreements
  /// carrying the previous sentiment over and disagreements flipping it.
  static CoupledCorpusModel standard() {
    using DA = DialogAct;
    CoupledCorpusModel m;
    m.acts = {DA::I, DA::Q, DA::W, DA::A, DA::D, DA::T};
    m.initial_act = {0.55, 0.35, 0.0, 0.0, 0.0, 0.10};
    //                      I     Q     W     A     D     T
    m.act_transition = {{0.30, 0.20, 0.05, 0.20, 0.20, 0.05},   // after I
                         {0.10, 0.10, 0.70, 0.02, 0.03, 0.05},  // after Q
                         {0.25, 0.15, 0.05, 0.25, 0.20, 0.10},  // after W
                         {0.35, 0.15, 0.05, 0.15, 0.10, 0.20},  // after A
                         {0.30, 0.15, 0.05, 0.10, 0.35, 0.05},  // after D
                         {0.30, 0.20, 0.05, 0.25, 0.05, 0.15}}; // after T
    constexpr std::size_t pos = 0, neg = 1, neu = 2;
    // Mixture: keep (or flip) the previous sentiment, jump to the act's
    // preferred sentiment, or draw uniformly.
    auto table = [](std::size_t preferred, double p_pref, double p_prev, bool flip) {
      std::array<SentimentDistribution, kPrevSentimentCount> t{};
      for (std::size_t prev = 0; prev < kPrevSentimentCount; ++prev) {
        const double uniform = (1.0 - p_pref - p_prev) / 3.0;
        SentimentDistribution d{uniform, uniform, uniform};
        d[preferred] += p_pref;
        if (prev == 0) {
          d[preferred] += p_prev;
        } else {
          std::size_t carried = prev - 1;
          if (flip) carried = carried == pos ? neg : (carried == neg ? pos : neg);
          d[carried] += p_prev;
        }
        t[prev] = d;
      }
      return t;
    };
    m.sentiment = {table(neu, 0.55, 0.25, false),   // I
                   table(neu, 0.75, 0.10, false),   // Q
                   table(neg, 0.45, 0.35, false),   // W
                   table(pos, 0.30, 0.60, false),   // A
                   table(neg, 0.40, 0.50, true),    // D
                   table(pos, 0.85, 0.05, false)};  // T
    return m;
  }
};

namespace detail {

inline std::string synth_word(char kind, std::size_t group, std::size_t i) {
  return std::string(1, kind) + std::to_string(group) + "_" + std::to_string(i);
}

}  // namespace detail

/// Draws `n_trees` dialog trees from `model`. Post ids are unique across the
/// corpus: <prefix><tree>_<post>.
inline std::vector<DialogTree> generate_corpus(const CoupledCorpusModel& model, std::size_t n_trees,
                                               std::uint64_t seed, const std::string& prefix = "syn") {
  model.validate();
  Rng rng(seed);
  std::vector<DialogTree> trees;
  trees.reserve(n_trees);
  const double noise_rate = std::max(0.0, 1.0 - model.act_word_rate - model.sentiment_word_rate);
  const std::array<double, 3> source_weights{model.act_word_rate, model.sentiment_word_rate, noise_rate};

  for (std::size_t t = 0; t < n_trees; ++t) {
    const std::string tree_id = prefix + std::to_string(t);
    std::vector<LabeledPost> posts;
    struct State {
      std::size_t act;
      Sentiment sentiment;
    };
    std::vector<State> states;

    auto make_post = [&](std::optional<std::size_t> parent) {
      std::size_t act;
      PrevSentiment prev = PrevSentiment::Start;
      if (parent) {
        act = rng.categorical(model.act_transition[states[*parent].act]);
        prev = as_prev(states[*parent].sentiment);
      } else {
        act = rng.categorical(model.initial_act);
      }
      const auto& dist = model.sentiment[act][static_cast<std::size_t>(prev)];
      const auto s = static_cast<Sentiment>(rng.categorical(dist));
      LabeledPost p;
      p.post_id = tree_id + "_" + std::to_string(posts.size());
      if (parent) p.reply_to = posts[*parent].post_id;
      p.sentiment = s;
      p.dialog_act = model.acts[act];
      const std::size_t n_tokens = model.min_tokens + rng.below(model.max_tokens - model.min_tokens + 1);
      for (std::size_t k = 0; k < n_tokens; ++k) {
        switch (rng.categorical(source_weights)) {
          case 0: p.tokens.push_back(detail::synth_word('a', act, rng.below(model.act_words))); break;
          case 1:
            p.tokens.push_back(detail::synth_word('s', static_cast<std::size_t>(s), rng.below(model.sentiment_words)));
            break;
          default: p.tokens.push_back(detail::synth_word('n', 0, rng.below(model.noise_words))); break;
        }
      }
      posts.push_back(std::move(p));
      states.push_back({act, s});
      return posts.size() - 1;
    };

    const std::size_t length = model.min_posts + rng.below(model.max_posts - model.min_posts + 1);
    std::vector<std::size_t> chain{make_post(std::nullopt)};
    for (std::size_t i = 1; i < length; ++i) chain.push_back(make_post(chain.back()));
    // Side branches hang off the main chain and continue as chains.
    for (std::size_t i = 1; i < chain.size(); ++i) {
      if (!rng.bernoulli(model.branch_probability)) continue;
      std::size_t node = make_post(chain[i - 1]);
      const std::size_t extra = rng.below(length - i);
      for (std::size_t k = 0; k < extra; ++k) node = make_post(node);
    }
    trees.emplace_back(tree_id, std::move(posts));
  }
  return trees;
}

}  // namespace dasent
