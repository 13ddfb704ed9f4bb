#pragma once

// Evaluation metrics: per-class precision/recall/F1, sentiment macro-F1 over
// the positive and negative classes, prevalence-weighted dialog-act F1, and
// Cohen's kappa.

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dasent/corpus.hpp"
#include "dasent/errors.hpp"

namespace dasent {

/// Rows are gold labels, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {}

  std::size_t classes() const { return k_; }

  void add(std::size_t gold, std::size_t predicted, std::size_t n = 1) {
    if (gold >= k_ || predicted >= k_) throw std::out_of_range("confusion matrix label out of range");
    counts_[gold * k_ + predicted] += n;
  }

  std::size_t at(std::size_t gold, std::size_t predicted) const { return counts_[gold * k_ + predicted]; }

  std::size_t row_sum(std::size_t gold) const {
    std::size_t s = 0;
    for (std::size_t j = 0; j < k_; ++j) s += at(gold, j);
    return s;
  }

  std::size_t col_sum(std::size_t predicted) const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < k_; ++i) s += at(i, predicted);
    return s;
  }

  std::size_t total() const {
    std::size_t s = 0;
    for (std::size_t c : counts_) s += c;
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

/// 0/0 is scored as 0 for precision, recall and F1.
inline std::vector<ClassScores> f1_per_class(const ConfusionMatrix& cm) {
  std::vector<ClassScores> out(cm.classes());
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const auto tp = static_cast<double>(cm.at(k, k));
    const std::size_t col = cm.col_sum(k), row = cm.row_sum(k);
    ClassScores& s = out[k];
    s.support = row;
    s.precision = col ? tp / static_cast<double>(col) : 0.0;
    s.recall = row ? tp / static_cast<double>(row) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  return out;
}

/// Mean of the positive and negative F1; neutral predictions still count as
/// errors for those classes.
inline double sentiment_macro_f1(const ConfusionMatrix& cm) {
  if (cm.classes() != kSentimentCount) throw std::invalid_argument("sentiment_macro_f1: expected a 3x3 matrix");
  const auto s = f1_per_class(cm);
  return 0.5 * (s[static_cast<std::size_t>(Sentiment::Positive)].f1 + s[static_cast<std::size_t>(Sentiment::Negative)].f1);
}

/// Unweighted mean over all three sentiment classes.
inline double sentiment_macro_f1_3class(const ConfusionMatrix& cm) {
  const auto s = f1_per_class(cm);
  double sum = 0.0;
  for (const auto& c : s) sum += c.f1;
  return s.empty() ? 0.0 : sum / static_cast<double>(s.size());
}

/// Sum over classes of F1 weighted by the class's share of gold labels in cm.
inline double da_weighted_f1(const ConfusionMatrix& cm) {
  const std::size_t total = cm.total();
  if (total == 0) return 0.0;
  double out = 0.0;
  for (const auto& s : f1_per_class(cm)) out += static_cast<double>(s.support) / static_cast<double>(total) * s.f1;
  return out;
}

struct Agreement {
  double kappa = 0.0;
  double observed = 0.0;  // raw agreement p_o
  double expected = 0.0;  // chance agreement p_e
};

template <typename Label>
Agreement cohen_kappa(std::span<const Label> a, std::span<const Label> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cohen_kappa: sequences differ in length");
  if (a.empty()) throw std::invalid_argument("cohen_kappa: empty sequences");
  std::map<Label, std::size_t> ma, mb;
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++ma[a[i]];
    ++mb[b[i]];
    same += a[i] == b[i];
  }
  const auto n = static_cast<double>(a.size());
  Agreement r;
  r.observed = static_cast<double>(same) / n;
  for (const auto& [label, ca] : ma)
    if (auto it = mb.find(label); it != mb.end())
      r.expected += (static_cast<double>(ca) / n) * (static_cast<double>(it->second) / n);
  if (r.expected >= 1.0) {
    if (r.observed < 1.0) throw std::domain_error("cohen_kappa: undefined (chance agreement 1, observed < 1)");
    r.kappa = 1.0;
    return r;
  }
  r.kappa = (r.observed - r.expected) / (1.0 - r.expected);
  return r;
}

template <typename Label>
Agreement cohen_kappa(const std::vector<Label>& a, const std::vector<Label>& b) {
  return cohen_kappa(std::span<const Label>(a), std::span<const Label>(b));
}

/// Confusion matrices for both tasks over posts that carry a gold label.
struct TaskConfusions {
  ConfusionMatrix sentiment{kSentimentCount};
  ConfusionMatrix dialog_act{kDialogActCount};

  void add(const LabeledPost& gold, Sentiment ps, DialogAct pd) {
    if (gold.sentiment) sentiment.add(static_cast<std::size_t>(*gold.sentiment), static_cast<std::size_t>(ps));
    if (gold.dialog_act) dialog_act.add(static_cast<std::size_t>(*gold.dialog_act), static_cast<std::size_t>(pd));
  }

  double sentiment_f1() const { return sentiment_macro_f1(sentiment); }
  double dialog_act_f1() const { return da_weighted_f1(dialog_act); }
};

}  // namespace dasent
