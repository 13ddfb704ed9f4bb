#pragma once

// Dialog corpora: label alphabets, reply trees, linearization into branch
// dialogs, vocabularies and leak-free splits.
//
// Tree-TSV, one post per line, six tab-separated columns:
//
//   tree_id  post_id  reply_to|-  sentiment(+|-|*|?)  dialog_act(27 codes|?)  tokens
//
// `?` marks a withheld label. Blank lines and lines starting with '#' are
// skipped. The linearized form prepends branch_id and a 0-based turn index.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "dasent/errors.hpp"
#include "dasent/rng.hpp"

namespace dasent {

// ---------------------------------------------------------------------------
// Labels

enum class Sentiment : std::uint8_t { Positive, Negative, Neutral };

inline constexpr std::size_t kSentimentCount = 3;
inline constexpr std::array<Sentiment, kSentimentCount> kAllSentiments{Sentiment::Positive, Sentiment::Negative,
                                                                       Sentiment::Neutral};

inline constexpr char sentiment_code(Sentiment s) {
  constexpr char codes[] = {'+', '-', '*'};
  return codes[static_cast<std::size_t>(s)];
}

inline constexpr std::string_view sentiment_name(Sentiment s) {
  constexpr std::string_view names[] = {"positive", "negative", "neutral"};
  return names[static_cast<std::size_t>(s)];
}

inline std::optional<Sentiment> sentiment_from_code(char c) {
  switch (c) {
    case '+': return Sentiment::Positive;
    case '-': return Sentiment::Negative;
    case '*': return Sentiment::Neutral;
    default: return std::nullopt;
  }
}

/// The 15 dialog acts kept after merging rare annotator labels.
enum class DialogAct : std::uint8_t { Q, O, I, A, D, W, E, R, S, F, H, T, J, V, M };

inline constexpr std::size_t kDialogActCount = 15;
inline constexpr std::string_view kDialogActCodes = "QOIADWERSFHTJVM";

inline constexpr char dialog_act_code(DialogAct d) { return kDialogActCodes[static_cast<std::size_t>(d)]; }

inline constexpr std::string_view dialog_act_name(DialogAct d) {
  constexpr std::string_view names[] = {"yes/no question", "open question", "statement",   "agreement",
                                        "disagreement",    "open answer",   "offer",       "request",
                                        "suggest",         "acknowledgement", "greeting", "thanking",
                                        "exclamation",     "explicit performative", "sympathy"};
  return names[static_cast<std::size_t>(d)];
}

inline std::optional<DialogAct> dialog_act_from_code(char c) {
  const auto pos = kDialogActCodes.find(c);
  if (pos == std::string_view::npos) return std::nullopt;
  return static_cast<DialogAct>(pos);
}

/// The 27-letter alphabet used by annotators.
inline constexpr std::string_view kRawDialogActCodes = "QOIADWYNERSPLFBHGXCTKJVM*UZ";

struct Removed {
  friend bool operator==(Removed, Removed) { return true; }
};

using NormalizedDialogAct = std::variant<DialogAct, Removed>;

/// Maps an annotator code onto the retained label set, applying the post-hoc
/// merges. U (too ambiguous), Z (malformed) and * (miscellaneous, never used)
/// are removed.
inline NormalizedDialogAct normalize_da_code(char raw) {
  switch (raw) {
    case 'Y': case 'P': case 'C': case 'K': return DialogAct::A;
    case 'N': case 'L': return DialogAct::D;
    case 'B': return DialogAct::F;
    case 'G': return DialogAct::H;
    case 'X': return DialogAct::M;
    case 'U': case 'Z': case '*': return Removed{};
    default: break;
  }
  if (auto d = dialog_act_from_code(raw)) return *d;
  throw ValidationError(std::string("unknown dialog act code '") + raw + "'");
}

/// Corpus-level dialog-act distribution (percent), indexed by DialogAct.
inline constexpr std::array<double, kDialogActCount> kReferenceDialogActPercent{
    8.3, 7.4, 49.3, 7.9, 1.9, 9.9, 1.4, 3.3, 3.0, 0.2, 2.0, 2.0, 1.5, 1.6, 0.6};

/// Corpus-level sentiment distribution (percent), indexed by Sentiment.
inline constexpr std::array<double, kSentimentCount> kReferenceSentimentPercent{26.0, 31.0, 43.0};

// ---------------------------------------------------------------------------
// Posts, trees, dialogs

struct LabeledPost {
  std::string post_id;
  std::optional<std::string> reply_to;
  std::vector<std::string> tokens;
  std::optional<Sentiment> sentiment;
  std::optional<DialogAct> dialog_act;

  friend bool operator==(const LabeledPost&, const LabeledPost&) = default;
};

/// A reply tree. Posts keep their input order, which also fixes sibling order.
class DialogTree {
 public:
  DialogTree(std::string tree_id, std::vector<LabeledPost> posts) : id_(std::move(tree_id)), posts_(std::move(posts)) {
    for (std::size_t i = 0; i < posts_.size(); ++i) {
      if (posts_[i].tokens.empty()) throw ValidationError("post " + posts_[i].post_id + " has no tokens");
      if (!index_.emplace(posts_[i].post_id, i).second)
        throw StructureError("duplicate post_id " + posts_[i].post_id + " in tree " + id_);
    }
    children_.resize(posts_.size());
    std::optional<std::size_t> root;
    for (std::size_t i = 0; i < posts_.size(); ++i) {
      const auto& parent = posts_[i].reply_to;
      if (!parent) {
        if (root) throw StructureError("tree " + id_ + " has two roots: " + posts_[*root].post_id + " and " +
                                       posts_[i].post_id);
        root = i;
        continue;
      }
      auto it = index_.find(*parent);
      if (it == index_.end())
        throw StructureError("dangling reply_to " + *parent + " (from post " + posts_[i].post_id + ")");
      children_[it->second].push_back(i);
    }
    if (!root) throw StructureError("tree " + id_ + " has no root");
    root_ = *root;
    // Connected and acyclic iff a walk from the root reaches every post.
    std::vector<char> seen(posts_.size(), 0);
    std::vector<std::size_t> stack{root_};
    std::size_t reached = 0;
    while (!stack.empty()) {
      const std::size_t n = stack.back();
      stack.pop_back();
      seen[n] = 1;
      ++reached;
      for (std::size_t c : children_[n]) stack.push_back(c);
    }
    if (reached != posts_.size()) {
      for (std::size_t i = 0; i < posts_.size(); ++i)
        if (!seen[i]) throw StructureError("cycle through post " + posts_[i].post_id + " in tree " + id_);
    }
  }

  const std::string& id() const { return id_; }
  const std::string& root_id() const { return posts_[root_].post_id; }
  std::size_t size() const { return posts_.size(); }
  const std::vector<LabeledPost>& posts() const { return posts_; }

  const LabeledPost& post(const std::string& post_id) const { return posts_.at(index_.at(post_id)); }

  std::vector<std::string> children(const std::string& post_id) const {
    std::vector<std::string> out;
    for (std::size_t c : children_.at(index_.at(post_id))) out.push_back(posts_[c].post_id);
    return out;
  }

  /// Depth-first visit from the root, children in input order. `fn` gets the
  /// root-to-node path as post indices.
  template <typename Fn>
  void visit_paths(Fn&& fn) const {
    std::vector<std::size_t> path;
    walk(root_, path, fn);
  }

  std::vector<std::string> leaves() const {
    std::vector<std::string> out;
    visit_paths([&](std::span<const std::size_t> path) {
      if (children_[path.back()].empty()) out.push_back(posts_[path.back()].post_id);
    });
    return out;
  }

  bool is_leaf_index(std::size_t i) const { return children_[i].empty(); }

 private:
  template <typename Fn>
  void walk(std::size_t node, std::vector<std::size_t>& path, Fn& fn) const {
    path.push_back(node);
    fn(std::span<const std::size_t>(path));
    for (std::size_t c : children_[node]) walk(c, path, fn);
    path.pop_back();
  }

  std::string id_;
  std::size_t root_ = 0;
  std::vector<LabeledPost> posts_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> children_;
};

/// One root-to-leaf branch of a tree.
struct LinearDialog {
  std::string tree_id;
  std::string leaf_id;
  std::vector<LabeledPost> posts;

  std::string branch_id() const { return tree_id + "/" + leaf_id; }
};

inline std::vector<LinearDialog> linearize(const DialogTree& tree) {
  std::vector<LinearDialog> out;
  tree.visit_paths([&](std::span<const std::size_t> path) {
    if (!tree.is_leaf_index(path.back())) return;
    LinearDialog d;
    d.tree_id = tree.id();
    for (std::size_t i : path) d.posts.push_back(tree.posts()[i]);
    d.leaf_id = d.posts.back().post_id;
    out.push_back(std::move(d));
  });
  return out;
}

inline std::vector<LinearDialog> linearize(std::span<const DialogTree> trees) {
  std::vector<LinearDialog> out;
  for (const auto& t : trees) {
    auto branches = linearize(t);
    std::move(branches.begin(), branches.end(), std::back_inserter(out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tree-TSV parsing

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string> split_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ') ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

inline bool skippable(std::string_view line) {
  if (!line.empty() && line.front() == '#') return true;
  return line.find_first_not_of(" \t") == std::string_view::npos;
}

struct PostFields {
  std::string tree_id;
  LabeledPost post;
  bool removed = false;
};

/// Parses the six post columns starting at fields[offset].
inline PostFields parse_post_fields(std::span<const std::string_view> f, const std::string& source, std::size_t line) {
  PostFields out;
  if (f[0].empty()) throw ParseError(source, line, "empty tree_id");
  if (f[1].empty()) throw ParseError(source, line, "empty post_id");
  out.tree_id = std::string(f[0]);
  out.post.post_id = std::string(f[1]);
  if (f[2].empty()) throw ParseError(source, line, "empty reply_to (use '-' for none)");
  if (f[2] != "-") out.post.reply_to = std::string(f[2]);
  if (f[3].size() != 1) throw ParseError(source, line, "sentiment code must be one character");
  if (f[3][0] != '?') {
    out.post.sentiment = sentiment_from_code(f[3][0]);
    if (!out.post.sentiment) throw ParseError(source, line, "unknown sentiment code '" + std::string(f[3]) + "'");
  }
  if (f[4].size() != 1) throw ParseError(source, line, "dialog act code must be one character");
  if (f[4][0] != '?') {
    NormalizedDialogAct da;
    try {
      da = normalize_da_code(f[4][0]);
    } catch (const ValidationError& e) {
      throw ParseError(source, line, e.what());
    }
    if (std::holds_alternative<Removed>(da))
      out.removed = true;
    else
      out.post.dialog_act = std::get<DialogAct>(da);
  }
  out.post.tokens = split_tokens(f[5]);
  if (out.post.tokens.empty()) throw ParseError(source, line, "post " + out.post.post_id + " has no tokens");
  return out;
}

}  // namespace detail

/// Reads a tree-TSV corpus. Structure is validated on the raw posts; posts
/// whose dialog act is removed are then dropped and their replies re-attached
/// to the nearest kept ancestor. Each connected reply component becomes one
/// tree; when a tree_id splits into several, they are suffixed ".1", ".2", ...
inline std::vector<DialogTree> parse_corpus(std::istream& in, const std::string& source = "<input>") {
  struct Raw {
    detail::PostFields fields;
    std::size_t line;
  };
  std::vector<Raw> raw;
  std::unordered_map<std::string, std::size_t> by_id;
  std::vector<std::string> tree_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_tree;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view text = detail::strip_cr(line);
    if (detail::skippable(text)) continue;
    const auto fields = detail::split(text, '\t');
    if (fields.size() != 6)
      throw ParseError(source, lineno, "expected 6 tab-separated columns, got " + std::to_string(fields.size()));
    Raw r{detail::parse_post_fields(fields, source, lineno), lineno};
    if (!by_id.emplace(r.fields.post.post_id, raw.size()).second)
      throw ParseError(source, lineno, "duplicate post_id " + r.fields.post.post_id);
    auto [it, fresh] = by_tree.try_emplace(r.fields.tree_id);
    if (fresh) tree_order.push_back(r.fields.tree_id);
    it->second.push_back(raw.size());
    raw.push_back(std::move(r));
  }

  // Structural checks on the raw reply graph.
  for (const Raw& r : raw) {
    const auto& parent = r.fields.post.reply_to;
    if (!parent) continue;
    auto it = by_id.find(*parent);
    if (it == by_id.end())
      throw StructureError(source + ":" + std::to_string(r.line) + ": dangling reply_to " + *parent + " (from post " +
                           r.fields.post.post_id + ")");
    if (raw[it->second].fields.tree_id != r.fields.tree_id)
      throw StructureError(source + ":" + std::to_string(r.line) + ": post " + r.fields.post.post_id +
                           " replies to " + *parent + " in another tree");
  }
  {
    // 0 = unvisited, 1 = on current walk, 2 = known to reach a root
    std::vector<char> state(raw.size(), 0);
    for (std::size_t start = 0; start < raw.size(); ++start) {
      std::vector<std::size_t> walk;
      std::size_t cur = start;
      while (state[cur] == 0) {
        state[cur] = 1;
        walk.push_back(cur);
        const auto& parent = raw[cur].fields.post.reply_to;
        if (!parent) break;
        cur = by_id.at(*parent);
      }
      if (state[cur] == 1 && raw[cur].fields.post.reply_to) {
        std::string cycle = raw[cur].fields.post.post_id;
        std::size_t n = by_id.at(*raw[cur].fields.post.reply_to);
        while (n != cur) {
          cycle += " -> " + raw[n].fields.post.post_id;
          n = by_id.at(*raw[n].fields.post.reply_to);
        }
        cycle += " -> " + raw[cur].fields.post.post_id;
        throw StructureError(source + ": reply cycle " + cycle);
      }
      for (std::size_t w : walk) state[w] = 2;
    }
  }

  std::vector<DialogTree> trees;
  for (const std::string& tid : tree_order) {
    const auto& members = by_tree.at(tid);
    auto kept_parent = [&](std::size_t i) -> std::optional<std::size_t> {
      auto p = raw[i].fields.post.reply_to;
      while (p) {
        const std::size_t j = by_id.at(*p);
        if (!raw[j].fields.removed) return j;
        p = raw[j].fields.post.reply_to;
      }
      return std::nullopt;
    };
    std::vector<std::size_t> roots;
    std::unordered_map<std::size_t, std::size_t> component;  // post -> index into roots
    for (std::size_t i : members) {
      if (raw[i].fields.removed) continue;
      std::size_t top = i;
      while (auto p = kept_parent(top)) top = *p;
      auto [it, fresh] = component.try_emplace(top, roots.size());
      if (fresh) roots.push_back(top);
      component[i] = it->second;
    }
    std::vector<std::vector<LabeledPost>> groups(roots.size());
    for (std::size_t i : members) {
      if (raw[i].fields.removed) continue;
      LabeledPost p = raw[i].fields.post;
      if (auto parent = kept_parent(i))
        p.reply_to = raw[*parent].fields.post.post_id;
      else
        p.reply_to.reset();
      groups[component.at(i)].push_back(std::move(p));
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
      std::string id = groups.size() == 1 ? tid : tid + "." + std::to_string(g + 1);
      trees.emplace_back(std::move(id), std::move(groups[g]));
    }
  }
  return trees;
}

inline std::vector<DialogTree> parse_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path.string());
  return parse_corpus(in, path.string());
}

// ---------------------------------------------------------------------------
// Writers

namespace detail {

inline void write_post_columns(std::ostream& os, const std::string& tree_id, const LabeledPost& p) {
  os << tree_id << '\t' << p.post_id << '\t' << (p.reply_to ? *p.reply_to : "-") << '\t'
     << (p.sentiment ? sentiment_code(*p.sentiment) : '?') << '\t'
     << (p.dialog_act ? dialog_act_code(*p.dialog_act) : '?') << '\t';
  for (std::size_t i = 0; i < p.tokens.size(); ++i) os << (i ? " " : "") << p.tokens[i];
}

}  // namespace detail

inline void write_tree_tsv(std::ostream& os, std::span<const DialogTree> trees) {
  for (const auto& t : trees)
    for (const auto& p : t.posts()) {
      detail::write_post_columns(os, t.id(), p);
      os << '\n';
    }
}

/// branch_id, turn_index, then the six tree-TSV columns.
inline void write_linear_tsv(std::ostream& os, std::span<const LinearDialog> dialogs) {
  for (const auto& d : dialogs)
    for (std::size_t t = 0; t < d.posts.size(); ++t) {
      os << d.branch_id() << '\t' << t << '\t';
      detail::write_post_columns(os, d.tree_id, d.posts[t]);
      os << '\n';
    }
}

/// Reads the linearized format back into dialogs (labels must already be in
/// the retained 15-label set or '?').
inline std::vector<LinearDialog> parse_linear_tsv(std::istream& in, const std::string& source = "<input>",
                                                  std::vector<std::pair<Sentiment, DialogAct>>* predictions = nullptr) {
  std::vector<LinearDialog> out;
  std::string current;
  std::string line;
  std::size_t lineno = 0;
  const std::size_t want = predictions ? 10 : 8;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view text = detail::strip_cr(line);
    if (detail::skippable(text)) continue;
    const auto f = detail::split(text, '\t');
    if (f.size() != want)
      throw ParseError(source, lineno,
                       "expected " + std::to_string(want) + " tab-separated columns, got " + std::to_string(f.size()));
    if (f[6].size() == 1 && f[6][0] != '?' && !dialog_act_from_code(f[6][0]))
      throw ParseError(source, lineno, "dialog act '" + std::string(f[6]) + "' is not a retained label");
    auto post = detail::parse_post_fields(std::span<const std::string_view>(f).subspan(2, 6), source, lineno);
    std::size_t turn = 0;
    try {
      turn = std::stoul(std::string(f[1]));
    } catch (const std::exception&) {
      throw ParseError(source, lineno, "bad turn index '" + std::string(f[1]) + "'");
    }
    if (out.empty() || current != f[0]) {
      if (turn != 0) throw ParseError(source, lineno, "branch " + std::string(f[0]) + " does not start at turn 0");
      current = std::string(f[0]);
      LinearDialog d;
      d.tree_id = post.tree_id;
      out.push_back(std::move(d));
    } else if (turn != out.back().posts.size()) {
      throw ParseError(source, lineno, "turn index " + std::to_string(turn) + " out of sequence");
    }
    out.back().leaf_id = post.post.post_id;
    out.back().posts.push_back(std::move(post.post));
    if (predictions) {
      auto ps = f[8].size() == 1 ? sentiment_from_code(f[8][0]) : std::nullopt;
      auto pd = f[9].size() == 1 ? dialog_act_from_code(f[9][0]) : std::nullopt;
      if (!ps || !pd) throw ParseError(source, lineno, "bad predicted label pair");
      predictions->emplace_back(*ps, *pd);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

using EncodedDialog = std::vector<std::vector<int>>;

class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary() : tokens_{std::string(kUnkToken)} {}

  /// Tokens sorted by descending count, ties broken lexicographically. Only
  /// the given (training) dialogs are consulted.
  static Vocabulary build(std::span<const LinearDialog> train, int min_count = 1, bool lowercase = false) {
    if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
    std::unordered_map<std::string, std::size_t> counts;
    for (const auto& d : train)
      for (const auto& p : d.posts)
        for (const auto& tok : p.tokens) ++counts[lowercase ? lower(tok) : tok];
    std::vector<std::pair<std::string, std::size_t>> sorted(counts.begin(), counts.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary v;
    v.lowercase_ = lowercase;
    for (const auto& [tok, n] : sorted) {
      if (n < static_cast<std::size_t>(min_count) || tok == kUnkToken) continue;
      v.add(tok);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  bool lowercase() const { return lowercase_; }

  int index(std::string_view token) const {
    auto it = index_.find(lowercase_ ? lower(token) : std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int i) const { return tokens_.at(static_cast<std::size_t>(i)); }

  void save(std::ostream& os) const {
    os << "dasent-vocab 1 lowercase=" << (lowercase_ ? 1 : 0) << '\n';
    for (std::size_t i = 1; i < tokens_.size(); ++i) os << tokens_[i] << '\n';
  }

  static Vocabulary load(std::istream& is) {
    std::string header;
    if (!std::getline(is, header) || header.rfind("dasent-vocab 1 ", 0) != 0)
      throw DataError("vocabulary: missing header");
    Vocabulary v;
    v.lowercase_ = header.find("lowercase=1") != std::string::npos;
    std::string tok;
    while (std::getline(is, tok)) {
      if (tok.empty()) continue;
      v.add(tok);
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.lowercase_ == b.lowercase_ && a.tokens_ == b.tokens_;
  }

 private:
  static std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  }

  void add(const std::string& tok) {
    if (index_.emplace(tok, static_cast<int>(tokens_.size())).second) tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  bool lowercase_ = false;
};

inline Vocabulary build_vocabulary(std::span<const LinearDialog> train, int min_count = 1, bool lowercase = false) {
  return Vocabulary::build(train, min_count, lowercase);
}

/// Token indices per post; posts keep their own lengths.
inline EncodedDialog encode_dialog(const LinearDialog& d, const Vocabulary& v) {
  EncodedDialog out;
  out.reserve(d.posts.size());
  for (const auto& p : d.posts) {
    std::vector<int> ids;
    ids.reserve(p.tokens.size());
    for (const auto& t : p.tokens) ids.push_back(v.index(t));
    out.push_back(std::move(ids));
  }
  return out;
}

inline std::vector<std::vector<std::string>> decode_dialog(const EncodedDialog& e, const Vocabulary& v) {
  std::vector<std::vector<std::string>> out;
  for (const auto& post : e) {
    auto& toks = out.emplace_back();
    for (int i : post) toks.push_back(v.token(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitRatios {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
};

struct SplitSet {
  std::vector<LinearDialog> train;
  std::vector<LinearDialog> dev;
  std::vector<LinearDialog> test;
};

/// Whole trees are assigned to one split, so branches sharing a prefix never
/// straddle splits. Sizes are counted in trees.
inline SplitSet make_splits(std::span<const DialogTree> trees, SplitRatios ratios, std::uint64_t seed) {
  if (trees.empty()) throw ValidationError("make_splits: no trees");
  if (ratios.train < 0 || ratios.dev < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9)
    throw ValidationError("make_splits: ratios must be non-negative and sum to 1");
  std::vector<std::size_t> order(trees.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n = static_cast<double>(trees.size());
  const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * n));
  const auto n_dev = std::min(trees.size() - std::min(n_train, trees.size()),
                              static_cast<std::size_t>(std::llround(ratios.dev * n)));
  SplitSet out;
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& dst = k < n_train ? out.train : (k < n_train + n_dev ? out.dev : out.test);
    auto branches = linearize(trees[order[k]]);
    std::move(branches.begin(), branches.end(), std::back_inserter(dst));
  }
  return out;
}

/// Partitions dialog indices into k folds without splitting any tree. Trees
/// are visited in seeded random order and each goes to the currently smallest
/// fold (lowest index on ties).
inline std::vector<std::vector<std::size_t>> make_folds(std::span<const LinearDialog> dialogs, std::size_t k,
                                                        std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("make_folds: k must be positive");
  std::vector<std::string> tree_order;
  std::unordered_map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < dialogs.size(); ++i) {
    auto [it, fresh] = members.try_emplace(dialogs[i].tree_id);
    if (fresh) tree_order.push_back(dialogs[i].tree_id);
    it->second.push_back(i);
  }
  if (tree_order.size() < k)
    throw ValidationError("cannot build " + std::to_string(k) + " folds from " + std::to_string(tree_order.size()) +
                          " trees");
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(tree_order));
  std::vector<std::vector<std::size_t>> folds(k);
  for (const auto& tid : tree_order) {
    auto smallest = std::min_element(folds.begin(), folds.end(),
                                     [](const auto& a, const auto& b) { return a.size() < b.size(); });
    const auto& m = members.at(tid);
    smallest->insert(smallest->end(), m.begin(), m.end());
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// ---------------------------------------------------------------------------
// Statistics

struct CorpusStats {
  std::size_t trees = 0;
  std::size_t dialogs = 0;       // linearized branches
  std::size_t posts = 0;         // unique posts
  std::size_t branch_posts = 0;  // sum of branch lengths
  std::size_t max_dialog_length = 0;
  std::size_t vocabulary = 0;  // distinct tokens
  std::map<std::size_t, std::size_t> tree_size_histogram;
  std::array<std::size_t, kSentimentCount> sentiment_counts{};
  std::array<std::size_t, kDialogActCount> dialog_act_counts{};
  std::size_t sentiment_withheld = 0;
  std::size_t dialog_act_withheld = 0;

  double sentiment_percent(Sentiment s) const {
    const auto n = std::accumulate(sentiment_counts.begin(), sentiment_counts.end(), std::size_t{0});
    return n ? 100.0 * static_cast<double>(sentiment_counts[static_cast<std::size_t>(s)]) / static_cast<double>(n) : 0.0;
  }

  double dialog_act_percent(DialogAct d) const {
    const auto n = std::accumulate(dialog_act_counts.begin(), dialog_act_counts.end(), std::size_t{0});
    return n ? 100.0 * static_cast<double>(dialog_act_counts[static_cast<std::size_t>(d)]) / static_cast<double>(n)
             : 0.0;
  }
};

/// Label distributions are over unique posts, after merging.
inline CorpusStats corpus_stats(std::span<const DialogTree> trees) {
  CorpusStats s;
  std::unordered_set<std::string> vocab;
  s.trees = trees.size();
  for (const auto& t : trees) {
    ++s.tree_size_histogram[t.size()];
    for (const auto& p : t.posts()) {
      ++s.posts;
      if (p.sentiment)
        ++s.sentiment_counts[static_cast<std::size_t>(*p.sentiment)];
      else
        ++s.sentiment_withheld;
      if (p.dialog_act)
        ++s.dialog_act_counts[static_cast<std::size_t>(*p.dialog_act)];
      else
        ++s.dialog_act_withheld;
      vocab.insert(p.tokens.begin(), p.tokens.end());
    }
    for (const auto& d : linearize(t)) {
      ++s.dialogs;
      s.branch_posts += d.posts.size();
      s.max_dialog_length = std::max(s.max_dialog_length, d.posts.size());
    }
  }
  s.vocabulary = vocab.size();
  return s;
}

}  // namespace dasent
