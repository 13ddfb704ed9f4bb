#pragma once

// Two-level hierarchical recurrent tagger.
//
//   post level:   bi-LSTM over word embeddings; the post vector is the
//                 concatenation of both directions' final hidden states
//   dialog level: h_t = tanh(h_{t-1} W_h + x_t W_x + b), h_0 = 0
//   heads:        per post, affine -> relu -> affine for sentiment (3) and
//                 dialog act (15)
//
// Dropout is applied to post vectors before the dialog RNN and to h_t before
// each head. Posts and dialogs of any length are unrolled as-is.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dasent/autodiff.hpp"
#include "dasent/corpus.hpp"
#include "dasent/kv.hpp"
#include "dasent/rng.hpp"

namespace dasent {

struct ModelConfig {
  std::size_t vocab_size = 1;
  std::size_t embed_dim = 100;
  std::size_t lstm_hidden = 100;
  std::size_t dialog_hidden = 100;
  double dropout_rate = 0.4;

  static constexpr std::size_t n_sentiment = kSentimentCount;
  static constexpr std::size_t n_dialog_act = kDialogActCount;

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || lstm_hidden < 1 || dialog_hidden < 1)
      throw ValidationError("model dimensions must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout must be in [0, 1)");
  }

  KeyValues to_kv() const {
    return {{"vocab_size", std::to_string(vocab_size)},
            {"embed_dim", std::to_string(embed_dim)},
            {"lstm_hidden", std::to_string(lstm_hidden)},
            {"dialog_hidden", std::to_string(dialog_hidden)},
            {"dropout", ad::format_double(dropout_rate)}};
  }

  static ModelConfig from_kv(const KeyValues& kv) {
    ModelConfig c;
    auto size = [&](const char* key, std::size_t& dst) {
      if (auto it = kv.find(key); it != kv.end()) dst = std::stoul(it->second);
    };
    size("vocab_size", c.vocab_size);
    size("embed_dim", c.embed_dim);
    size("lstm_hidden", c.lstm_hidden);
    size("dialog_hidden", c.dialog_hidden);
    if (auto it = kv.find("dropout"); it != kv.end()) c.dropout_rate = std::stod(it->second);
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Gate weights act on concat(x_t, h_{t-1}), shape (embed + hidden) x hidden.
struct LstmWeights {
  ad::Parameter input_w, input_b;
  ad::Parameter forget_w, forget_b;
  ad::Parameter output_w, output_b;
  ad::Parameter cell_w, cell_b;

  std::vector<ad::Parameter*> parameters() {
    return {&input_w, &input_b, &forget_w, &forget_b, &output_w, &output_b, &cell_w, &cell_b};
  }
};

struct HeadWeights {
  ad::Parameter hidden_w, hidden_b;
  ad::Parameter out_w, out_b;

  std::vector<ad::Parameter*> parameters() { return {&hidden_w, &hidden_b, &out_w, &out_b}; }
};

class ModelParams {
 public:
  /// All weights zero, shapes from `config`.
  explicit ModelParams(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::size_t V = config.vocab_size, E = config.embed_dim, H = config.lstm_hidden, D = config.dialog_hidden;
    auto mat = [](std::string name, std::size_t r, std::size_t c) { return ad::Parameter(std::move(name), ad::Tensor(ad::Shape{r, c})); };
    auto vec = [](std::string name, std::size_t n) { return ad::Parameter(std::move(name), ad::Tensor(ad::Shape{n})); };
    embedding = mat("embedding", V, E);
    auto lstm = [&](const std::string& p) {
      return LstmWeights{mat(p + ".input_w", E + H, H),  vec(p + ".input_b", H), mat(p + ".forget_w", E + H, H),
                         vec(p + ".forget_b", H),        mat(p + ".output_w", E + H, H), vec(p + ".output_b", H),
                         mat(p + ".cell_w", E + H, H),   vec(p + ".cell_b", H)};
    };
    forward_lstm = lstm("lstm_fwd");
    backward_lstm = lstm("lstm_bwd");
    rnn_hidden_w = mat("dialog_rnn.hidden_w", D, D);
    rnn_input_w = mat("dialog_rnn.input_w", 2 * H, D);
    rnn_b = vec("dialog_rnn.b", D);
    auto head = [&](const std::string& p, std::size_t k) {
      return HeadWeights{mat(p + ".hidden_w", D, D), vec(p + ".hidden_b", D), mat(p + ".out_w", D, k), vec(p + ".out_b", k)};
    };
    sentiment_head = head("sentiment_head", ModelConfig::n_sentiment);
    dialog_act_head = head("dialog_act_head", ModelConfig::n_dialog_act);
  }

  /// Matrices uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero except
  /// the LSTM forget gates (1.0). Parameters are filled in parameters() order
  /// from one generator.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed) {
    ModelParams m(config);
    Rng rng(seed);
    for (ad::Parameter* p : m.parameters()) {
      const ad::Shape& s = p->value.shape();
      if (s.rank() != 2) continue;
      const double bound = std::sqrt(6.0 / static_cast<double>(s[0] + s[1]));
      for (double& v : p->value.mutable_values()) v = rng.uniform(-bound, bound);
    }
    m.forward_lstm.forget_b.value.fill(1.0);
    m.backward_lstm.forget_b.value.fill(1.0);
    return m;
  }

  const ModelConfig& config() const { return config_; }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out{&embedding};
    for (auto* p : forward_lstm.parameters()) out.push_back(p);
    for (auto* p : backward_lstm.parameters()) out.push_back(p);
    out.insert(out.end(), {&rnn_hidden_w, &rnn_input_w, &rnn_b});
    for (auto* p : sentiment_head.parameters()) out.push_back(p);
    for (auto* p : dialog_act_head.parameters()) out.push_back(p);
    return out;
  }

  std::vector<const ad::Parameter*> parameters() const {
    auto mut = const_cast<ModelParams*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
  }

  /// V*E + 2*4*((E+H)*H + H) + (D*D + 2H*D + D) + sum over heads K of (D*D + D + D*K + K)
  static std::size_t expected_parameter_count(const ModelConfig& c) {
    const std::size_t V = c.vocab_size, E = c.embed_dim, H = c.lstm_hidden, D = c.dialog_hidden;
    const auto head = [D](std::size_t k) { return D * D + D + D * k + k; };
    return V * E + 2 * 4 * ((E + H) * H + H) + (D * D + 2 * H * D + D) + head(ModelConfig::n_sentiment) +
           head(ModelConfig::n_dialog_act);
  }

  ad::Parameter embedding;
  LstmWeights forward_lstm, backward_lstm;
  ad::Parameter rnn_hidden_w, rnn_input_w, rnn_b;
  HeadWeights sentiment_head, dialog_act_head;

 private:
  ModelConfig config_;
};

enum class Mode { Train, Inference };

struct DialogOutputs {
  std::vector<ad::Var> sentiment_logits;   // 1 x 3 per post
  std::vector<ad::Var> dialog_act_logits;  // 1 x 15 per post
};

/// ModelParams bound onto one tape.
class Network {
 public:
  /// Gradients flow into `params`. Dropout is active only in Mode::Train,
  /// which then requires `rng`.
  Network(ad::Tape& tape, ModelParams& params, Mode mode, Rng* rng)
      : tape_(tape), config_(params.config()), mode_(mode), rng_(rng) {
    if (mode == Mode::Train && config_.dropout_rate > 0.0 && !rng)
      throw std::invalid_argument("Network: training with dropout needs an rng");
    bind([&](ad::Parameter& p) { return tape.param(p); }, params);
  }

  /// Read-only inference binding.
  Network(ad::Tape& tape, const ModelParams& params)
      : tape_(tape), config_(params.config()), mode_(Mode::Inference), rng_(nullptr) {
    bind([&](ad::Parameter& p) { return tape.reference(p.value); }, const_cast<ModelParams&>(params));
  }

  ad::Var encode_post(std::span<const int> tokens) {
    if (tokens.empty()) throw ValidationError("encode_post: empty post");
    const std::size_t n = tokens.size();
    std::vector<ad::Var> embedded;
    embedded.reserve(n);
    for (std::size_t i = 0; i < n; ++i) embedded.push_back(ad::embedding_lookup(embedding_, tokens.subspan(i, 1)));

    auto run = [&](const Lstm& cell, bool reverse) {
      ad::Var h = zeros(config_.lstm_hidden);
      ad::Var c = h;
      for (std::size_t k = 0; k < n; ++k) {
        const ad::Var x = embedded[reverse ? n - 1 - k : k];
        const ad::Var xh = ad::concat(x, h, 1);
        const ad::Var i = ad::sigmoid(ad::add(ad::matmul(xh, cell.input_w), cell.input_b));
        const ad::Var f = ad::sigmoid(ad::add(ad::matmul(xh, cell.forget_w), cell.forget_b));
        const ad::Var o = ad::sigmoid(ad::add(ad::matmul(xh, cell.output_w), cell.output_b));
        const ad::Var g = ad::tanh(ad::add(ad::matmul(xh, cell.cell_w), cell.cell_b));
        c = k == 0 ? ad::mul(i, g) : ad::add(ad::mul(f, c), ad::mul(i, g));
        h = ad::mul(o, ad::tanh(c));
      }
      return h;
    };
    return ad::concat(run(forward_, false), run(backward_, true), 1);
  }

  /// One state per post; state t sees only posts 0..t.
  std::vector<ad::Var> encode_dialog(std::span<const ad::Var> post_vectors) {
    if (post_vectors.empty()) throw ValidationError("encode_dialog: empty dialog");
    std::vector<ad::Var> states;
    states.reserve(post_vectors.size());
    ad::Var h = zeros(config_.dialog_hidden);
    for (std::size_t t = 0; t < post_vectors.size(); ++t) {
      ad::Var pre = ad::matmul(post_vectors[t], rnn_input_w_);
      if (t > 0) pre = ad::add(ad::matmul(h, rnn_hidden_w_), pre);
      h = ad::tanh(ad::add(pre, rnn_b_));
      states.push_back(h);
    }
    return states;
  }

  DialogOutputs forward(const EncodedDialog& dialog) {
    std::vector<ad::Var> posts;
    posts.reserve(dialog.size());
    for (const auto& tokens : dialog) posts.push_back(drop(encode_post(tokens)));
    const auto states = encode_dialog(posts);
    DialogOutputs out;
    for (const ad::Var& h : states) {
      out.sentiment_logits.push_back(head(sentiment_, drop(h)));
      out.dialog_act_logits.push_back(head(dialog_act_, drop(h)));
    }
    return out;
  }

 private:
  struct Lstm {
    ad::Var input_w, input_b, forget_w, forget_b, output_w, output_b, cell_w, cell_b;
  };
  struct Head {
    ad::Var hidden_w, hidden_b, out_w, out_b;
  };

  template <typename BindFn>
  void bind(BindFn b, ModelParams& p) {
    embedding_ = b(p.embedding);
    auto lstm = [&](LstmWeights& w) {
      return Lstm{b(w.input_w),  b(w.input_b),  b(w.forget_w), b(w.forget_b),
                  b(w.output_w), b(w.output_b), b(w.cell_w),   b(w.cell_b)};
    };
    forward_ = lstm(p.forward_lstm);
    backward_ = lstm(p.backward_lstm);
    rnn_hidden_w_ = b(p.rnn_hidden_w);
    rnn_input_w_ = b(p.rnn_input_w);
    rnn_b_ = b(p.rnn_b);
    auto head = [&](HeadWeights& w) { return Head{b(w.hidden_w), b(w.hidden_b), b(w.out_w), b(w.out_b)}; };
    sentiment_ = head(p.sentiment_head);
    dialog_act_ = head(p.dialog_act_head);
  }

  ad::Var zeros(std::size_t n) { return tape_.constant(ad::Tensor(ad::Shape{1, n})); }

  ad::Var drop(ad::Var v) {
    if (mode_ != Mode::Train || config_.dropout_rate == 0.0) return v;
    return ad::dropout(v, config_.dropout_rate, true, *rng_);
  }

  static ad::Var head(const Head& w, ad::Var h) {
    const ad::Var hidden = ad::relu(ad::add(ad::matmul(h, w.hidden_w), w.hidden_b));
    return ad::add(ad::matmul(hidden, w.out_w), w.out_b);
  }

  ad::Tape& tape_;
  ModelConfig config_;
  Mode mode_;
  Rng* rng_;
  ad::Var embedding_;
  Lstm forward_, backward_;
  ad::Var rnn_hidden_w_, rnn_input_w_, rnn_b_;
  Head sentiment_, dialog_act_;
};

/// Index of the largest value; the lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

struct PostPrediction {
  Sentiment sentiment;
  DialogAct dialog_act;

  friend bool operator==(const PostPrediction&, const PostPrediction&) = default;
};

inline std::vector<PostPrediction> predict(const ModelParams& params, const EncodedDialog& dialog) {
  ad::Tape tape;
  Network net(tape, params);
  const auto out = net.forward(dialog);
  std::vector<PostPrediction> preds;
  for (std::size_t t = 0; t < dialog.size(); ++t)
    preds.push_back({static_cast<Sentiment>(argmax(out.sentiment_logits[t].value().values())),
                     static_cast<DialogAct>(argmax(out.dialog_act_logits[t].value().values()))});
  return preds;
}

}  // namespace dasent
