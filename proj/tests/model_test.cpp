#include "dasent/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "test_util.hpp"

namespace dasent {
namespace {

using ad::Tensor;

ModelConfig small_config(std::size_t vocab = 7) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 4;
  c.lstm_hidden = 3;
  c.dialog_hidden = 5;
  c.dropout_rate = 0.0;
  return c;
}

std::vector<double> values(ad::Var v) { return {v.value().values().begin(), v.value().values().end()}; }

// Plain-double reference implementation, written independently of the tape.
using Vec = std::vector<double>;

Vec row_times(const Vec& x, const Tensor& w) {
  const std::size_t r = w.shape()[0], c = w.shape()[1];
  Vec out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[i] * w.at(i, j);
  return out;
}

Vec lstm_reference(const LstmWeights& w, const Tensor& emb, std::vector<int> tokens, std::size_t H) {
  Vec h(H, 0.0), c(H, 0.0);
  const std::size_t E = emb.shape()[1];
  for (int tok : tokens) {
    Vec xh;
    for (std::size_t k = 0; k < E; ++k) xh.push_back(emb.at(tok, k));
    xh.insert(xh.end(), h.begin(), h.end());
    auto gate = [&](const ad::Parameter& W, const ad::Parameter& b) {
      Vec z = row_times(xh, W.value);
      for (std::size_t j = 0; j < H; ++j) z[j] += b.value[j];
      return z;
    };
    Vec i = gate(w.input_w, w.input_b), f = gate(w.forget_w, w.forget_b), o = gate(w.output_w, w.output_b),
        g = gate(w.cell_w, w.cell_b);
    for (std::size_t j = 0; j < H; ++j) {
      const auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
      c[j] = sig(f[j]) * c[j] + sig(i[j]) * std::tanh(g[j]);
      h[j] = sig(o[j]) * std::tanh(c[j]);
    }
  }
  return h;
}

TEST(Model, ParameterCountMatchesClosedForm) {
  for (auto c : {small_config(), ModelConfig{}}) {
    c.vocab_size = 5331;
    ModelParams p(c);
    EXPECT_EQ(p.parameter_count(), ModelParams::expected_parameter_count(c));
  }
  // Hand-evaluated for V=7, E=4, H=3, D=5:
  // 28 + 8*(21+3) + (25+30+5) + (25+5+15+3) + (25+5+75+15) = 448
  EXPECT_EQ(ModelParams(small_config()).parameter_count(), 448u);
}

TEST(Model, ParameterNamesAreUnique) {
  ModelParams p(small_config());
  std::set<std::string> names;
  for (auto* q : p.parameters()) EXPECT_TRUE(names.insert(q->name).second) << q->name;
}

TEST(Model, InitializationBounds) {
  auto c = small_config();
  auto p = ModelParams::initialize(c, 5);
  for (auto* q : p.parameters()) {
    const auto& s = q->value.shape();
    if (s.rank() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(s[0] + s[1]));
      for (double v : q->value.values()) EXPECT_LE(std::abs(v), bound);
    } else {
      const double want = q->name.find("forget_b") != std::string::npos ? 1.0 : 0.0;
      for (double v : q->value.values()) EXPECT_EQ(v, want) << q->name;
    }
  }
  auto same = ModelParams::initialize(c, 5);
  EXPECT_EQ(p.embedding.value.values()[3], same.embedding.value.values()[3]);
}

TEST(Model, ConfigRoundTripAndValidation) {
  auto c = small_config();
  c.dropout_rate = 0.4;
  EXPECT_EQ(ModelConfig::from_kv(c.to_kv()), c);
  c.dropout_rate = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(EncodePost, ZeroWeightsGiveZeroVector) {
  ModelParams p(small_config());
  ad::Tape tape;
  Network net(tape, p);
  const int toks[] = {1, 2, 3};
  auto v = net.encode_post(toks);
  EXPECT_EQ(v.shape(), (ad::Shape{1, 6}));
  for (double x : values(v)) EXPECT_EQ(x, 0.0);
}

TEST(EncodePost, SingleTokenShape) {
  auto p = ModelParams::initialize(small_config(), 1);
  ad::Tape tape;
  Network net(tape, p);
  const int toks[] = {4};
  EXPECT_EQ(net.encode_post(toks).shape(), (ad::Shape{1, 6}));
  EXPECT_THROW(net.encode_post(std::span<const int>{}), ValidationError);
  const int bad[] = {7};
  EXPECT_THROW(net.encode_post(bad), std::out_of_range);
}

TEST(EncodePost, MatchesReferenceRecurrence) {
  auto c = small_config();
  auto p = ModelParams::initialize(c, 2);
  const std::vector<int> toks{3, 1, 4, 1, 5};
  ad::Tape tape;
  Network net(tape, p);
  auto got = values(net.encode_post(toks));
  Vec fwd = lstm_reference(p.forward_lstm, p.embedding.value, toks, c.lstm_hidden);
  Vec bwd = lstm_reference(p.backward_lstm, p.embedding.value, {toks.rbegin(), toks.rend()}, c.lstm_hidden);
  for (std::size_t j = 0; j < c.lstm_hidden; ++j) {
    EXPECT_NEAR(got[j], fwd[j], 1e-12);
    EXPECT_NEAR(got[c.lstm_hidden + j], bwd[j], 1e-12);
  }
}

TEST(EncodePost, ReversalWithSwappedDirectionsSwapsHalves) {
  auto c = small_config();
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = ModelParams::initialize(c, 100 + trial);
    auto q = p;
    std::swap(q.forward_lstm, q.backward_lstm);
    std::vector<int> toks;
    for (std::size_t n = 1 + rng.below(8); n > 0; --n) toks.push_back(static_cast<int>(rng.below(c.vocab_size)));
    std::vector<int> rev(toks.rbegin(), toks.rend());
    ad::Tape t1, t2;
    Network a(t1, p), b(t2, q);
    auto x = values(a.encode_post(toks));
    auto y = values(b.encode_post(rev));
    const std::size_t H = c.lstm_hidden;
    for (std::size_t j = 0; j < H; ++j) {
      EXPECT_NEAR(x[j], y[H + j], 1e-12);
      EXPECT_NEAR(x[H + j], y[j], 1e-12);
    }
  }
}

TEST(EncodeDialog, ZeroWeightsAndSingleStep) {
  auto c = small_config();
  ModelParams zero(c);
  ad::Tape tape;
  Network nz(tape, zero);
  Rng rng(4);
  std::vector<ad::Var> xs{tape.constant(testing::random_tensor(ad::Shape{1, 6}, rng)),
                          tape.constant(testing::random_tensor(ad::Shape{1, 6}, rng))};
  for (auto& h : nz.encode_dialog(xs))
    for (double v : values(h)) EXPECT_EQ(v, 0.0);

  auto p = ModelParams::initialize(c, 9);
  p.rnn_b.value.set(0, 0.3);
  Network net(tape, p);
  auto states = net.encode_dialog(std::span<const ad::Var>(xs).first(1));
  ASSERT_EQ(states.size(), 1u);
  Vec x(xs[0].value().values().begin(), xs[0].value().values().end());
  Vec want = row_times(x, p.rnn_input_w.value);
  for (std::size_t j = 0; j < c.dialog_hidden; ++j) EXPECT_NEAR(states[0].value()[j], std::tanh(want[j] + p.rnn_b.value[j]), 1e-14);
}

TEST(EncodeDialog, CausalUnderPerturbation) {
  auto c = small_config();
  auto p = ModelParams::initialize(c, 10);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.below(6), t = rng.below(n - 1);
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < n; ++i) xs.push_back(testing::random_tensor(ad::Shape{1, 6}, rng));
    auto run = [&](const std::vector<Tensor>& in) {
      ad::Tape tape;
      Network net(tape, p);
      std::vector<ad::Var> vs;
      for (const auto& x : in) vs.push_back(tape.constant(x));
      std::vector<Vec> out;
      for (auto& h : net.encode_dialog(vs)) out.push_back(values(h));
      return out;
    };
    auto base = run(xs);
    auto perturbed_in = xs;
    for (std::size_t i = t + 1; i < n; ++i) perturbed_in[i] = testing::random_tensor(ad::Shape{1, 6}, rng);
    auto perturbed = run(perturbed_in);
    for (std::size_t i = 0; i <= t; ++i) EXPECT_EQ(base[i], perturbed[i]);
    EXPECT_NE(base[t + 1], perturbed[t + 1]);
  }
}

TEST(Forward, ShapesAndUniformAtZero) {
  ModelParams p(small_config());
  EncodedDialog d{{1}, {2, 3}, {4, 5, 6}, {0}, {1, 1}};
  ad::Tape tape;
  Network net(tape, p);
  auto out = net.forward(d);
  ASSERT_EQ(out.sentiment_logits.size(), 5u);
  ASSERT_EQ(out.dialog_act_logits.size(), 5u);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(out.sentiment_logits[t].shape(), (ad::Shape{1, 3}));
    EXPECT_EQ(out.dialog_act_logits[t].shape(), (ad::Shape{1, 15}));
    EXPECT_NEAR(ad::softmax_cross_entropy(out.sentiment_logits[t], 1).value()[0], std::log(3.0), 1e-15);
    EXPECT_NEAR(ad::softmax_cross_entropy(out.dialog_act_logits[t], 7).value()[0], std::log(15.0), 1e-15);
  }
}

TEST(Forward, InferenceIsBitIdentical) {
  auto c = small_config();
  c.dropout_rate = 0.4;
  auto p = ModelParams::initialize(c, 11);
  EncodedDialog d{{1, 2}, {3}, {4, 5, 6}};
  auto run = [&] {
    ad::Tape tape;
    Network net(tape, p, Mode::Inference, nullptr);
    auto out = net.forward(d);
    std::vector<Vec> v;
    for (auto& l : out.sentiment_logits) v.push_back(values(l));
    for (auto& l : out.dialog_act_logits) v.push_back(values(l));
    return v;
  };
  EXPECT_EQ(run(), run());
}

TEST(Forward, PredictionsCausal) {
  auto p = ModelParams::initialize(small_config(), 12);
  EncodedDialog a{{1, 2}, {3}, {4, 5, 6}};
  EncodedDialog b = a;
  b[2] = {6, 6};
  auto pa = predict(p, a), pb = predict(p, b);
  EXPECT_EQ(pa[0], pb[0]);
  EXPECT_EQ(pa[1], pb[1]);
}

TEST(Forward, TrainingWithDropoutNeedsRng) {
  auto c = small_config();
  c.dropout_rate = 0.4;
  ModelParams p(c);
  ad::Tape tape;
  EXPECT_THROW(Network(tape, p, Mode::Train, nullptr), std::invalid_argument);
}

TEST(Forward, FullModelGradientCheck) {
  // 2 posts, 3 tokens total, every parameter coordinate checked.
  auto c = small_config();
  auto p = ModelParams::initialize(c, 13);
  // Non-zero biases so every bias path is exercised.
  Rng rng(6);
  for (auto* q : p.parameters())
    if (q->value.shape().rank() == 1)
      for (double& v : q->value.mutable_values()) v += rng.uniform(-0.5, 0.5);
  EncodedDialog d{{1, 2}, {3}};
  auto loss = [&](ad::Tape& tape) {
    Network net(tape, p, Mode::Train, nullptr);
    auto out = net.forward(d);
    ad::Var l = ad::add(ad::softmax_cross_entropy(out.sentiment_logits[0], 0),
                        ad::softmax_cross_entropy(out.dialog_act_logits[0], 4));
    l = ad::add(l, ad::softmax_cross_entropy(out.sentiment_logits[1], 2));
    return ad::add(l, ad::softmax_cross_entropy(out.dialog_act_logits[1], 9));
  };
  auto res = ad::grad_check(loss, p.parameters(), 1e-4);
  EXPECT_EQ(res.checked, p.parameter_count());
  EXPECT_LT(res.max_rel_error, 1e-4) << res.param << "[" << res.coordinate << "] analytic " << res.analytic
                                     << " numeric " << res.numeric;
}

TEST(Predict, TieBreakAndShiftInvariance) {
  const double zeros[] = {0, 0, 0};
  EXPECT_EQ(argmax(zeros), 0u);
  const double onehot[] = {0, 0, 1, 0};
  EXPECT_EQ(argmax(onehot), 2u);
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(15);
    for (double& x : v) x = rng.uniform(-3, 3);
    auto w = v;
    const double shift = rng.uniform(-10, 10);
    for (double& x : w) x += shift;
    EXPECT_EQ(argmax(v), argmax(w));
  }
}

TEST(Checkpoint, ModelRoundTrip) {
  auto p = ModelParams::initialize(small_config(), 14);
  std::ostringstream os;
  ad::save_checkpoint(os, p.parameters());
  ModelParams q(small_config());
  std::istringstream in(os.str());
  ad::load_checkpoint(in, q.parameters());
  EncodedDialog d{{1, 2}, {3}};
  EXPECT_EQ(predict(p, d), predict(q, d));
  for (std::size_t i = 0; i < p.parameters().size(); ++i)
    EXPECT_EQ(std::vector<double>(p.parameters()[i]->value.values().begin(), p.parameters()[i]->value.values().end()),
              std::vector<double>(q.parameters()[i]->value.values().begin(), q.parameters()[i]->value.values().end()));
}

}  // namespace
}  // namespace dasent
