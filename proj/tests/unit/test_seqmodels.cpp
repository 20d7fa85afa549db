#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "facetalk/error.hpp"
#include "facetalk/features.hpp"
#include "facetalk/gradcheck.hpp"
#include "facetalk/losses.hpp"
#include "facetalk/ops.hpp"
#include "facetalk/seqmodels.hpp"

using namespace facetalk;

namespace {

void zero_all(ParamStore& store) {
  for (std::size_t i = 0; i < store.size(); ++i) store.entry(i).value.fill(0.0);
}

Array random_window(Rng& rng, std::size_t l) {
  Array a(Shape{l, kFrameDim});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(0.0, 1.0);
  return a;
}

double scalar_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double scalar_relu6(double x) { return std::min(std::max(x, 0.0), 6.0); }

}  // namespace

TEST_CASE("lstm cell with zero weights") {
  ParamStore store;
  Rng rng(1);
  add_lstm_layer(store, "cell", 3, 2, rng);
  zero_all(store);
  Tape tape;
  const Var x = tape.constant(Array::matrix(1, 3, {0.3, -2.0, 5.0}));
  const LstmState s0 = zero_state(tape, 1, 2);
  const LstmState s1 = lstm_cell_step(tape, store, "cell", s0, x);
  CHECK(s1.h.value()[0] == 0.0);
  CHECK(s1.c.value()[1] == 0.0);

  const LstmState prev{tape.constant(Array::matrix(1, 2, {0.0, 0.0})),
                       tape.constant(Array::matrix(1, 2, {4.0, 20.0}))};
  const LstmState s2 = lstm_cell_step(tape, store, "cell", prev, x);
  CHECK(s2.c.value()[0] == 2.0);
  CHECK(s2.c.value()[1] == 10.0);
  CHECK(s2.h.value()[0] == 0.5 * scalar_relu6(2.0));
  CHECK(s2.h.value()[1] == 0.5 * 6.0);
}

TEST_CASE("lstm cell matches a scalar evaluation") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 1 + rng.index(4), hid = 1 + rng.index(4), batch = 1 + rng.index(3);
    ParamStore store;
    add_lstm_layer(store, "L", in, hid, rng);
    for (std::size_t i = 0; i < store.size(); ++i)
      for (double& v : store.entry(i).value.values()) v = rng.uniform(-2.0, 2.0);
    Array h(Shape{batch, hid}), c(Shape{batch, hid}), x(Shape{batch, in});
    for (double& v : h.values()) v = rng.uniform(-1.0, 6.0);
    for (double& v : c.values()) v = rng.uniform(-3.0, 8.0);
    for (double& v : x.values()) v = rng.uniform(-1.0, 1.0);
    Tape tape;
    const LstmState out = lstm_cell_step(tape, store, "L", {tape.constant(h), tape.constant(c)},
                                         tape.constant(x));
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<double> hx;
      for (std::size_t j = 0; j < hid; ++j) hx.push_back(h.at(b, j));
      for (std::size_t j = 0; j < in; ++j) hx.push_back(x.at(b, j));
      for (std::size_t u = 0; u < hid; ++u) {
        auto pre = [&](const char* g) {
          const Array& W = store.at(std::string("L.W_") + g).value;
          double s = store.at(std::string("L.b_") + g).value[u];
          for (std::size_t j = 0; j < hx.size(); ++j) s += W.at(u, j) * hx[j];
          return s;
        };
        const double ig = scalar_sigmoid(pre("i")), fg = scalar_sigmoid(pre("f"));
        const double og = scalar_sigmoid(pre("o")), g = scalar_relu6(pre("c"));
        const double cn = fg * c.at(b, u) + ig * g;
        const double hn = og * scalar_relu6(cn);
        CHECK(std::fabs(out.c.value().at(b, u) - cn) <= 1e-12);
        CHECK(std::fabs(out.h.value().at(b, u) - hn) <= 1e-12);
        CHECK(std::fabs(hn) <= 6.0);
      }
    }
  }
}

TEST_CASE("lstm cell rejects mismatched shapes") {
  ParamStore store;
  Rng rng(3);
  add_lstm_layer(store, "L", 3, 2, rng);
  Tape tape;
  CHECK_THROWS_AS(lstm_cell_step(tape, store, "L", zero_state(tape, 1, 2),
                                 tape.constant(Array(Shape{1, 4}))),
                  ShapeError);
  CHECK_THROWS_AS(lstm_cell_step(tape, store, "L", zero_state(tape, 1, 3),
                                 tape.constant(Array(Shape{1, 3}))),
                  ShapeError);
}

TEST_CASE("listening model shapes and zero-weight behavior") {
  ListeningConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 8;
  cfg.n = 10;
  ListeningModel model(cfg, 7);
  CHECK(model.params().contains("listen.layer0.W_i"));
  CHECK(model.params().contains("listen.layer1.b_c"));
  CHECK(model.params().contains("listen.dec.layer1.W_o"));
  CHECK(model.params().at("listen.layer0.W_i").value.shape() == Shape{8, 28});
  CHECK(model.params().at("listen.out.W").value.shape() == Shape{20, 8});

  Rng rng(4);
  const Array window = random_window(rng, 10);
  CHECK(model.predict(window).shape() == Shape{10, 20});
  CHECK_THROWS_AS(model.predict(random_window(rng, 9)), ShapeError);

  zero_all(model.params());
  CHECK(model.predict(window) == Array(Shape{10, 20}));
  Tape tape;
  const auto states = model.encode(tape, frames_of(tape, window));
  for (const auto& s : states) CHECK(s.h.value() == Array(Shape{1, 8}));

  Array& bias = model.params().at("listen.out.b").value;
  for (std::size_t d = 0; d < 20; ++d) bias[d] = 0.01 * static_cast<double>(d);
  const Array out = model.predict(window);
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t d = 0; d < 20; ++d) CHECK(out.at(t, d) == bias[d]);
}

TEST_CASE("listening model is order sensitive and deterministic") {
  ListeningConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 8;
  ListeningModel a(cfg, 11), b(cfg, 11);
  Rng rng(5);
  const Array w = random_window(rng, 10);
  Array reversed(w.shape());
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t d = 0; d < 20; ++d) reversed.at(t, d) = w.at(9 - t, d);
  CHECK(a.predict(w) == b.predict(w));
  CHECK(a.predict(w) != a.predict(reversed));
}

TEST_CASE("teacher forcing on own output equals free running") {
  ListeningConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 6;
  cfg.n = 6;
  ListeningModel model(cfg, 3);
  Rng rng(6);
  const Array w = random_window(rng, 6);
  const Array free = model.predict(w);
  Tape tape;
  const auto tf = model.forward_teacher_forced(tape, frames_of(tape, w), frames_of(tape, free));
  const Array forced = sequences_of(tf).front();
  for (std::size_t i = 0; i < free.size(); ++i) CHECK(std::fabs(forced[i] - free[i]) <= 1e-14);
}

TEST_CASE("listening gradients pass the finite-difference check") {
  ListeningConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 5;
  cfg.n = 5;
  ListeningModel model(cfg, 21);
  Rng rng(7);
  const Array input = random_window(rng, 5), target = random_window(rng, 5);
  const Array input2 = random_window(rng, 5), target2 = random_window(rng, 5);
  LossConfig loss;
  GradCheckOptions opts;
  opts.samples = 80;
  const auto report = check_gradients({&model.params()}, [&](Tape& tape) {
    auto stack = [&](const Array& a, const Array& b) {
      std::vector<Var> out;
      for (std::size_t t = 0; t < 5; ++t) {
        Array m(Shape{2, 20});
        for (std::size_t d = 0; d < 20; ++d) {
          m.at(0, d) = a.at(t, d);
          m.at(1, d) = b.at(t, d);
        }
        out.push_back(tape.constant(m));
      }
      return out;
    };
    const auto x = stack(input, input2), y = stack(target, target2);
    const auto pred = model.forward_teacher_forced(tape, x, y);
    return total_loss(y, pred, loss).total;
  }, opts);
  CHECK(report.checked >= 60);
  CHECK(report.passed());
}

TEST_CASE("vocabulary and token embedding") {
  const Vocabulary vocab = Vocabulary::build({{"the", "game"}, {"game", "night"}});
  CHECK(vocab.size() == 5);
  CHECK(vocab.index("game") == 2);
  CHECK(vocab.index("zzz") == Vocabulary::kUnk);
  CHECK(embed_indices(vocab, {}, 4) == std::vector<std::size_t>(4, Vocabulary::kPad));
  std::vector<std::string> long_sentence(30, "night");
  long_sentence[24] = "the";
  long_sentence[25] = "game";
  const auto idx = embed_indices(vocab, long_sentence, 25);
  CHECK(idx.size() == 25);
  CHECK(idx[24] == vocab.index("the"));

  SpeakingConfig cfg;
  cfg.hidden = 6;
  cfg.embed = 4;
  cfg.enc_len = 25;
  SpeakingModel model(cfg, vocab, 9);
  const Array empty = model.embed_tokens({});
  CHECK(empty == Array(Shape{25, 4}));
  const Array twice = model.embed_tokens({"game", "game"});
  for (std::size_t c = 0; c < 4; ++c) CHECK(twice.at(0, c) == twice.at(1, c));

  // Rows depend on the token, not its position in the vocabulary.
  const Vocabulary other = Vocabulary::build({{"game", "zebra", "aardvark"}});
  SpeakingModel model2(cfg, other, 9);
  const Array a = model.embed_tokens({"game"}), b = model2.embed_tokens({"game"});
  for (std::size_t c = 0; c < 4; ++c) CHECK(a.at(0, c) == b.at(0, c));

}

TEST_CASE("speaking model encoding") {
  const Vocabulary vocab = Vocabulary::build({{"big", "game", "night", "win"}});
  SpeakingConfig cfg;
  cfg.hidden = 6;
  cfg.embed = 4;
  cfg.enc_len = 8;
  cfg.dec_len = 5;
  SpeakingModel model(cfg, vocab, 4);
  CHECK(model.params().contains("speak.embed"));
  CHECK(model.params().contains("speak.enc.layer1.W_f"));
  CHECK(model.params().contains("speak.text.W"));
  CHECK(model.params().contains("speak.dec.layer0.b_o"));
  CHECK(model.params().contains("speak.out.b"));
  CHECK(model.predict({"big", "game"}).shape() == Shape{5, 20});

  auto encode = [&](const std::vector<std::string>& tokens, std::size_t len) {
    SpeakingConfig c = cfg;
    c.enc_len = len;
    SpeakingModel m(c, vocab, 4);
    Tape tape;
    return m.encode_text(tape, {embed_indices(vocab, tokens, len)}).h_text.value();
  };
  // PAD suffix is inert.
  CHECK(encode({"big", "game"}, 8) == encode({"big", "game"}, 3));
  CHECK(encode({"big", "game"}, 8) != encode({"big", "win"}, 8));

  SpeakingModel zeroed(cfg, vocab, 4);
  zero_all(zeroed.params());
  Tape tape;
  const auto enc = zeroed.encode_text(tape, {embed_indices(vocab, {"win"}, 8)});
  CHECK(enc.h_text.value() == Array(Shape{1, 6}));
  CHECK(zeroed.predict({"win"}) == Array(Shape{5, 20}));
  CHECK_THROWS_AS(zeroed.encode_text(tape, {std::vector<std::size_t>(7, 0)}), ShapeError);
}

TEST_CASE("speaking gradients pass the finite-difference check") {
  const Vocabulary vocab = Vocabulary::build({{"big", "game", "night", "win", "yes"}});
  SpeakingConfig cfg;
  cfg.hidden = 5;
  cfg.embed = 3;
  cfg.enc_len = 6;
  cfg.dec_len = 8;
  SpeakingModel model(cfg, vocab, 13);
  Rng rng(8);
  const Array target = random_window(rng, 8);
  const std::vector<std::vector<std::size_t>> batch{
      embed_indices(vocab, {"big", "game", "win"}, 6)};
  LossConfig loss;
  GradCheckOptions opts;
  opts.samples = 80;
  const auto report = check_gradients({&model.params()}, [&](Tape& tape) {
    const auto y = frames_of(tape, target);
    return total_loss(y, model.forward_teacher_forced(tape, batch, y), loss).total;
  }, opts);
  CHECK(report.checked >= 60);
  CHECK(report.passed());
}

TEST_CASE("vocabulary file roundtrip") {
  const Vocabulary vocab = Vocabulary::build({{"b", "a", "c"}});
  const auto path = std::filesystem::temp_directory_path() / "facetalk_test_vocab.txt";
  vocab.save(path);
  const Vocabulary back = Vocabulary::load(path);
  CHECK(back.size() == vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) CHECK(back.token(i) == vocab.token(i));
}
