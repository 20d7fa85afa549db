#include "facetalk/seqmodels.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "facetalk/error.hpp"
#include "facetalk/features.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/losses.hpp"
#include "facetalk/ops.hpp"

namespace facetalk {

namespace {

constexpr const char* kGates[] = {"i", "f", "o", "c"};

std::string layer_name(const std::string& base, std::size_t k) {
  return base + ".layer" + std::to_string(k);
}

}  // namespace

void add_lstm_layer(ParamStore& store, const std::string& prefix, std::size_t input,
                    std::size_t hidden, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(hidden + input));
  for (const char* g : kGates)
    store.add_uniform(prefix + ".W_" + g, Shape{hidden, hidden + input}, scale, rng);
  for (const char* g : kGates) store.add_uniform(prefix + ".b_" + g, Shape{hidden}, scale, rng);
}

LstmState zero_state(Tape& tape, std::size_t batch, std::size_t hidden) {
  return {tape.constant(Array(Shape{batch, hidden})), tape.constant(Array(Shape{batch, hidden}))};
}

LstmState lstm_cell_step(Tape& tape, ParamStore& store, const std::string& prefix,
                         const LstmState& prev, Var x) {
  const std::size_t hidden = store.at(prefix + ".b_i").value.size();
  if (prev.h.cols() != hidden || prev.c.cols() != hidden) {
    throw ShapeError(prefix + ": state width " + std::to_string(prev.h.cols()) +
                     " does not match hidden size " + std::to_string(hidden));
  }
  if (x.rows() != prev.h.rows()) {
    throw ShapeError(prefix + ": input batch " + shape_string(x.shape()) +
                     " does not match state " + shape_string(prev.h.shape()));
  }
  const Var parts[] = {prev.h, x};
  const Var hx = ops::concat_cols(parts);
  auto gate = [&](const char* g) {
    return ops::linear(hx, tape.param(store, prefix + ".W_" + g),
                       tape.param(store, prefix + ".b_" + g));
  };
  const Var i = ops::sigmoid(gate("i"));
  const Var f = ops::sigmoid(gate("f"));
  const Var o = ops::sigmoid(gate("o"));
  const Var candidate = ops::relu6(gate("c"));
  const Var c = ops::add(ops::mul(f, prev.c), ops::mul(i, candidate));
  return {ops::mul(o, ops::relu6(c)), c};
}

namespace {

// keep * next + (1 - keep) * prev, with keep a 0/1 column broadcast to the
// state width.
Var select_rows(Tape& tape, const Array& keep_col, Var next, Var prev) {
  Array keep(next.shape()), drop(next.shape());
  for (std::size_t r = 0; r < next.rows(); ++r)
    for (std::size_t c = 0; c < next.cols(); ++c) {
      keep.at(r, c) = keep_col[r];
      drop.at(r, c) = 1.0 - keep_col[r];
    }
  return ops::add(ops::mul(tape.constant(std::move(keep)), next),
                  ops::mul(tape.constant(std::move(drop)), prev));
}

}  // namespace

std::vector<LstmState> run_stack(Tape& tape, ParamStore& store,
                                 const std::vector<std::string>& prefixes,
                                 std::vector<LstmState> init, std::span<const Var> inputs,
                                 std::span<const Var> keep) {
  if (init.size() != prefixes.size()) throw ShapeError("one initial state per layer required");
  if (!keep.empty() && keep.size() != inputs.size()) throw ShapeError("keep mask length mismatch");
  std::vector<LstmState> state = std::move(init);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const bool masked = !keep.empty();
    // Copied: recording new nodes may move tape storage.
    const Array keep_col = masked ? keep[t].value() : Array();
    const bool all_kept =
        masked && std::all_of(keep_col.values().begin(), keep_col.values().end(),
                              [](double v) { return v == 1.0; });
    Var x = inputs[t];
    for (std::size_t k = 0; k < prefixes.size(); ++k) {
      LstmState next = lstm_cell_step(tape, store, prefixes[k], state[k], x);
      if (masked && !all_kept) {
        next.h = select_rows(tape, keep_col, next.h, state[k].h);
        next.c = select_rows(tape, keep_col, next.c, state[k].c);
      }
      state[k] = next;
      x = next.h;
    }
  }
  return state;
}

namespace {

Var output_frame(Tape& tape, ParamStore& store, const std::string& out_prefix, Var h) {
  return ops::linear(h, tape.param(store, out_prefix + ".W"), tape.param(store, out_prefix + ".b"));
}

std::vector<Var> decode(Tape& tape, ParamStore& store, const std::vector<std::string>& layers,
                        const std::string& out_prefix, std::vector<LstmState> state, Var start,
                        std::span<const Var> gt, std::size_t steps) {
  std::vector<Var> out;
  Var input = start;
  for (std::size_t l = 0; l < steps; ++l) {
    Var x = input;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      state[k] = lstm_cell_step(tape, store, layers[k], state[k], x);
      x = state[k].h;
    }
    out.push_back(output_frame(tape, store, out_prefix, x));
    input = gt.empty() ? out.back() : gt[l];
  }
  return out;
}

}  // namespace

std::vector<Var> decode_teacher_forced(Tape& tape, ParamStore& store,
                                       const std::vector<std::string>& layers,
                                       const std::string& out_prefix,
                                       std::vector<LstmState> init, Var start,
                                       std::span<const Var> gt) {
  if (gt.empty()) throw ShapeError("teacher-forced decoding needs a ground-truth sequence");
  return decode(tape, store, layers, out_prefix, std::move(init), start, gt, gt.size());
}

std::vector<Var> decode_free_running(Tape& tape, ParamStore& store,
                                     const std::vector<std::string>& layers,
                                     const std::string& out_prefix,
                                     std::vector<LstmState> init, Var start,
                                     std::size_t steps) {
  return decode(tape, store, layers, out_prefix, std::move(init), start, {}, steps);
}

void ListeningConfig::validate() const {
  if (layers < 1) throw ConfigError("listening model needs layers >= 1");
  if (hidden < 1) throw ConfigError("listening model needs hidden >= 1");
  if (n < 2) throw ConfigError("listening window n must be >= 2");
}

ListeningModel::ListeningModel(const ListeningConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0x115e));
  for (std::size_t k = 0; k < cfg_.layers; ++k) {
    enc_.push_back(layer_name("listen", k));
    add_lstm_layer(params_, enc_.back(), k == 0 ? kFrameDim : cfg_.hidden, cfg_.hidden, rng);
  }
  for (std::size_t k = 0; k < cfg_.layers; ++k) {
    dec_.push_back(layer_name("listen.dec", k));
    add_lstm_layer(params_, dec_.back(), k == 0 ? kFrameDim : cfg_.hidden, cfg_.hidden, rng);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden));
  params_.add_uniform("listen.out.W", Shape{kFrameDim, cfg_.hidden}, scale, rng);
  params_.add_uniform("listen.out.b", Shape{kFrameDim}, scale, rng);
}

std::vector<LstmState> ListeningModel::encode(Tape& tape, std::span<const Var> input) {
  if (input.size() != cfg_.n) {
    throw ShapeError("listening input must have n = " + std::to_string(cfg_.n) +
                     " frames, got " + std::to_string(input.size()));
  }
  const std::size_t batch = input.front().rows();
  std::vector<LstmState> init(cfg_.layers, zero_state(tape, batch, cfg_.hidden));
  return run_stack(tape, params_, enc_, std::move(init), input);
}

std::vector<Var> ListeningModel::forward_teacher_forced(Tape& tape, std::span<const Var> input,
                                                        std::span<const Var> gt) {
  if (gt.size() != cfg_.n) throw ShapeError("listening target must have n frames");
  return decode_teacher_forced(tape, params_, dec_, "listen.out", encode(tape, input),
                               input.back(), gt);
}

std::vector<Var> ListeningModel::forward_free_running(Tape& tape, std::span<const Var> input) {
  return decode_free_running(tape, params_, dec_, "listen.out", encode(tape, input),
                             input.back(), cfg_.n);
}

Array ListeningModel::predict(const Array& window) {
  Tape tape;
  tape.treat_as_constant(params_);
  const auto frames = frames_of(tape, window);
  return sequences_of(forward_free_running(tape, frames)).front();
}

Vocabulary::Vocabulary() : tokens_{"<pad>", "<unk>"} {
  index_[tokens_[0]] = kPad;
  index_[tokens_[1]] = kUnk;
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences) {
  std::set<std::string> unique;
  for (const auto& s : sentences) unique.insert(s.begin(), s.end());
  Vocabulary v;
  for (const auto& tok : unique) {
    if (v.index_.count(tok)) continue;
    v.index_[tok] = v.tokens_.size();
    v.tokens_.push_back(tok);
  }
  return v;
}

std::size_t Vocabulary::index(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string text;
  for (const auto& t : tokens_) text += t + "\n";
  write_text_file(path, text);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    lines.emplace_back(text.substr(start, nl - start));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  if (lines.size() < 2 || lines[0] != "<pad>" || lines[1] != "<unk>") {
    throw DataError(path.string() + ": vocabulary must start with <pad> and <unk>");
  }
  Vocabulary v;
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (v.index_.count(lines[i])) throw DataError(path.string() + ": duplicate token '" + lines[i] + "'");
    v.index_[lines[i]] = v.tokens_.size();
    v.tokens_.push_back(lines[i]);
  }
  return v;
}

std::vector<std::size_t> embed_indices(const Vocabulary& vocab,
                                       const std::vector<std::string>& tokens,
                                       std::size_t length) {
  std::vector<std::size_t> out(length, Vocabulary::kPad);
  for (std::size_t i = 0; i < std::min(length, tokens.size()); ++i) out[i] = vocab.index(tokens[i]);
  return out;
}

void SpeakingConfig::validate() const {
  if (layers < 1) throw ConfigError("speaking model needs layers >= 1");
  if (hidden < 1 || embed < 1) throw ConfigError("speaking model needs hidden, embed >= 1");
  if (enc_len < 1) throw ConfigError("speaking encoder length must be >= 1");
  if (dec_len < 2) throw ConfigError("speaking decoder length must be >= 2");
}

SpeakingModel::SpeakingModel(const SpeakingConfig& cfg, Vocabulary vocab, std::uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)) {
  cfg_.validate();
  // Embedding rows depend only on (seed, token), not on vocabulary order.
  Array table(Shape{vocab_.size(), cfg_.embed});
  const double embed_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.embed));
  for (std::size_t r = 1; r < vocab_.size(); ++r) {
    Rng row_rng(mix_seed(seed, fnv1a64(vocab_.token(r))));
    for (std::size_t c = 0; c < cfg_.embed; ++c) table.at(r, c) = row_rng.uniform(-embed_scale, embed_scale);
  }
  params_.add("speak.embed", std::move(table));

  Rng rng(mix_seed(seed, 0x5bea));
  for (std::size_t k = 0; k < cfg_.layers; ++k) {
    enc_.push_back(layer_name("speak.enc", k));
    add_lstm_layer(params_, enc_.back(), k == 0 ? cfg_.embed : cfg_.hidden, cfg_.hidden, rng);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden));
  params_.add_uniform("speak.text.W", Shape{cfg_.hidden, cfg_.hidden}, scale, rng);
  params_.add_uniform("speak.text.b", Shape{cfg_.hidden}, scale, rng);
  for (std::size_t k = 0; k < cfg_.layers; ++k) {
    dec_.push_back(layer_name("speak.dec", k));
    add_lstm_layer(params_, dec_.back(), k == 0 ? kFrameDim : cfg_.hidden, cfg_.hidden, rng);
  }
  params_.add_uniform("speak.out.W", Shape{kFrameDim, cfg_.hidden}, scale, rng);
  params_.add_uniform("speak.out.b", Shape{kFrameDim}, scale, rng);
}

std::vector<std::string> SpeakingModel::encoder_blocks() const {
  std::vector<std::string> out;
  for (const auto& name : params_.names()) {
    if (name.rfind("speak.embed", 0) == 0 || name.rfind("speak.enc.", 0) == 0 ||
        name.rfind("speak.text.", 0) == 0) {
      out.push_back(name);
    }
  }
  return out;
}

TextEncoding SpeakingModel::encode_text(Tape& tape,
                                        const std::vector<std::vector<std::size_t>>& batch) {
  if (batch.empty()) throw ShapeError("empty sentence batch");
  for (const auto& s : batch) {
    if (s.size() != cfg_.enc_len) {
      throw ShapeError("sentence must have enc_len = " + std::to_string(cfg_.enc_len) +
                       " indices, got " + std::to_string(s.size()));
    }
    for (std::size_t idx : s)
      if (idx >= vocab_.size()) throw ShapeError("token index out of vocabulary range");
  }
  const Var table = tape.param(params_, "speak.embed");
  std::vector<Var> inputs, keep;
  for (std::size_t t = 0; t < cfg_.enc_len; ++t) {
    std::vector<std::size_t> idx;
    Array k(Shape{batch.size()});
    for (std::size_t b = 0; b < batch.size(); ++b) {
      idx.push_back(batch[b][t]);
      k[b] = batch[b][t] == Vocabulary::kPad ? 0.0 : 1.0;
    }
    inputs.push_back(ops::embedding(table, idx, true));
    keep.push_back(tape.constant(std::move(k)));
  }
  std::vector<LstmState> init(cfg_.layers, zero_state(tape, batch.size(), cfg_.hidden));
  TextEncoding enc;
  enc.layers = run_stack(tape, params_, enc_, std::move(init), inputs, keep);
  enc.h_text = ops::linear(enc.layers.back().h, tape.param(params_, "speak.text.W"),
                           tape.param(params_, "speak.text.b"));
  return enc;
}

Array SpeakingModel::embed_tokens(const std::vector<std::string>& tokens) {
  Tape tape;
  tape.treat_as_constant(params_);
  const auto idx = embed_indices(vocab_, tokens, cfg_.enc_len);
  return ops::embedding(tape.param(params_, "speak.embed"), idx, true).value();
}

std::vector<LstmState> SpeakingModel::decoder_init(Tape&, const TextEncoding& enc) {
  std::vector<LstmState> init;
  for (const auto& layer : enc.layers) init.push_back({enc.h_text, layer.c});
  return init;
}

std::vector<Var> SpeakingModel::forward_teacher_forced(
    Tape& tape, const std::vector<std::vector<std::size_t>>& batch, std::span<const Var> gt) {
  if (gt.size() != cfg_.dec_len) throw ShapeError("speaking target must have dec_len frames");
  const TextEncoding enc = encode_text(tape, batch);
  const Var start = tape.constant(Array(Shape{batch.size(), kFrameDim}));
  return decode_teacher_forced(tape, params_, dec_, "speak.out", decoder_init(tape, enc), start, gt);
}

std::vector<Var> SpeakingModel::forward_free_running(
    Tape& tape, const std::vector<std::vector<std::size_t>>& batch) {
  const TextEncoding enc = encode_text(tape, batch);
  const Var start = tape.constant(Array(Shape{batch.size(), kFrameDim}));
  return decode_free_running(tape, params_, dec_, "speak.out", decoder_init(tape, enc), start,
                             cfg_.dec_len);
}

Array SpeakingModel::predict(const std::vector<std::string>& tokens) {
  Tape tape;
  tape.treat_as_constant(params_);
  const std::vector<std::vector<std::size_t>> batch{embed_indices(vocab_, tokens, cfg_.enc_len)};
  return sequences_of(forward_free_running(tape, batch)).front();
}

}  // namespace facetalk
