#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "facetalk/param_store.hpp"
#include "facetalk/rng.hpp"
#include "facetalk/tape.hpp"

namespace facetalk {

// relu6 LSTM layer: four gates over [h_prev, x] with W_* of shape
// [hidden x (hidden + input)] and b_* of shape [hidden].
void add_lstm_layer(ParamStore& store, const std::string& prefix, std::size_t input,
                    std::size_t hidden, Rng& rng);

struct LstmState {
  Var h;
  Var c;
};

// i, f, o = sigmoid(W [h, x] + b); g = relu6(W_c [h, x] + b_c);
// c = f * c_prev + i * g; h = o * relu6(c).
LstmState lstm_cell_step(Tape& tape, ParamStore& store, const std::string& prefix,
                         const LstmState& prev, Var x);

// Zero state for a batch of `batch` rows.
LstmState zero_state(Tape& tape, std::size_t batch, std::size_t hidden);

// Runs a layer stack over a frame sequence starting from `init` (one state
// per layer); layer k consumes the hidden sequence of layer k-1. When `keep`
// is given, a row whose entry is 0 at step t leaves that row's state
// unchanged. Returns the final state of every layer.
std::vector<LstmState> run_stack(Tape& tape, ParamStore& store,
                                 const std::vector<std::string>& prefixes,
                                 std::vector<LstmState> init, std::span<const Var> inputs,
                                 std::span<const Var> keep = {});

// Decoder modes. Teacher forcing feeds ground-truth frame l-1 at step l;
// free running feeds back the model's own output. Step 1 always consumes
// `start`.
std::vector<Var> decode_teacher_forced(Tape& tape, ParamStore& store,
                                       const std::vector<std::string>& layers,
                                       const std::string& out_prefix,
                                       std::vector<LstmState> init, Var start,
                                       std::span<const Var> gt);
std::vector<Var> decode_free_running(Tape& tape, ParamStore& store,
                                     const std::vector<std::string>& layers,
                                     const std::string& out_prefix,
                                     std::vector<LstmState> init, Var start,
                                     std::size_t steps);

struct ListeningConfig {
  std::size_t layers = 4;
  std::size_t hidden = 32;
  // Window length n; output length equals input length.
  std::size_t n = 10;

  void validate() const;
};

// Speaker AU+POSE window -> listener AU+POSE window of the same length.
// Blocks: listen.layer{k}.* (encoder), listen.dec.layer{k}.*, listen.out.{W,b},
// listen.config.
class ListeningModel {
 public:
  ListeningModel(const ListeningConfig& cfg, std::uint64_t seed);

  const ListeningConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Frames are [B x 20] in normalized units; the sequence length must be n.
  std::vector<LstmState> encode(Tape& tape, std::span<const Var> input);
  // Teacher forcing starts from the last encoder input frame.
  std::vector<Var> forward_teacher_forced(Tape& tape, std::span<const Var> input,
                                          std::span<const Var> gt);
  std::vector<Var> forward_free_running(Tape& tape, std::span<const Var> input);

  // Free-running prediction for one normalized [n x 20] window.
  Array predict(const Array& window);

  const std::vector<std::string>& encoder_layers() const { return enc_; }
  const std::vector<std::string>& decoder_layers() const { return dec_; }

 private:
  ListeningConfig cfg_;
  ParamStore params_;
  std::vector<std::string> enc_;
  std::vector<std::string> dec_;
};

// Token -> row map. Row 0 is PAD, row 1 is UNK, then the corpus tokens in
// sorted order.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  Vocabulary();
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences);

  std::size_t size() const { return tokens_.size(); }
  std::size_t index(const std::string& token) const;
  const std::string& token(std::size_t i) const { return tokens_.at(i); }

  // One token per line, in row order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Row indices of a sentence truncated or PAD-padded to `length`.
std::vector<std::size_t> embed_indices(const Vocabulary& vocab,
                                       const std::vector<std::string>& tokens,
                                       std::size_t length);

struct SpeakingConfig {
  std::size_t layers = 2;
  std::size_t hidden = 32;
  std::size_t embed = 16;
  std::size_t enc_len = 25;
  std::size_t dec_len = 20;

  void validate() const;
};

struct TextEncoding {
  // Linear projection of the top encoder hidden state, [B x hidden].
  Var h_text;
  std::vector<LstmState> layers;
};

// Transcript -> speaker AU+POSE sequence of dec_len frames. Blocks:
// speak.embed, speak.enc.layer{k}.*, speak.text.{W,b}, speak.dec.layer{k}.*,
// speak.out.{W,b}, speak.config.
class SpeakingModel {
 public:
  SpeakingModel(const SpeakingConfig& cfg, Vocabulary vocab, std::uint64_t seed);

  const SpeakingConfig& config() const { return cfg_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // `batch` holds enc_len row indices per sentence. PAD positions leave the
  // encoder state unchanged.
  TextEncoding encode_text(Tape& tape, const std::vector<std::vector<std::size_t>>& batch);
  // Embedding rows for one sentence, [enc_len x embed].
  Array embed_tokens(const std::vector<std::string>& tokens);

  std::vector<Var> forward_teacher_forced(Tape& tape,
                                          const std::vector<std::vector<std::size_t>>& batch,
                                          std::span<const Var> gt);
  std::vector<Var> forward_free_running(Tape& tape,
                                        const std::vector<std::vector<std::size_t>>& batch);

  // Free-running normalized [dec_len x 20] output for one sentence.
  Array predict(const std::vector<std::string>& tokens);

  const std::vector<std::string>& encoder_layers() const { return enc_; }
  const std::vector<std::string>& decoder_layers() const { return dec_; }
  // Blocks frozen while only the decoder trains.
  std::vector<std::string> encoder_blocks() const;

 private:
  std::vector<LstmState> decoder_init(Tape& tape, const TextEncoding& enc);

  SpeakingConfig cfg_;
  Vocabulary vocab_;
  ParamStore params_;
  std::vector<std::string> enc_;
  std::vector<std::string> dec_;
};

}  // namespace facetalk
