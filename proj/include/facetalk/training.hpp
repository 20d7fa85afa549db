#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "facetalk/features.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/losses.hpp"
#include "facetalk/seqmodels.hpp"

namespace facetalk {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch = 16;
  std::size_t iters = 80000;
  std::uint64_t seed = 0;
  // History rows are emitted every eval_interval iterations and at the end.
  std::size_t eval_interval = 100;
  // Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 5.0;
  LossConfig loss;

  void validate() const;
};

struct HistoryRow {
  std::size_t iter = 0;
  double total = 0.0;
  double mse = 0.0;
  double con = 0.0;
};

struct TrainHistory {
  std::vector<HistoryRow> rows;
  // Batch total loss of every iteration.
  std::vector<double> losses;
};

// CSV with header `iter,total,mse,con`.
std::string format_history(const std::vector<HistoryRow>& rows);
void write_history(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

// Normalized (speaker window -> listener window) pair.
struct SequencePair {
  Array input;
  Array target;
};

// Normalized (transcript -> speaker track) pair.
struct TextPair {
  std::vector<std::string> tokens;
  Array target;
};

// Stats over both tracks of the train-split samples only.
NormStats train_stats(const std::vector<ConversationSample>& samples);

std::vector<const ConversationSample*> select_split(const std::vector<ConversationSample>& samples,
                                                    Split split);

// Aligned windows of length n at the given stride from every sample.
std::vector<SequencePair> listening_pairs(const std::vector<const ConversationSample*>& samples,
                                          const NormStats& stats, std::size_t n,
                                          std::size_t stride);
// The first dec_len speaker frames of every sample long enough.
std::vector<TextPair> speaking_pairs(const std::vector<const ConversationSample*>& samples,
                                     const NormStats& stats, std::size_t dec_len);

// Teacher-forced training with batches drawn with replacement.
TrainHistory train_listening(ListeningModel& model, const std::vector<SequencePair>& data,
                             const TrainConfig& cfg);

// Teacher-forced loss of the current parameters over every pair; `iter` is 0.
HistoryRow teacher_forced_listening(ListeningModel& model, const std::vector<SequencePair>& data,
                                    const LossConfig& loss);

// One speaking stage: blocks named in `frozen` receive no updates; the stage
// trains on a seeded subset of the data of the given fraction.
struct Stage {
  std::string name;
  std::vector<std::string> frozen;
  std::size_t iters = 0;
  double subset = 1.0;
};

// Pretrain all on a 10% subset, train the decoder with the encoder frozen,
// then fine-tune all; iteration budgets 10/60/30 percent of `total_iters`.
std::vector<Stage> default_schedule(const SpeakingModel& model, std::size_t total_iters);
// Throws ConfigError unless the schedule has the three stages above with
// known block names.
void validate_schedule(const SpeakingModel& model, const std::vector<Stage>& schedule);

struct StageRecord {
  std::string name;
  std::size_t first_iter = 0;
  std::size_t last_iter = 0;
  std::size_t samples = 0;
  // Checksums of the frozen blocks before and after the stage.
  std::vector<std::uint64_t> frozen_before;
  std::vector<std::uint64_t> frozen_after;
};

struct SpeakingHistory {
  TrainHistory history;
  std::vector<StageRecord> stages;
};

SpeakingHistory train_speaking(SpeakingModel& model, const std::vector<TextPair>& data,
                               const TrainConfig& cfg, const std::vector<Stage>& schedule);

struct EvalReport {
  double d_mse = 0.0;
  double d_cos = 0.0;
  // Mean continuity loss of free-running predictions against ground truth.
  double continuity = 0.0;
  std::size_t samples = 0;
};

// Free-running predictions and their normalized-space metrics.
std::vector<Array> predict_listening(ListeningModel& model, const std::vector<SequencePair>& data);
std::vector<Array> predict_speaking(SpeakingModel& model, const std::vector<TextPair>& data);
EvalReport evaluate(const std::vector<Array>& gt, const std::vector<Array>& pred,
                    const LossConfig& loss);
EvalReport evaluate_listening(ListeningModel& model, const std::vector<SequencePair>& data,
                              const LossConfig& loss);
EvalReport evaluate_speaking(SpeakingModel& model, const std::vector<TextPair>& data,
                             const LossConfig& loss);

// Checkpoints hold the parameter blocks, a `stats` block and a `*.config`
// block; the speaking vocabulary goes to a `<path>.vocab` sidecar.
struct LoadedListening {
  std::unique_ptr<ListeningModel> model;
  NormStats stats;
};
struct LoadedSpeaking {
  std::unique_ptr<SpeakingModel> model;
  NormStats stats;
};

void save_listening(const std::filesystem::path& path, const ListeningModel& model,
                    const NormStats& stats);
LoadedListening load_listening(const std::filesystem::path& path);
void save_speaking(const std::filesystem::path& path, const SpeakingModel& model,
                   const NormStats& stats);
LoadedSpeaking load_speaking(const std::filesystem::path& path);
std::filesystem::path vocab_path(const std::filesystem::path& checkpoint);

// Run config file: `key=value` lines with the keys phase, lr, batch, iters,
// seed, hidden, layers, n, gamma, alpha, n_b, dataset_dir and checkpoint,
// plus the loss keys exponent and continuity_mean (`frames` or `n_b`) and the
// synth-only keys d_lr (discriminator learning rate) and adv_weight.
// Unset keys stay empty so callers can apply per-phase defaults.
struct RunConfig {
  std::optional<std::string> phase;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> iters;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> hidden;
  std::optional<std::size_t> layers;
  std::optional<std::size_t> n;
  std::optional<double> gamma;
  std::optional<double> alpha;
  std::optional<std::size_t> n_b;
  std::optional<int> exponent;
  std::optional<bool> continuity_mean_frames;
  std::optional<double> d_lr;
  std::optional<double> adv_weight;
  std::optional<std::filesystem::path> dataset_dir;
  std::optional<std::filesystem::path> checkpoint;
};

// Throws ConfigError naming the first unknown, repeated or malformed key.
RunConfig parse_run_config(const KeyValues& kv);
RunConfig read_run_config(const std::filesystem::path& path);

}  // namespace facetalk
