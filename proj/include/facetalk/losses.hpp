#pragma once

#include <optional>
#include <span>
#include <vector>

#include "facetalk/array.hpp"
#include "facetalk/tape.hpp"

namespace facetalk {

struct LossConfig {
  // Weight of the head-pose term in the frame error.
  double gamma = 8.1;
  // Weight of the continuity term in the total loss.
  double alpha = 0.1;
  // Adjacent-frame window of the continuity term.
  std::size_t n_b = 3;
  // 2 = squared per-dimension errors, 1 = absolute.
  int exponent = 2;
  // Divide the continuity sum by the number of scored frames instead of n_b.
  bool continuity_mean_frames = false;

  // Throws ConfigError on out-of-range settings.
  void validate() const;
};

// Differentiable forms. A sequence is one [B x D] Var per frame, with one
// batch element per row; results are averaged over the batch.
struct SequenceLoss {
  Var total;
  Var mse;
  Var continuity;
};

Var mse_loss(std::span<const Var> gt, std::span<const Var> pred,
             const LossConfig& cfg);
Var continuity_loss(std::span<const Var> gt, std::span<const Var> pred,
                    const LossConfig& cfg);
SequenceLoss total_loss(std::span<const Var> gt, std::span<const Var> pred,
                        const LossConfig& cfg);

// Plain forms over single sequences stored as [L x D] arrays. mse_loss needs
// D = 20; continuity_loss accepts any D.
double mse_loss(const Array& gt, const Array& pred, const LossConfig& cfg);
double continuity_loss(const Array& gt, const Array& pred, const LossConfig& cfg);
double total_loss(const Array& gt, const Array& pred, const LossConfig& cfg);

// Splits an [L x D] array into L constant [1 x D] frames on `tape`.
std::vector<Var> frames_of(Tape& tape, const Array& seq);
// Stacks [B x D] frames into B sequences of shape [L x D].
std::vector<Array> sequences_of(std::span<const Var> frames);

struct MseCosine {
  double d_mse = 0.0;
  double d_cos = 0.0;
};

// d_mse: per-sample mean frame error with unit pose weight and squared terms,
// averaged over samples. d_cos: cosine similarity of 20-D frames averaged
// over all frames; a zero vector has cosine 0 with anything.
MseCosine eval_mse_cosine(std::span<const Array> gt, std::span<const Array> pred);

struct ReconstructionError {
  double d_au = 0.0;
  double d_pose = 0.0;
};

// Mean absolute per-dimension error over all frames, split into AU and pose
// dimensions. With a mask, only dimensions marked true are averaged.
ReconstructionError reconstruction_error(
    std::span<const Array> gt, std::span<const Array> reconstructed,
    const std::optional<std::vector<bool>>& mask = std::nullopt);

}  // namespace facetalk
