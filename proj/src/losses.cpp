#include "facetalk/losses.hpp"

#include <cmath>
#include <string>

#include "facetalk/error.hpp"
#include "facetalk/features.hpp"
#include "facetalk/ops.hpp"

namespace facetalk {

void LossConfig::validate() const {
  if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (n_b < 2) throw ConfigError("n_b must be >= 2");
  if (exponent != 1 && exponent != 2) throw ConfigError("exponent must be 1 or 2");
}

namespace {

void require_matching(std::span<const Var> gt, std::span<const Var> pred) {
  if (gt.size() != pred.size()) {
    throw ShapeError("sequence length mismatch: gt " + std::to_string(gt.size()) +
                     " vs pred " + std::to_string(pred.size()));
  }
  if (gt.empty()) throw ShapeError("empty sequence");
}

// Batch mean of a sum of [B x 1] columns, scaled.
Var batch_mean(const std::vector<Var>& columns, double factor) {
  Var acc = columns.front();
  for (std::size_t i = 1; i < columns.size(); ++i) acc = ops::add(acc, columns[i]);
  return ops::scale(ops::sum(acc), factor / static_cast<double>(acc.rows()));
}

}  // namespace

Var mse_loss(std::span<const Var> gt, std::span<const Var> pred, const LossConfig& cfg) {
  cfg.validate();
  require_matching(gt, pred);
  if (gt.front().cols() != kFrameDim) {
    throw ShapeError("mse_loss expects 20-D frames, got " + shape_string(gt.front().shape()));
  }
  Array weights(Shape{kFrameDim});
  for (std::size_t d = 0; d < kFrameDim; ++d)
    weights[d] = d < kNumAu ? 1.0 / kNumAu : cfg.gamma / kNumPose;
  std::vector<Var> per_frame;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    const Var err = ops::pow_abs(ops::sub(gt[t], pred[t]), cfg.exponent);
    per_frame.push_back(ops::weighted_row_sum(err, weights));
  }
  return batch_mean(per_frame, 1.0 / static_cast<double>(gt.size()));
}

Var continuity_loss(std::span<const Var> gt, std::span<const Var> pred,
                    const LossConfig& cfg) {
  cfg.validate();
  require_matching(gt, pred);
  const std::size_t l = gt.size();
  if (l < cfg.n_b) {
    throw ShapeError("continuity loss needs at least n_b = " + std::to_string(cfg.n_b) +
                     " frames, got " + std::to_string(l));
  }
  Tape& tape = *gt.front().tape();
  if (l == cfg.n_b) return tape.constant(Array::scalar(0.0));

  // Velocity mismatch between frames k and k-1, memoized per k.
  std::vector<Var> mismatch(l);
  auto velocity_gap = [&](std::size_t k) {
    if (!mismatch[k].valid()) {
      const Var gt_step = ops::sub(gt[k], gt[k - 1]);
      const Var pred_step = ops::sub(pred[k], pred[k - 1]);
      mismatch[k] = ops::row_norm(ops::sub(gt_step, pred_step));
    }
    return mismatch[k];
  };

  std::vector<Var> per_frame;
  for (std::size_t i = cfg.n_b; i < l; ++i) {
    std::vector<Var> terms;
    for (std::size_t j = 1; j < cfg.n_b; ++j) terms.push_back(velocity_gap(i - j));
    per_frame.push_back(terms.size() == 1 ? terms.front() : ops::max_of(terms));
  }
  const double denom = cfg.continuity_mean_frames ? static_cast<double>(l - cfg.n_b)
                                                  : static_cast<double>(cfg.n_b);
  return batch_mean(per_frame, 1.0 / denom);
}

SequenceLoss total_loss(std::span<const Var> gt, std::span<const Var> pred,
                        const LossConfig& cfg) {
  SequenceLoss out;
  out.mse = mse_loss(gt, pred, cfg);
  out.continuity = continuity_loss(gt, pred, cfg);
  out.total = cfg.alpha == 0.0 ? out.mse
                               : ops::add(out.mse, ops::scale(out.continuity, cfg.alpha));
  return out;
}

std::vector<Var> frames_of(Tape& tape, const Array& seq) {
  if (seq.rank() != 2) throw ShapeError("expected an [L x D] sequence, got " + shape_string(seq.shape()));
  std::vector<Var> frames;
  for (std::size_t r = 0; r < seq.rows(); ++r) {
    Array row(Shape{1, seq.cols()});
    std::copy_n(seq.data() + r * seq.cols(), seq.cols(), row.data());
    frames.push_back(tape.constant(std::move(row)));
  }
  return frames;
}

std::vector<Array> sequences_of(std::span<const Var> frames) {
  if (frames.empty()) return {};
  const std::size_t b = frames.front().rows(), d = frames.front().cols();
  std::vector<Array> out(b, Array(Shape{frames.size(), d}));
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const Array& v = frames[t].value();
    for (std::size_t s = 0; s < b; ++s)
      std::copy_n(v.data() + s * d, d, out[s].data() + t * d);
  }
  return out;
}

double mse_loss(const Array& gt, const Array& pred, const LossConfig& cfg) {
  Tape tape;
  return mse_loss(frames_of(tape, gt), frames_of(tape, pred), cfg).value().item();
}

double continuity_loss(const Array& gt, const Array& pred, const LossConfig& cfg) {
  Tape tape;
  return continuity_loss(frames_of(tape, gt), frames_of(tape, pred), cfg).value().item();
}

double total_loss(const Array& gt, const Array& pred, const LossConfig& cfg) {
  Tape tape;
  return total_loss(frames_of(tape, gt), frames_of(tape, pred), cfg).total.value().item();
}

namespace {

void require_matching_sets(std::span<const Array> gt, std::span<const Array> pred) {
  if (gt.empty()) throw DataError("evaluation set is empty");
  if (gt.size() != pred.size()) {
    throw ShapeError("evaluation set size mismatch: " + std::to_string(gt.size()) + " vs " +
                     std::to_string(pred.size()));
  }
  for (std::size_t s = 0; s < gt.size(); ++s) {
    if (gt[s].shape() != pred[s].shape() || gt[s].rank() != 2 || gt[s].cols() != kFrameDim) {
      throw ShapeError("sample " + std::to_string(s) + ": shapes " + shape_string(gt[s].shape()) +
                       " and " + shape_string(pred[s].shape()) + " must match as [L x 20]");
    }
  }
}

}  // namespace

MseCosine eval_mse_cosine(std::span<const Array> gt, std::span<const Array> pred) {
  require_matching_sets(gt, pred);
  LossConfig unit;
  unit.gamma = 1.0;
  double mse_sum = 0.0, cos_sum = 0.0;
  std::size_t frames = 0;
  for (std::size_t s = 0; s < gt.size(); ++s) {
    mse_sum += mse_loss(gt[s], pred[s], unit);
    for (std::size_t r = 0; r < gt[s].rows(); ++r) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t d = 0; d < kFrameDim; ++d) {
        const double a = gt[s].at(r, d), b = pred[s].at(r, d);
        dot += a * b;
        na += a * a;
        nb += b * b;
      }
      cos_sum += (na == 0.0 || nb == 0.0) ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
      ++frames;
    }
  }
  MseCosine out;
  out.d_mse = mse_sum / static_cast<double>(gt.size());
  out.d_cos = cos_sum / static_cast<double>(frames);
  return out;
}

ReconstructionError reconstruction_error(std::span<const Array> gt,
                                         std::span<const Array> reconstructed,
                                         const std::optional<std::vector<bool>>& mask) {
  require_matching_sets(gt, reconstructed);
  if (mask && mask->size() != kFrameDim) throw ShapeError("reconstruction mask must have 20 entries");
  std::size_t n_au = 0, n_pose = 0;
  for (std::size_t d = 0; d < kFrameDim; ++d) {
    if (mask && !(*mask)[d]) continue;
    (d < kNumAu ? n_au : n_pose) += 1;
  }
  double au_sum = 0.0, pose_sum = 0.0;
  std::size_t frames = 0;
  for (std::size_t s = 0; s < gt.size(); ++s) {
    for (std::size_t r = 0; r < gt[s].rows(); ++r) {
      double au = 0.0, pose = 0.0;
      for (std::size_t d = 0; d < kFrameDim; ++d) {
        if (mask && !(*mask)[d]) continue;
        const double e = std::fabs(gt[s].at(r, d) - reconstructed[s].at(r, d));
        (d < kNumAu ? au : pose) += e;
      }
      if (n_au) au_sum += au / static_cast<double>(n_au);
      if (n_pose) pose_sum += pose / static_cast<double>(n_pose);
      ++frames;
    }
  }
  ReconstructionError out;
  out.d_au = au_sum / static_cast<double>(frames);
  out.d_pose = pose_sum / static_cast<double>(frames);
  return out;
}

}  // namespace facetalk
