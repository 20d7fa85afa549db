#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "facetalk/array.hpp"

namespace facetalk {

inline constexpr std::size_t kNumAu = 17;
inline constexpr std::size_t kNumPose = 3;
inline constexpr std::size_t kFrameDim = kNumAu + kNumPose;

inline constexpr std::array<std::string_view, kNumAu> kAuNames = {
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
    "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU45"};
inline constexpr std::array<std::string_view, kNumPose> kPoseNames = {
    "pose_Rx", "pose_Ry", "pose_Rz"};

// Native value ranges: AU intensities in [0, 5], head rotation in radians.
inline constexpr double kAuMax = 5.0;
inline constexpr double kPoseLimit = 1.5707963267948966;

// Index of an AU channel by name ("AU12"); throws for unknown names.
std::size_t au_index(std::string_view name);
// CSV column name of frame dimension i ("AU01_r" ... "pose_Rz").
std::string column_name(std::size_t dim);

// One frame: 17 action-unit intensities followed by 3 head-pose angles.
struct AuPose {
  std::array<double, kFrameDim> values{};

  double& au(std::size_t i) { return values[i]; }
  double au(std::size_t i) const { return values[i]; }
  double& pose(std::size_t i) { return values[kNumAu + i]; }
  double pose(std::size_t i) const { return values[kNumAu + i]; }

  bool operator==(const AuPose&) const = default;
};

struct AuPoseSequence {
  std::vector<AuPose> frames;
  double fps = 25.0;

  std::size_t size() const { return frames.size(); }
  // Frames as a [length x 20] array.
  Array to_array() const;
  static AuPoseSequence from_array(const Array& a, double fps = 25.0);
};

// Clamps AUs to [0, 5] and pose to [-pi/2, pi/2].
AuPose clamp_native(const AuPose& p);

// Per-dimension minimum and maximum over the training split.
struct NormStats {
  std::array<double, kFrameDim> min{};
  std::array<double, kFrameDim> max{};

  // [2 x 20] block (row 0 = min, row 1 = max) for checkpoints.
  Array to_array() const;
  static NormStats from_array(const Array& a);
};

NormStats compute_norm_stats(const std::vector<const AuPoseSequence*>& seqs);

// (x - min) / (max - min) per dimension; dimensions with range below 1e-9
// map to 0.5. Values outside the training range are not clamped.
AuPose normalize(const AuPose& x, const NormStats& stats);
AuPose denormalize(const AuPose& x, const NormStats& stats);
AuPoseSequence normalize(const AuPoseSequence& seq, const NormStats& stats);
AuPoseSequence denormalize(const AuPoseSequence& seq, const NormStats& stats);

// stats.txt: two lines "min=v0,...,v19" and "max=v0,...,v19".
void write_norm_stats(const std::filesystem::path& path, const NormStats& stats);
NormStats read_norm_stats(const std::filesystem::path& path);

// CSV with header `frame,AU01_r,...,AU45_r,pose_Rx,pose_Ry,pose_Rz`.
void write_csv(const std::filesystem::path& path, const AuPoseSequence& seq);
std::string format_csv(const AuPoseSequence& seq);
// fps comes from a sibling meta.txt when present, else 25.
AuPoseSequence ingest_csv(const std::filesystem::path& path);
AuPoseSequence parse_csv(std::string_view text, double fps = 25.0);

// All maximal windows of exactly `length` frames at the given stride.
std::vector<AuPoseSequence> window(const AuPoseSequence& seq,
                                   std::size_t length, std::size_t stride);

enum class Split { kTrain, kVal, kTest };
std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct ConversationSample {
  AuPoseSequence speaker;
  AuPoseSequence listener;
  std::vector<std::string> transcript;
  Split split = Split::kTrain;
};

// Generator settings. Listener responses follow speaker events after `lag`
// frames, scaled by `attenuation`.
struct SynthOptions {
  int lag = 7;
  double attenuation = 0.55;
  // Bound on the per-frame change of every channel, native units.
  double max_step = 0.28;
  // Listener AR(1) noise innovation scale for AU channels, native units;
  // pose channels use a fifth of it.
  double noise = 0.02;
};

// Deterministic synthetic conversation of `n_frames` frames.
ConversationSample synth_conversation(std::uint64_t seed, std::size_t n_frames,
                                      double fps = 25.0,
                                      const SynthOptions& options = {});

// Fixed vocabulary the generator draws transcripts from.
const std::vector<std::string>& synth_vocabulary();

// Transcript text: lowercase tokens separated by single spaces.
std::vector<std::string> tokenize(std::string_view line);
std::vector<std::vector<std::string>> read_transcript_lines(
    const std::filesystem::path& path);

// Dataset layout: one directory per sample holding speaker.csv,
// listener.csv, transcript.txt and meta.txt (fps=..., split=...).
void write_sample(const std::filesystem::path& dir,
                  const ConversationSample& sample);
ConversationSample read_sample(const std::filesystem::path& dir);
// Samples of every subdirectory of `dir` containing meta.txt, sorted by name.
std::vector<ConversationSample> read_dataset(const std::filesystem::path& dir);

// Seeded 80/10/10 split assignment for `count` samples.
std::vector<Split> assign_splits(std::size_t count, std::uint64_t seed);

}  // namespace facetalk
