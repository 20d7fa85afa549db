#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "facetalk/features.hpp"
#include "facetalk/param_store.hpp"
#include "facetalk/tape.hpp"

namespace facetalk {

// Grayscale image with intensities in [0, 1], row-major.
struct FrameImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;

  FrameImage() = default;
  FrameImage(std::size_t w, std::size_t h, double fill = 0.0)
      : width(w), height(h), pixels(w * h, fill) {}

  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  bool operator==(const FrameImage&) const = default;
};

// Images as rows of a [B x width*height] array and back.
Array images_to_rows(std::span<const FrameImage> images);
FrameImage row_to_image(const Array& rows, std::size_t row, std::size_t width,
                        std::size_t height);

// The 20 normalized features as a centered 5x4 grid of 2x2 patches (17 AUs
// then pose, row-major) on a zero background. Values outside [0, 1] are
// clamped to the pixel range.
inline constexpr std::size_t kPatchGridCols = 5;
inline constexpr std::size_t kPatchGridRows = 4;
inline constexpr std::size_t kPatchSize = 2;
FrameImage conditioning_image(const AuPose& p, const NormStats& stats, std::size_t res);
// Normalized features read back from the patch centers.
AuPose read_conditioning(const FrameImage& image);

// Schematic face renderer. Head: an ellipse at fill 0.5 whose center moves
// with (pose_Ry, pose_Rx) and whose long axis tilts with pose_Rz. Every
// rendered AU drives the height of one axis-aligned feature bar (a mirrored
// pair or a single central bar) drawn at +0.5 on top of the face, with exact
// area coverage so that summed intensities invert the maps.
struct RenderedFace {
  FrameImage image;
  // Set when the input was outside the native ranges and got clamped.
  bool clamped = false;
};

// Supported resolutions are 32, 48 and 64.
RenderedFace render_face(const AuPose& p, std::size_t res = 32);

// Dimensions the extractor recovers: 8 AUs and the 3 pose angles.
const std::array<bool, kFrameDim>& renderer_mask();

struct ExtractedFace {
  // Recovered native values; dimensions outside the mask are 0.
  AuPose values;
  std::array<bool, kFrameDim> mask{};
};

// Inverts render_face from pixel measurements. Throws DataError when no face
// is found.
ExtractedFace extract_aupose(const FrameImage& image);

// Renderer coefficients as `name = value` lines.
std::string renderer_spec_text(std::size_t res);

// Fixed random convolution stack standing in for a pretrained feature
// extractor: relu(conv3x3) with 4 channels, then 2x2 average pooling and
// relu(conv3x3) with 8 channels.
class PerceptualNet {
 public:
  PerceptualNet(std::size_t res, std::uint64_t seed);

  std::size_t resolution() const { return res_; }
  // Both feature maps of every row of `images` [B x res*res].
  std::array<Var, 2> features(Var images) const;
  // Kernel banks [4 x 1 x 3 x 3] and [8 x 4 x 3 x 3]; cross-correlation with
  // zero padding.
  const Array& first_kernels() const { return first_; }
  const Array& second_kernels() const { return second_; }

 private:
  std::size_t res_;
  Array first_;
  Array second_;
};

struct SynthConfig {
  std::size_t resolution = 32;
  std::vector<std::size_t> generator_widths{256};
  std::vector<std::size_t> discriminator_widths{128};
  double lr = 2e-4;
  // Discriminator learning rate; 0 uses `lr`.
  double discriminator_lr = 0.0;
  std::size_t batch = 16;
  std::size_t steps = 5000;
  std::uint64_t seed = 0;
  std::uint64_t perceptual_seed = 7;
  double adversarial_weight = 1.0;
  double l1_weight = 1.0;
  double perceptual_weight = 1.0;
  std::size_t eval_interval = 100;

  void validate() const;
};

// Dense encoder-decoder over the concatenated (current conditioning image,
// previous frame); relu hidden layers and a sigmoid output image.
// Blocks: synth.G.layer{k}.{W,b}.
class Generator {
 public:
  Generator(std::size_t res, const std::vector<std::size_t>& widths, std::uint64_t seed);

  std::size_t resolution() const { return res_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // x and prev are [B x res*res].
  Var forward(Tape& tape, Var x, Var prev);
  FrameImage forward(const FrameImage& x, const FrameImage& prev);

 private:
  std::size_t res_;
  std::size_t layers_;
  ParamStore params_;
};

// Dense network over the tuple (x_prev, x_t, y_prev, y_t) with a sigmoid
// score. Blocks: synth.D.layer{k}.{W,b}.
class Discriminator {
 public:
  Discriminator(std::size_t res, const std::vector<std::size_t>& widths, std::uint64_t seed);

  std::size_t resolution() const { return res_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Each input is [B x res*res]; returns [B x 1].
  Var forward(Tape& tape, Var x_prev, Var x_t, Var y_prev, Var y_t);
  double forward(const FrameImage& x_prev, const FrameImage& x_t, const FrameImage& y_prev,
                 const FrameImage& y_t);

 private:
  std::size_t res_;
  std::size_t layers_;
  ParamStore params_;
};

// mean log D(real) + mean log(1 - D(fake)); D ascends this objective.
Var gan_objective(Var d_real, Var d_fake);
// Non-saturating generator term: -mean log D(fake).
Var generator_adversarial(Var d_fake);
// Mean absolute pixel deviation.
Var l1_loss(Var generated, Var target);
// Sum over both feature maps of the mean squared feature difference.
Var perceptual_loss(const PerceptualNet& net, Var generated, Var target);

struct GanWeights {
  double adversarial = 1.0;
  double l1 = 1.0;
  double perceptual = 1.0;
};

struct GanLosses {
  double gan = 0.0;
  double l1 = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
};

// Differentiable combined loss: weighted gan_objective + l1 + perceptual.
Var combined_gan_loss(const PerceptualNet& net, Var d_real, Var d_fake, Var generated,
                      Var target, const GanWeights& weights);

// Plain-value form. Throws NumericError when a score lies outside (0, 1).
GanLosses gan_losses(std::span<const double> d_real, std::span<const double> d_fake,
                     const Array& generated, const Array& target, const PerceptualNet& net,
                     const GanWeights& weights = {});

struct SynthHistoryRow {
  std::size_t step = 0;
  double gan = 0.0;
  double d_loss = 0.0;
  double g_adv = 0.0;
  double l1 = 0.0;
  double perceptual = 0.0;
  double total = 0.0;
};

// CSV with header `step,gan,d_loss,g_adv,l1,perceptual,total`.
std::string format_synth_history(const std::vector<SynthHistoryRow>& rows);

struct SynthModel {
  SynthConfig config;
  Generator generator;
  Discriminator discriminator;
  PerceptualNet perceptual;

  explicit SynthModel(const SynthConfig& cfg);
};

struct SynthTraining {
  std::vector<SynthHistoryRow> history;
};

// Alternating D and G steps on (x_{t-1}, x_t, y_{t-1}, y_t) tuples drawn
// with replacement. G(x_{t-1}) sees the ground-truth frame before it (zero
// for the first frame) and G(x_t) sees G(x_{t-1}).
SynthTraining train_synth(SynthModel& model, const std::vector<AuPoseSequence>& sequences,
                          const NormStats& stats);

// Free-running generation: the first frame sees a zero image, later frames
// the previous output.
std::vector<FrameImage> generate_sequence(Generator& generator, const AuPoseSequence& seq,
                                          const NormStats& stats);

struct SynthEval {
  // Mean |G(x) - y| over all frames.
  double l1 = 0.0;
  // Mean absolute normalized error of extracted values on masked AU / pose
  // dimensions, over frames where extraction succeeded.
  double d_au = 0.0;
  double d_pose = 0.0;
  std::size_t frames = 0;
  std::size_t failures = 0;
};

SynthEval evaluate_synth(Generator& generator, const std::vector<AuPoseSequence>& sequences,
                         const NormStats& stats);

// Checkpoint holds the G and D blocks, `synth.config` and `stats`.
void save_synth(const std::filesystem::path& path, const SynthModel& model,
                const NormStats& stats);
struct LoadedSynth {
  std::unique_ptr<SynthModel> model;
  NormStats stats;
};
LoadedSynth load_synth(const std::filesystem::path& path);

// Binary PGM ("P5", maxval 255).
void write_pgm(const std::filesystem::path& path, const FrameImage& image);
FrameImage read_pgm(const std::filesystem::path& path);
std::string encode_pgm(const FrameImage& image);
FrameImage decode_pgm(std::string_view bytes);

// frame_%05d.pgm files plus index.txt (`fps=...` then one file per line).
void write_frame_sequence(const std::filesystem::path& dir, const std::vector<FrameImage>& frames,
                          double fps);
std::vector<FrameImage> read_frame_sequence(const std::filesystem::path& dir, double* fps = nullptr);

}  // namespace facetalk
