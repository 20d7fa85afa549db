#include "facetalk/synthesizer.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "facetalk/checkpoint.hpp"
#include "facetalk/error.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/ops.hpp"
#include "facetalk/optim.hpp"

namespace facetalk {

namespace {

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void require_same_size(const FrameImage& a, const FrameImage& b, const char* what) {
  if (a.width != b.width || a.height != b.height) {
    throw ShapeError(std::string(what) + ": image size " + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                     std::to_string(b.height));
  }
}

// Renderer geometry at 32x32; every length scales with res / 32. Feature bars
// are given relative to the head center in face pixels (y down).
constexpr double kHeadSemiX = 9.0;
constexpr double kHeadSemiY = 12.0;
constexpr double kFaceFill = 0.5;
constexpr double kFeatureFill = 0.5;
constexpr double kShiftPerRad = 2.0;
constexpr double kTiltPerRad = 0.5;
constexpr int kSupersample = 8;
// Pixel centers within this margin of a bar's largest extent are summed.
constexpr double kWindowMargin = 0.75;

enum class Grow { kUp, kDown, kCentered };

enum class BarId { kInnerBrow, kOuterBrow, kFurrow, kEye, kLid, kLipCorner, kMouth, kChin };

struct Bar {
  BarId id;
  const char* name;
  // Horizontal extent; mirrored bars also occupy [-x_out, -x_in].
  double x_in;
  double x_out;
  bool mirrored;
  double y_top;
  double y_bottom;
  Grow grow;
};

constexpr Bar kBars[] = {
    {BarId::kInnerBrow, "AU01", 2.0, 3.5, true, -6.0, -4.5, Grow::kUp},
    {BarId::kOuterBrow, "AU02", 5.0, 6.5, true, -3.5, -2.0, Grow::kUp},
    {BarId::kFurrow, "AU04", -0.5, 0.5, false, -6.5, -5.0, Grow::kDown},
    {BarId::kEye, "AU45", 2.0, 3.5, true, -3.0, -1.5, Grow::kCentered},
    {BarId::kLid, "AU05", 5.0, 6.5, true, -0.5, 1.0, Grow::kUp},
    {BarId::kLipCorner, "AU12", 2.0, 3.5, true, 3.0, 4.5, Grow::kUp},
    {BarId::kMouth, "AU25+AU26", -0.5, 0.5, false, 2.5, 4.0, Grow::kCentered},
    {BarId::kChin, "AU26", -0.5, 0.5, false, 5.5, 7.0, Grow::kDown},
};

double au_of(const AuPose& p, std::string_view name) { return p.au(au_index(name)); }

// Fraction of the bar's full height shown for the given frame.
double bar_fraction(BarId id, const AuPose& p) {
  switch (id) {
    case BarId::kInnerBrow: return au_of(p, "AU01") / kAuMax;
    case BarId::kOuterBrow: return au_of(p, "AU02") / kAuMax;
    case BarId::kFurrow: return au_of(p, "AU04") / kAuMax;
    case BarId::kEye: return 1.0 - au_of(p, "AU45") / kAuMax;
    case BarId::kLid: return au_of(p, "AU05") / kAuMax;
    case BarId::kLipCorner: return au_of(p, "AU12") / kAuMax;
    case BarId::kMouth: return (au_of(p, "AU25") + au_of(p, "AU26")) / (2.0 * kAuMax);
    case BarId::kChin: return au_of(p, "AU26") / kAuMax;
  }
  return 0.0;
}

void check_resolution(std::size_t res) {
  if (res % 16 != 0 || res < 32 || res > 64) {
    throw ConfigError("renderer resolution must be 32, 48 or 64, got " + std::to_string(res));
  }
}

double overlap(double lo, double hi, double cell) {
  return std::max(0.0, std::min(hi, cell + 1.0) - std::max(lo, cell));
}

// Adds `fill` times the exact area coverage of [x0,x1] x [y0,y1].
void fill_rect(FrameImage& img, double x0, double x1, double y0, double y1, double fill) {
  if (x1 <= x0 || y1 <= y0) return;
  const auto lo_x = static_cast<std::size_t>(std::max(0.0, std::floor(x0)));
  const auto lo_y = static_cast<std::size_t>(std::max(0.0, std::floor(y0)));
  const auto hi_x = std::min(img.width, static_cast<std::size_t>(std::max(0.0, std::ceil(x1))));
  const auto hi_y = std::min(img.height, static_cast<std::size_t>(std::max(0.0, std::ceil(y1))));
  for (std::size_t y = lo_y; y < hi_y; ++y) {
    const double oy = overlap(y0, y1, static_cast<double>(y));
    for (std::size_t x = lo_x; x < hi_x; ++x)
      img.at(x, y) += fill * overlap(x0, x1, static_cast<double>(x)) * oy;
  }
}

struct BarRect {
  double x0, x1, y0, y1;
};

// Left (or only) rectangle of a bar at height fraction `frac`; the mirror
// image about cx is the right rectangle.
BarRect bar_rect(const Bar& bar, double frac, double cx, double cy, double s) {
  const double top = cy + bar.y_top * s, bottom = cy + bar.y_bottom * s;
  const double h = (bottom - top) * std::clamp(frac, 0.0, 1.0);
  double y0 = top, y1 = bottom;
  switch (bar.grow) {
    case Grow::kUp: y0 = bottom - h; break;
    case Grow::kDown: y1 = top + h; break;
    case Grow::kCentered: {
      const double mid = cy + 0.5 * (bar.y_top + bar.y_bottom) * s;
      y0 = mid - 0.5 * h;
      y1 = mid + 0.5 * h;
      break;
    }
  }
  if (bar.mirrored) return {cx - bar.x_out * s, cx - bar.x_in * s, y0, y1};
  return {cx + bar.x_in * s, cx + bar.x_out * s, y0, y1};
}

double bar_full_area(const Bar& bar, double s) {
  return (bar.mirrored ? 2.0 : 1.0) * (bar.x_out - bar.x_in) * (bar.y_bottom - bar.y_top) * s * s;
}

double window_sum(const FrameImage& img, const BarRect& r) {
  double total = 0.0;
  for (std::size_t y = 0; y < img.height; ++y) {
    const double py = static_cast<double>(y) + 0.5;
    if (py < r.y0 - kWindowMargin || py > r.y1 + kWindowMargin) continue;
    for (std::size_t x = 0; x < img.width; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      if (px < r.x0 - kWindowMargin || px > r.x1 + kWindowMargin) continue;
      total += std::clamp((img.at(x, y) - kFaceFill) / kFeatureFill, 0.0, 1.0);
    }
  }
  return total;
}

Array random_kernels(Shape shape, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape[1] * 9));
  Array k(std::move(shape));
  for (double& v : k.values()) v = rng.uniform(-scale, scale);
  return k;
}

void add_dense_stack(ParamStore& store, const std::string& base, std::size_t input,
                     const std::vector<std::size_t>& widths, std::size_t output, Rng& rng) {
  std::size_t in = input;
  for (std::size_t k = 0; k <= widths.size(); ++k) {
    const std::size_t out = k < widths.size() ? widths[k] : output;
    const std::string prefix = base + ".layer" + std::to_string(k);
    store.add_uniform(prefix + ".W", Shape{out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    store.add(prefix + ".b", Array(Shape{out}));
    in = out;
  }
}

Var run_dense_stack(Tape& tape, ParamStore& store, const std::string& base, std::size_t layers,
                    Var h) {
  for (std::size_t k = 0; k < layers; ++k) {
    const std::string prefix = base + ".layer" + std::to_string(k);
    h = ops::linear(h, tape.param(store, prefix + ".W"), tape.param(store, prefix + ".b"));
    h = k + 1 < layers ? ops::relu(h) : ops::sigmoid(h);
  }
  return h;
}

void require_pixels(Var v, std::size_t res, const char* what) {
  if (v.cols() != res * res) {
    throw ShapeError(std::string(what) + ": expected rows of " + std::to_string(res * res) +
                     " pixels, got " + shape_string(v.shape()));
  }
}

void require_open_unit(const Array& a, const char* what) {
  for (double v : a.values()) {
    if (!(v > 0.0 && v < 1.0)) {
      throw NumericError(std::string(what) + " score outside (0, 1): " + std::to_string(v));
    }
  }
}

Var one_minus(Var a) { return ops::add_scalar(ops::scale(a, -1.0), 1.0); }

FrameImage zero_image(std::size_t res) { return FrameImage(res, res); }

}  // namespace

Array images_to_rows(std::span<const FrameImage> images) {
  if (images.empty()) throw ShapeError("images_to_rows of an empty list");
  const std::size_t n = images[0].pixels.size();
  Array out(Shape{images.size(), n});
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_same_size(images[0], images[i], "images_to_rows");
    std::copy(images[i].pixels.begin(), images[i].pixels.end(), out.data() + i * n);
  }
  return out;
}

FrameImage row_to_image(const Array& rows, std::size_t row, std::size_t width,
                        std::size_t height) {
  if (rows.cols() != width * height || row >= rows.rows()) {
    throw ShapeError("row_to_image: " + shape_string(rows.shape()) + " has no row " +
                     std::to_string(row) + " of " + std::to_string(width) + "x" +
                     std::to_string(height));
  }
  FrameImage img(width, height);
  const double* src = rows.data() + row * width * height;
  std::copy(src, src + width * height, img.pixels.begin());
  return img;
}

FrameImage conditioning_image(const AuPose& p, const NormStats& stats, std::size_t res) {
  for (double v : p.values) {
    if (!std::isfinite(v)) throw NumericError("conditioning image of a non-finite frame");
  }
  const std::size_t block_w = kPatchGridCols * kPatchSize, block_h = kPatchGridRows * kPatchSize;
  if (res < block_w || res < block_h) {
    throw ConfigError("resolution " + std::to_string(res) + " cannot hold the " +
                      std::to_string(block_w) + "x" + std::to_string(block_h) + " feature block");
  }
  const AuPose n = normalize(p, stats);
  FrameImage img(res, res);
  const std::size_t x0 = (res - block_w) / 2, y0 = (res - block_h) / 2;
  for (std::size_t k = 0; k < kFrameDim; ++k) {
    const double v = std::clamp(n.values[k], 0.0, 1.0);
    const std::size_t px = x0 + (k % kPatchGridCols) * kPatchSize;
    const std::size_t py = y0 + (k / kPatchGridCols) * kPatchSize;
    for (std::size_t dy = 0; dy < kPatchSize; ++dy)
      for (std::size_t dx = 0; dx < kPatchSize; ++dx) img.at(px + dx, py + dy) = v;
  }
  return img;
}

AuPose read_conditioning(const FrameImage& image) {
  const std::size_t block_w = kPatchGridCols * kPatchSize, block_h = kPatchGridRows * kPatchSize;
  if (image.width < block_w || image.height < block_h) {
    throw DataError("image too small for a conditioning block");
  }
  const std::size_t x0 = (image.width - block_w) / 2, y0 = (image.height - block_h) / 2;
  AuPose out;
  for (std::size_t k = 0; k < kFrameDim; ++k)
    out.values[k] = image.at(x0 + (k % kPatchGridCols) * kPatchSize,
                             y0 + (k / kPatchGridCols) * kPatchSize);
  return out;
}

RenderedFace render_face(const AuPose& input, std::size_t res) {
  check_resolution(res);
  for (double v : input.values) {
    if (!std::isfinite(v)) throw NumericError("render_face of a non-finite frame");
  }
  const AuPose p = clamp_native(input);
  RenderedFace out{FrameImage(res, res), !(p == input)};
  FrameImage& img = out.image;
  const double s = static_cast<double>(res) / 32.0;
  const double half = static_cast<double>(res) / 2.0;
  const double cx = half + kShiftPerRad * s * p.pose(1);
  const double cy = half + kShiftPerRad * s * p.pose(0);
  const double tilt = kTiltPerRad * p.pose(2);
  const double cos_t = std::cos(tilt), sin_t = std::sin(tilt);
  const double a = kHeadSemiX * s, b = kHeadSemiY * s;
  const double inv_samples = 1.0 / (kSupersample * kSupersample);

  for (std::size_t y = 0; y < res; ++y) {
    for (std::size_t x = 0; x < res; ++x) {
      int inside = 0;
      for (int sy = 0; sy < kSupersample; ++sy) {
        const double dy = static_cast<double>(y) + (sy + 0.5) / kSupersample - cy;
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double dx = static_cast<double>(x) + (sx + 0.5) / kSupersample - cx;
          // Rotate into the head frame, whose long axis is vertical.
          const double u = dx * cos_t + dy * sin_t;
          const double v = -dx * sin_t + dy * cos_t;
          if ((u / a) * (u / a) + (v / b) * (v / b) <= 1.0) ++inside;
        }
      }
      img.at(x, y) = kFaceFill * inside * inv_samples;
    }
  }

  for (const Bar& bar : kBars) {
    const BarRect r = bar_rect(bar, bar_fraction(bar.id, p), cx, cy, s);
    fill_rect(img, r.x0, r.x1, r.y0, r.y1, kFeatureFill);
    if (bar.mirrored) fill_rect(img, 2.0 * cx - r.x1, 2.0 * cx - r.x0, r.y0, r.y1, kFeatureFill);
  }
  for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

const std::array<bool, kFrameDim>& renderer_mask() {
  static const std::array<bool, kFrameDim> mask = [] {
    std::array<bool, kFrameDim> m{};
    for (std::string_view name : {"AU01", "AU02", "AU04", "AU05", "AU12", "AU25", "AU26", "AU45"})
      m[au_index(name)] = true;
    for (std::size_t i = 0; i < kNumPose; ++i) m[kNumAu + i] = true;
    return m;
  }();
  return mask;
}

ExtractedFace extract_aupose(const FrameImage& img) {
  if (img.width != img.height) throw DataError("extract_aupose needs a square image");
  check_resolution(img.width);
  const std::size_t res = img.width;
  const double s = static_cast<double>(res) / 32.0;
  const double half = static_cast<double>(res) / 2.0;

  double area = 0.0, mx = 0.0, my = 0.0;
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      const double c = std::clamp(img.at(x, y) / kFaceFill, 0.0, 1.0);
      area += c;
      mx += c * (static_cast<double>(x) + 0.5);
      my += c * (static_cast<double>(y) + 0.5);
    }
  const double expected = M_PI * kHeadSemiX * kHeadSemiY * s * s;
  if (!(area > 0.5 * expected)) {
    throw DataError("no face-like structure found (face area " + std::to_string(area) + ")");
  }
  const double cx = mx / area, cy = my / area;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      const double c = std::clamp(img.at(x, y) / kFaceFill, 0.0, 1.0);
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      sxx += c * dx * dx;
      syy += c * dy * dy;
      sxy += c * dx * dy;
    }
  // Orientation of the long axis; it is vertical at zero tilt.
  double tilt = 0.5 * std::atan2(2.0 * sxy, sxx - syy) - M_PI / 2.0;
  while (tilt < -M_PI / 2.0) tilt += M_PI;
  while (tilt >= M_PI / 2.0) tilt -= M_PI;

  ExtractedFace out;
  out.mask = renderer_mask();
  AuPose& p = out.values;
  p.pose(0) = (cy - half) / (kShiftPerRad * s);
  p.pose(1) = (cx - half) / (kShiftPerRad * s);
  p.pose(2) = tilt / kTiltPerRad;

  auto fraction = [&](BarId id) {
    for (const Bar& bar : kBars) {
      if (bar.id != id) continue;
      const BarRect r = bar_rect(bar, 1.0, cx, cy, s);
      double sum = window_sum(img, r);
      if (bar.mirrored) sum += window_sum(img, {2.0 * cx - r.x1, 2.0 * cx - r.x0, r.y0, r.y1});
      return std::clamp(sum / bar_full_area(bar, s), 0.0, 1.0);
    }
    return 0.0;
  };
  p.au(au_index("AU01")) = kAuMax * fraction(BarId::kInnerBrow);
  p.au(au_index("AU02")) = kAuMax * fraction(BarId::kOuterBrow);
  p.au(au_index("AU04")) = kAuMax * fraction(BarId::kFurrow);
  p.au(au_index("AU05")) = kAuMax * fraction(BarId::kLid);
  p.au(au_index("AU12")) = kAuMax * fraction(BarId::kLipCorner);
  p.au(au_index("AU45")) = kAuMax * (1.0 - fraction(BarId::kEye));
  const double jaw = kAuMax * fraction(BarId::kChin);
  p.au(au_index("AU26")) = jaw;
  p.au(au_index("AU25")) =
      std::clamp(2.0 * kAuMax * fraction(BarId::kMouth) - jaw, 0.0, kAuMax);
  out.values = clamp_native(p);
  return out;
}

std::string renderer_spec_text(std::size_t res) {
  check_resolution(res);
  const double s = static_cast<double>(res) / 32.0;
  std::ostringstream os;
  auto line = [&](const std::string& name, double v) { os << name << " = " << shortest(v) << "\n"; };
  line("resolution", static_cast<double>(res));
  line("head.semi_axis_x", kHeadSemiX * s);
  line("head.semi_axis_y", kHeadSemiY * s);
  line("head.fill", kFaceFill);
  line("head.supersample", kSupersample);
  line("pose_Ry.center_x_px_per_rad", kShiftPerRad * s);
  line("pose_Rx.center_y_px_per_rad", kShiftPerRad * s);
  line("pose_Rz.tilt_rad_per_rad", kTiltPerRad);
  line("feature.fill", kFeatureFill);
  line("feature.window_margin_px", kWindowMargin);
  for (const Bar& bar : kBars) {
    const std::string n = std::string("bar.") + bar.name;
    line(n + ".x_inner", bar.x_in * s);
    line(n + ".x_outer", bar.x_out * s);
    line(n + ".mirrored", bar.mirrored ? 1.0 : 0.0);
    line(n + ".y_top", bar.y_top * s);
    line(n + ".y_bottom", bar.y_bottom * s);
    // -1 grows upward from y_bottom, 1 downward from y_top, 0 about the middle.
    line(n + ".grow", bar.grow == Grow::kUp ? -1.0 : (bar.grow == Grow::kDown ? 1.0 : 0.0));
    // Height per native AU unit; the eye bar shrinks with AU45 from full
    // height and the mouth bar uses the sum AU25 + AU26.
    const double full = (bar.y_bottom - bar.y_top) * s;
    line(n + ".height_per_unit", bar.id == BarId::kMouth ? full / (2.0 * kAuMax) : full / kAuMax);
  }
  return os.str();
}

PerceptualNet::PerceptualNet(std::size_t res, std::uint64_t seed) : res_(res) {
  if (res % 2 != 0 || res == 0) throw ConfigError("perceptual net needs an even resolution");
  Rng rng(mix_seed(seed, 0x70657263));
  first_ = random_kernels(Shape{4, 1, 3, 3}, rng);
  second_ = random_kernels(Shape{8, 4, 3, 3}, rng);
}

std::array<Var, 2> PerceptualNet::features(Var images) const {
  require_pixels(images, res_, "perceptual features");
  const Var f1 = ops::relu(ops::conv3x3(images, first_, 1, res_, res_));
  const Var pooled = ops::avg_pool2(f1, 4, res_, res_);
  const Var f2 = ops::relu(ops::conv3x3(pooled, second_, 4, res_ / 2, res_ / 2));
  return {f1, f2};
}

void SynthConfig::validate() const {
  if (resolution == 0 || resolution % 2 != 0) {
    throw ConfigError("synth resolution must be even and positive");
  }
  if (resolution > 64) throw ConfigError("synth resolution above 64 is not supported");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("synth lr must be positive");
  if (!(discriminator_lr >= 0.0) || !std::isfinite(discriminator_lr)) {
    throw ConfigError("synth discriminator lr must be non-negative");
  }
  if (batch == 0) throw ConfigError("synth batch must be positive");
  if (eval_interval == 0) throw ConfigError("synth eval_interval must be positive");
  for (std::size_t w : generator_widths)
    if (w == 0) throw ConfigError("generator widths must be positive");
  for (std::size_t w : discriminator_widths)
    if (w == 0) throw ConfigError("discriminator widths must be positive");
  for (double w : {adversarial_weight, l1_weight, perceptual_weight})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be non-negative");
}

Generator::Generator(std::size_t res, const std::vector<std::size_t>& widths,
                     std::uint64_t seed)
    : res_(res), layers_(widths.size() + 1) {
  Rng rng(seed);
  add_dense_stack(params_, "synth.G", 2 * res * res, widths, res * res, rng);
}

Var Generator::forward(Tape& tape, Var x, Var prev) {
  require_pixels(x, res_, "generator input");
  require_pixels(prev, res_, "generator previous frame");
  const Var parts[] = {x, prev};
  return run_dense_stack(tape, params_, "synth.G", layers_, ops::concat_cols(parts));
}

FrameImage Generator::forward(const FrameImage& x, const FrameImage& prev) {
  require_same_size(x, prev, "generator");
  if (x.width != res_ || x.height != res_) throw ShapeError("generator resolution mismatch");
  Tape tape;
  tape.treat_as_constant(params_);
  const FrameImage xs[] = {x}, ps[] = {prev};
  const Var out = forward(tape, tape.constant(images_to_rows(xs)), tape.constant(images_to_rows(ps)));
  return row_to_image(out.value(), 0, res_, res_);
}

Discriminator::Discriminator(std::size_t res, const std::vector<std::size_t>& widths,
                             std::uint64_t seed)
    : res_(res), layers_(widths.size() + 1) {
  Rng rng(seed);
  add_dense_stack(params_, "synth.D", 4 * res * res, widths, 1, rng);
}

Var Discriminator::forward(Tape& tape, Var x_prev, Var x_t, Var y_prev, Var y_t) {
  for (Var v : {x_prev, x_t, y_prev, y_t}) require_pixels(v, res_, "discriminator input");
  const Var parts[] = {x_prev, x_t, y_prev, y_t};
  return run_dense_stack(tape, params_, "synth.D", layers_, ops::concat_cols(parts));
}

double Discriminator::forward(const FrameImage& x_prev, const FrameImage& x_t,
                              const FrameImage& y_prev, const FrameImage& y_t) {
  for (const FrameImage* im : {&x_t, &y_prev, &y_t}) require_same_size(x_prev, *im, "discriminator");
  if (x_prev.width != res_ || x_prev.height != res_) {
    throw ShapeError("discriminator resolution mismatch");
  }
  Tape tape;
  tape.treat_as_constant(params_);
  auto row = [&](const FrameImage& im) { return tape.constant(images_to_rows(std::span(&im, 1))); };
  return forward(tape, row(x_prev), row(x_t), row(y_prev), row(y_t)).value()[0];
}

Var gan_objective(Var d_real, Var d_fake) {
  require_open_unit(d_real.value(), "real");
  require_open_unit(d_fake.value(), "fake");
  return ops::add(ops::mean(ops::log(d_real)), ops::mean(ops::log(one_minus(d_fake))));
}

Var generator_adversarial(Var d_fake) {
  require_open_unit(d_fake.value(), "fake");
  return ops::scale(ops::mean(ops::log(d_fake)), -1.0);
}

Var l1_loss(Var generated, Var target) {
  if (generated.shape() != target.shape()) {
    throw ShapeError("l1_loss shape mismatch: " + shape_string(generated.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  return ops::mean(ops::abs(ops::sub(generated, target)));
}

Var perceptual_loss(const PerceptualNet& net, Var generated, Var target) {
  if (generated.shape() != target.shape()) {
    throw ShapeError("perceptual_loss shape mismatch: " + shape_string(generated.shape()) +
                     " vs " + shape_string(target.shape()));
  }
  const auto fg = net.features(generated);
  const auto ft = net.features(target);
  return ops::add(ops::mean(ops::square(ops::sub(fg[0], ft[0]))),
                  ops::mean(ops::square(ops::sub(fg[1], ft[1]))));
}

Var combined_gan_loss(const PerceptualNet& net, Var d_real, Var d_fake, Var generated,
                      Var target, const GanWeights& weights) {
  return ops::add(ops::add(ops::scale(gan_objective(d_real, d_fake), weights.adversarial),
                           ops::scale(l1_loss(generated, target), weights.l1)),
                  ops::scale(perceptual_loss(net, generated, target), weights.perceptual));
}

GanLosses gan_losses(std::span<const double> d_real, std::span<const double> d_fake,
                     const Array& generated, const Array& target, const PerceptualNet& net,
                     const GanWeights& weights) {
  if (d_real.empty() || d_fake.empty()) throw ShapeError("gan_losses needs scores");
  Tape tape;
  auto column = [&](std::span<const double> v) {
    return tape.constant(Array(Shape{v.size(), 1}, std::vector<double>(v.begin(), v.end())));
  };
  const Var real = column(d_real), fake = column(d_fake);
  const Var g = tape.constant(generated), y = tape.constant(target);
  GanLosses out;
  out.gan = gan_objective(real, fake).value().item();
  out.l1 = l1_loss(g, y).value().item();
  out.perceptual = perceptual_loss(net, g, y).value().item();
  out.total = weights.adversarial * out.gan + weights.l1 * out.l1 +
              weights.perceptual * out.perceptual;
  return out;
}

std::string format_synth_history(const std::vector<SynthHistoryRow>& rows) {
  std::string out = "step,gan,d_loss,g_adv,l1,perceptual,total\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step);
    for (double v : {r.gan, r.d_loss, r.g_adv, r.l1, r.perceptual, r.total}) out += "," + shortest(v);
    out += "\n";
  }
  return out;
}

SynthModel::SynthModel(const SynthConfig& cfg)
    : config((cfg.validate(), cfg)),
      generator(cfg.resolution, cfg.generator_widths, mix_seed(cfg.seed, 1)),
      discriminator(cfg.resolution, cfg.discriminator_widths, mix_seed(cfg.seed, 2)),
      perceptual(cfg.resolution, cfg.perceptual_seed) {}

SynthTraining train_synth(SynthModel& model, const std::vector<AuPoseSequence>& sequences,
                          const NormStats& stats) {
  const SynthConfig& cfg = model.config;
  cfg.validate();
  if (sequences.empty()) throw DataError("train_synth: empty dataset");
  const std::size_t res = cfg.resolution, px = res * res;

  // Conditioning and target images of every frame, one row each.
  std::vector<Array> cond, target;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) throw DataError("train_synth: sequences need at least 2 frames");
    Array x(Shape{seq.size(), px}), y(Shape{seq.size(), px});
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const FrameImage xi = conditioning_image(seq.frames[t], stats, res);
      const FrameImage yi = render_face(seq.frames[t], res).image;
      std::copy(xi.pixels.begin(), xi.pixels.end(), x.data() + t * px);
      std::copy(yi.pixels.begin(), yi.pixels.end(), y.data() + t * px);
    }
    cond.push_back(std::move(x));
    target.push_back(std::move(y));
  }

  Rng rng(mix_seed(cfg.seed, 0x6761));
  const AdamConfig adam{cfg.lr};
  const AdamConfig adam_d{cfg.discriminator_lr > 0.0 ? cfg.discriminator_lr : cfg.lr};
  const GanWeights w{cfg.adversarial_weight, cfg.l1_weight, cfg.perceptual_weight};
  Generator& g = model.generator;
  Discriminator& d = model.discriminator;
  SynthTraining out;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t b = cfg.batch;
    Array xp(Shape{b, px}), xt(Shape{b, px}), ypp(Shape{b, px}), yp(Shape{b, px}), yt(Shape{b, px});
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t s = rng.index(sequences.size());
      const std::size_t t = 1 + rng.index(sequences[s].size() - 1);
      auto copy_row = [&](const Array& src, std::size_t frame, Array& dst) {
        std::copy(src.data() + frame * px, src.data() + (frame + 1) * px, dst.data() + i * px);
      };
      copy_row(cond[s], t - 1, xp);
      copy_row(cond[s], t, xt);
      if (t >= 2) copy_row(target[s], t - 2, ypp);
      copy_row(target[s], t - 1, yp);
      copy_row(target[s], t, yt);
    }

    SynthHistoryRow row;
    row.step = step;
    {
      Tape tape;
      tape.treat_as_constant(g.params());
      const Var vxp = tape.constant(xp), vxt = tape.constant(xt);
      const Var fake_prev = g.forward(tape, vxp, tape.constant(ypp));
      const Var fake_t = g.forward(tape, vxt, fake_prev);
      const Var real = d.forward(tape, vxp, vxt, tape.constant(yp), tape.constant(yt));
      const Var fake = d.forward(tape, vxp, vxt, fake_prev, fake_t);
      const Var objective = gan_objective(real, fake);
      const Var loss = ops::scale(objective, -1.0);
      row.gan = objective.value().item();
      row.d_loss = loss.value().item();
      if (!std::isfinite(row.d_loss)) throw NumericError("non-finite discriminator loss at step " + std::to_string(step));
      tape.backward(loss);
      adam_step(d.params(), adam_d);
    }
    {
      Tape tape;
      tape.treat_as_constant(d.params());
      const Var vxp = tape.constant(xp), vxt = tape.constant(xt);
      const Var vyp = tape.constant(yp), vyt = tape.constant(yt);
      const Var fake_prev = g.forward(tape, vxp, tape.constant(ypp));
      const Var fake_t = g.forward(tape, vxt, fake_prev);
      const Var adv = generator_adversarial(d.forward(tape, vxp, vxt, fake_prev, fake_t));
      const Var l1 = ops::scale(ops::add(l1_loss(fake_prev, vyp), l1_loss(fake_t, vyt)), 0.5);
      const Var perc = ops::scale(ops::add(perceptual_loss(model.perceptual, fake_prev, vyp),
                                           perceptual_loss(model.perceptual, fake_t, vyt)),
                                  0.5);
      const Var total = ops::add(ops::add(ops::scale(adv, w.adversarial), ops::scale(l1, w.l1)),
                                 ops::scale(perc, w.perceptual));
      row.g_adv = adv.value().item();
      row.l1 = l1.value().item();
      row.perceptual = perc.value().item();
      row.total = total.value().item();
      if (!std::isfinite(row.total)) throw NumericError("non-finite generator loss at step " + std::to_string(step));
      tape.backward(total);
      adam_step(g.params(), adam);
    }
    if (step % cfg.eval_interval == 0 || step == cfg.steps) out.history.push_back(row);
  }
  return out;
}

std::vector<FrameImage> generate_sequence(Generator& generator, const AuPoseSequence& seq,
                                          const NormStats& stats) {
  const std::size_t res = generator.resolution();
  std::vector<FrameImage> out;
  FrameImage prev = zero_image(res);
  for (const AuPose& p : seq.frames) {
    out.push_back(generator.forward(conditioning_image(p, stats, res), prev));
    prev = out.back();
  }
  return out;
}

SynthEval evaluate_synth(Generator& generator, const std::vector<AuPoseSequence>& sequences,
                         const NormStats& stats) {
  SynthEval r;
  const auto& mask = renderer_mask();
  double l1 = 0.0, au = 0.0, pose = 0.0;
  std::size_t au_terms = 0, pose_terms = 0;
  for (const auto& seq : sequences) {
    const auto frames = generate_sequence(generator, seq, stats);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const FrameImage y = render_face(seq.frames[t], generator.resolution()).image;
      double diff = 0.0;
      for (std::size_t i = 0; i < y.pixels.size(); ++i) diff += std::fabs(frames[t].pixels[i] - y.pixels[i]);
      l1 += diff / static_cast<double>(y.pixels.size());
      ++r.frames;
      ExtractedFace e;
      try {
        e = extract_aupose(frames[t]);
      } catch (const DataError&) {
        ++r.failures;
        continue;
      }
      const AuPose truth = normalize(clamp_native(seq.frames[t]), stats);
      const AuPose got = normalize(e.values, stats);
      for (std::size_t k = 0; k < kFrameDim; ++k) {
        if (!mask[k]) continue;
        const double err = std::fabs(got.values[k] - truth.values[k]);
        if (k < kNumAu) {
          au += err;
          ++au_terms;
        } else {
          pose += err;
          ++pose_terms;
        }
      }
    }
  }
  if (r.frames == 0) throw DataError("evaluate_synth: no frames");
  r.l1 = l1 / static_cast<double>(r.frames);
  r.d_au = au_terms ? au / static_cast<double>(au_terms) : 0.0;
  r.d_pose = pose_terms ? pose / static_cast<double>(pose_terms) : 0.0;
  return r;
}

void save_synth(const std::filesystem::path& path, const SynthModel& model,
                const NormStats& stats) {
  const SynthConfig& c = model.config;
  std::vector<double> cfg{static_cast<double>(c.resolution),
                          static_cast<double>(c.generator_widths.size())};
  for (std::size_t w : c.generator_widths) cfg.push_back(static_cast<double>(w));
  cfg.push_back(static_cast<double>(c.discriminator_widths.size()));
  for (std::size_t w : c.discriminator_widths) cfg.push_back(static_cast<double>(w));
  cfg.push_back(static_cast<double>(c.perceptual_seed));
  auto blocks = blocks_of(model.generator.params());
  for (auto& b : blocks_of(model.discriminator.params())) blocks.push_back(std::move(b));
  const std::size_t n = cfg.size();
  blocks.push_back({"synth.config", Array(Shape{n}, std::move(cfg))});
  blocks.push_back({"stats", stats.to_array()});
  write_checkpoint(path, blocks);
}

LoadedSynth load_synth(const std::filesystem::path& path) {
  const auto blocks = read_checkpoint(path);
  const NamedArray* cfg_block = find_block(blocks, "synth.config");
  const NamedArray* stats_block = find_block(blocks, "stats");
  if (!cfg_block || !stats_block) {
    throw DataError(path.string() + " is not a synthesizer checkpoint");
  }
  const auto v = cfg_block->value.values();
  auto as_size = [&](std::size_t i) {
    if (i >= v.size() || !(v[i] >= 0.0) || v[i] != std::floor(v[i]) || v[i] > 9.007199254740992e15) {
      throw DataError(path.string() + ": malformed synth.config block");
    }
    return static_cast<std::size_t>(v[i]);
  };
  SynthConfig cfg;
  std::size_t i = 0;
  cfg.resolution = as_size(i++);
  cfg.generator_widths.assign(as_size(i++), 0);
  for (auto& w : cfg.generator_widths) w = as_size(i++);
  cfg.discriminator_widths.assign(as_size(i++), 0);
  for (auto& w : cfg.discriminator_widths) w = as_size(i++);
  cfg.perceptual_seed = as_size(i++);
  if (i != v.size()) throw DataError(path.string() + ": malformed synth.config block");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  LoadedSynth out{std::make_unique<SynthModel>(cfg), NormStats::from_array(stats_block->value)};
  load_blocks(out.model->generator.params(), blocks);
  load_blocks(out.model->discriminator.params(), blocks);
  return out;
}

std::string encode_pgm(const FrameImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  for (double v : image.pixels) {
    if (!std::isfinite(v)) throw NumericError("PGM of a non-finite pixel");
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  return out;
}

FrameImage decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0;
    const auto res = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
    if (res.ec != std::errc() || res.ptr == bytes.data() + pos) {
      throw DataError(std::string("PGM: bad ") + what);
    }
    pos = static_cast<std::size_t>(res.ptr - bytes.data());
    return v;
  };
  if (bytes.substr(0, 2) != "P5") throw DataError("PGM: missing P5 magic");
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw DataError("PGM: unsupported header");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw DataError("PGM: header not terminated");
  }
  ++pos;
  if (bytes.size() - pos != w * h) {
    throw DataError("PGM: expected " + std::to_string(w * h) + " pixel bytes, found " +
                    std::to_string(bytes.size() - pos));
  }
  FrameImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i)
    img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]) / static_cast<double>(maxval);
  return img;
}

void write_pgm(const std::filesystem::path& path, const FrameImage& image) {
  write_text_file(path, encode_pgm(image));
}

FrameImage read_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(read_text_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_frame_sequence(const std::filesystem::path& dir, const std::vector<FrameImage>& frames,
                          double fps) {
  std::filesystem::create_directories(dir);
  std::string index = "fps=" + shortest(fps) + "\n";
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05zu.pgm", i);
    write_pgm(dir / name, frames[i]);
    index += std::string(name) + "\n";
  }
  write_text_file(dir / "index.txt", index);
}

std::vector<FrameImage> read_frame_sequence(const std::filesystem::path& dir, double* fps) {
  std::istringstream in(read_text_file(dir / "index.txt"));
  std::string line;
  if (!std::getline(in, line) || line.rfind("fps=", 0) != 0) {
    throw DataError((dir / "index.txt").string() + ": first line must be fps=...");
  }
  double rate = 0.0;
  if (!parse_double(line.substr(4), rate) || !(rate > 0.0)) {
    throw DataError((dir / "index.txt").string() + ": bad fps");
  }
  if (fps) *fps = rate;
  std::vector<FrameImage> frames;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    frames.push_back(read_pgm(dir / std::string(trim(line))));
  }
  return frames;
}

}  // namespace facetalk
