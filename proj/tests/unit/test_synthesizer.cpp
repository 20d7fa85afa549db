#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "facetalk/checkpoint.hpp"
#include "facetalk/error.hpp"
#include "facetalk/gradcheck.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/ops.hpp"
#include "facetalk/optim.hpp"
#include "facetalk/synthesizer.hpp"

using namespace facetalk;
namespace fs = std::filesystem;

namespace {

NormStats unit_stats() {
  NormStats s;
  for (std::size_t k = 0; k < kFrameDim; ++k) {
    s.min[k] = k < kNumAu ? 0.0 : -1.0;
    s.max[k] = k < kNumAu ? 5.0 : 1.0;
  }
  return s;
}

AuPose random_pose(Rng& rng) {
  AuPose p;
  for (std::size_t k = 0; k < kNumAu; ++k) p.au(k) = rng.uniform(0.0, kAuMax);
  for (std::size_t k = 0; k < kNumPose; ++k) p.pose(k) = rng.uniform(-kPoseLimit, kPoseLimit);
  return p;
}

Array random_images(Rng& rng, std::size_t rows, std::size_t px) {
  Array a(Shape{rows, px});
  for (double& v : a.values()) v = rng.uniform();
  return a;
}

void zero_params(ParamStore& store) {
  for (std::size_t i = 0; i < store.size(); ++i) store.entry(i).value.fill(0.0);
}

}  // namespace

TEST_CASE("conditioning image layout and read-back") {
  const NormStats stats = unit_stats();
  AuPose lo, hi;
  for (std::size_t k = 0; k < kFrameDim; ++k) {
    lo.values[k] = stats.min[k];
    hi.values[k] = stats.max[k];
  }
  const FrameImage empty = conditioning_image(lo, stats, 32);
  for (double v : empty.pixels) CHECK(v == 0.0);
  const FrameImage full = conditioning_image(hi, stats, 32);
  std::size_t lit = 0;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const bool inside = x >= 11 && x < 21 && y >= 12 && y < 20;
      CHECK(full.at(x, y) == (inside ? 1.0 : 0.0));
      lit += inside;
    }
  CHECK(lit == 80);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    AuPose p;
    for (std::size_t k = 0; k < kFrameDim; ++k) p.values[k] = rng.uniform(stats.min[k], stats.max[k]);
    const AuPose back = read_conditioning(conditioning_image(p, stats, 32));
    CHECK(back == normalize(p, stats));
  }
  CHECK_THROWS_AS(conditioning_image(lo, stats, 8), ConfigError);
  AuPose bad;
  bad.values[3] = NAN;
  CHECK_THROWS_AS(conditioning_image(bad, stats, 32), NumericError);
}

TEST_CASE("renderer examples") {
  AuPose neutral;
  const FrameImage n = render_face(neutral, 32).image;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) CHECK(n.at(x, y) == n.at(31 - x, y));
  for (double v : n.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // Eye bar [12.5, 14] x [13, 14.5] at zero pose.
  AuPose blink;
  blink.au(au_index("AU45")) = 5.0;
  const FrameImage b = render_face(blink, 32).image;
  for (std::size_t y = 12; y <= 14; ++y)
    for (std::size_t x = 12; x <= 14; ++x) CHECK(b.at(x, y) == 0.5);
  CHECK(n.at(13, 13) > 0.5);
  CHECK(extract_aupose(b).values.au(au_index("AU45")) == doctest::Approx(5.0));

  // Mouth bar [15.5, 16.5] x [18.5, 20] at full opening.
  AuPose open;
  open.au(au_index("AU25")) = 5.0;
  open.au(au_index("AU26")) = 5.0;
  const FrameImage m = render_face(open, 32).image;
  double mouth = 0.0;
  for (std::size_t y = 17; y <= 20; ++y)
    for (std::size_t x = 15; x <= 16; ++x) mouth += (m.at(x, y) - 0.5) / 0.5;
  CHECK(mouth == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(m.at(15, 18) == doctest::Approx(0.625));
  CHECK(m.at(15, 19) == doctest::Approx(0.75));

  CHECK_FALSE(render_face(neutral).clamped);
  AuPose wild;
  wild.au(0) = 9.0;
  wild.pose(2) = -4.0;
  const RenderedFace w = render_face(wild);
  CHECK(w.clamped);
  AuPose tame = wild;
  tame.au(0) = 5.0;
  tame.pose(2) = -kPoseLimit;
  CHECK(w.image == render_face(tame).image);
  CHECK_THROWS_AS(render_face(neutral, 30), ConfigError);
}

TEST_CASE("extractor inverts the renderer on masked dimensions") {
  const auto& mask = renderer_mask();
  std::size_t masked = 0;
  for (bool m : mask) masked += m;
  CHECK(masked == 11);
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const AuPose p = random_pose(rng);
    const ExtractedFace e = extract_aupose(render_face(p, 32).image);
    for (std::size_t k = 0; k < kFrameDim; ++k) {
      if (mask[k]) {
        worst = std::max(worst, std::fabs(e.values.values[k] - p.values[k]));
      } else {
        CHECK(e.values.values[k] == 0.0);
      }
    }
  }
  MESSAGE("worst roundtrip error " << worst);
  CHECK(worst <= 0.05);

  for (std::size_t res : {48, 64}) {
    const AuPose p = random_pose(rng);
    const ExtractedFace e = extract_aupose(render_face(p, res).image);
    for (std::size_t k = 0; k < kFrameDim; ++k)
      if (mask[k]) CHECK(std::fabs(e.values.values[k] - p.values[k]) <= 0.05);
  }
  CHECK_THROWS_AS(extract_aupose(FrameImage(32, 32)), DataError);
}

TEST_CASE("renderer coefficient listing") {
  const KeyValues kv = parse_key_values(renderer_spec_text(32), "renderer_spec");
  double v = 0.0;
  REQUIRE(find_value(kv, "head.semi_axis_x"));
  CHECK(parse_double(*find_value(kv, "head.semi_axis_x"), v));
  CHECK(v == 9.0);
  REQUIRE(find_value(kv, "bar.AU45.height_per_unit"));
  CHECK(parse_double(*find_value(kv, "bar.AU45.height_per_unit"), v));
  CHECK(v == doctest::Approx(0.3));
  REQUIRE(find_value(kv, "resolution"));
}

TEST_CASE("generator and discriminator forward") {
  Generator g(8, {6}, 1);
  Discriminator d(8, {5}, 2);
  const FrameImage x(8, 8, 0.3), prev(8, 8, 0.7);
  const FrameImage out = g.forward(x, prev);
  CHECK(out == g.forward(x, prev));
  for (double v : out.pixels) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const double score = d.forward(x, x, prev, out);
  CHECK(score > 0.0);
  CHECK(score < 1.0);

  zero_params(g.params());
  zero_params(d.params());
  for (double v : g.forward(x, prev).pixels) CHECK(v == 0.5);
  CHECK(d.forward(x, x, prev, prev) == 0.5);

  CHECK_THROWS_AS(g.forward(FrameImage(16, 16), FrameImage(16, 16)), ShapeError);
  CHECK_THROWS_AS(g.forward(x, FrameImage(16, 16)), ShapeError);
  CHECK_THROWS_AS(d.forward(x, x, x, FrameImage(16, 16)), ShapeError);
}

TEST_CASE("GAN losses") {
  const PerceptualNet net(8, 3);
  Rng rng(5);
  const Array y = random_images(rng, 3, 64);
  const std::vector<double> half(3, 0.5);
  const GanLosses same = gan_losses(half, half, y, y, net);
  CHECK(same.gan == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-12));
  CHECK(same.gan == doctest::Approx(-1.3863).epsilon(1e-4));
  CHECK(same.l1 == 0.0);
  CHECK(same.perceptual == 0.0);
  CHECK(same.total == same.gan);

  const std::vector<double> real{1.0 - 1e-9, 1.0 - 1e-9}, fake{1e-9, 1e-9};
  const GanLosses sharp = gan_losses(real, fake, y, y, net);
  CHECK(sharp.gan < 0.0);
  CHECK(sharp.gan > -1e-8);

  const Array g = random_images(rng, 3, 64);
  const std::vector<double> dr{0.9, 0.6, 0.7}, df{0.2, 0.4, 0.1};
  const GanWeights weights{0.5, 2.0, 3.0};
  const GanLosses l = gan_losses(dr, df, g, y, net, weights);
  double expected_gan = 0.0, expected_l1 = 0.0;
  for (std::size_t i = 0; i < 3; ++i) expected_gan += std::log(dr[i]) / 3.0 + std::log(1.0 - df[i]) / 3.0;
  for (std::size_t i = 0; i < g.size(); ++i) expected_l1 += std::fabs(g[i] - y[i]) / static_cast<double>(g.size());
  CHECK(l.gan == doctest::Approx(expected_gan).epsilon(1e-12));
  CHECK(l.l1 == doctest::Approx(expected_l1).epsilon(1e-12));
  CHECK(l.perceptual > 0.0);
  CHECK(l.total == doctest::Approx(0.5 * l.gan + 2.0 * l.l1 + 3.0 * l.perceptual).epsilon(1e-12));

  const std::vector<double> bad{1.0};
  CHECK_THROWS_AS(gan_losses(bad, half, y, y, net), NumericError);
  CHECK_THROWS_AS(gan_losses(half, std::vector<double>{0.0}, y, y, net), NumericError);
}

TEST_CASE("GAN networks pass the finite-difference check") {
  Generator g(8, {6}, 3);
  Discriminator d(8, {5}, 4);
  const PerceptualNet net(8, 9);
  Rng rng(8);
  const Array xp = random_images(rng, 2, 64), xt = random_images(rng, 2, 64);
  const Array yp = random_images(rng, 2, 64), yt = random_images(rng, 2, 64);
  GradCheckOptions opts;
  opts.samples = 120;
  const auto report = check_gradients({&g.params(), &d.params()}, [&](Tape& tape) {
    const Var vxp = tape.constant(xp), vxt = tape.constant(xt);
    const Var vyp = tape.constant(yp), vyt = tape.constant(yt);
    const Var fake_prev = g.forward(tape, vxp, vyp);
    const Var fake_t = g.forward(tape, vxt, fake_prev);
    const Var real = d.forward(tape, vxp, vxt, vyp, vyt);
    const Var fake = d.forward(tape, vxp, vxt, fake_prev, fake_t);
    return combined_gan_loss(net, real, fake, fake_t, vyt, GanWeights{});
  }, opts);
  MESSAGE("checked " << report.checked << " max rel " << report.max_rel_error);
  CHECK(report.checked >= 100);
  CHECK(report.passed());
}

TEST_CASE("discriminator step does not increase its batch loss") {
  Generator g(8, {6}, 5);
  Discriminator d(8, {5}, 6);
  Rng rng(9);
  const Array xp = random_images(rng, 4, 64), xt = random_images(rng, 4, 64);
  const Array yp = random_images(rng, 4, 64), yt = random_images(rng, 4, 64);
  auto d_loss = [&](bool step) {
    Tape tape;
    tape.treat_as_constant(g.params());
    const Var vxp = tape.constant(xp), vxt = tape.constant(xt);
    const Var fake_prev = g.forward(tape, vxp, tape.constant(yp));
    const Var fake_t = g.forward(tape, vxt, fake_prev);
    const Var loss = ops::scale(
        gan_objective(d.forward(tape, vxp, vxt, tape.constant(yp), tape.constant(yt)),
                      d.forward(tape, vxp, vxt, fake_prev, fake_t)),
        -1.0);
    if (step) {
      tape.backward(loss);
      adam_step(d.params(), AdamConfig{1e-5});
    }
    return loss.value().item();
  };
  const std::uint64_t g_before = g.params().checksum("synth.G.layer0.W");
  const double before = d_loss(true);
  CHECK(d_loss(false) <= before);
  CHECK(g.params().checksum("synth.G.layer0.W") == g_before);
}

TEST_CASE("synth training is deterministic and checkpoints round-trip") {
  std::vector<AuPoseSequence> seqs;
  for (std::uint64_t i = 0; i < 3; ++i) seqs.push_back(synth_conversation(40 + i, 4).listener);
  std::vector<const AuPoseSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  const NormStats stats = compute_norm_stats(ptrs);
  SynthConfig cfg;
  cfg.generator_widths = {8};
  cfg.discriminator_widths = {4};
  cfg.batch = 2;
  cfg.steps = 6;
  cfg.eval_interval = 4;
  cfg.seed = 3;
  SynthModel a(cfg), b(cfg);
  const auto ha = train_synth(a, seqs, stats);
  const auto hb = train_synth(b, seqs, stats);
  CHECK(format_synth_history(ha.history) == format_synth_history(hb.history));
  REQUIRE(ha.history.size() == 2);
  CHECK(ha.history[1].step == 6);
  CHECK(format_synth_history(ha.history).rfind("step,gan,d_loss,g_adv,l1,perceptual,total\n4,", 0) == 0);
  CHECK_THROWS_AS(train_synth(a, {}, stats), DataError);
  CHECK_THROWS_AS(train_synth(a, {AuPoseSequence{{AuPose{}}}}, stats), DataError);

  const SynthEval ev = evaluate_synth(a.generator, seqs, stats);
  CHECK(ev.frames == 12);
  CHECK(std::isfinite(ev.l1));

  const fs::path dir = fs::temp_directory_path() / "facetalk_test_synth";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_synth(dir / "s.ckpt", a, stats);
  const LoadedSynth loaded = load_synth(dir / "s.ckpt");
  CHECK(loaded.model->config.generator_widths == cfg.generator_widths);
  CHECK(loaded.model->config.discriminator_widths == cfg.discriminator_widths);
  CHECK(loaded.stats.min == stats.min);
  const auto frames = generate_sequence(a.generator, seqs[0], stats);
  CHECK(generate_sequence(loaded.model->generator, seqs[0], stats) == frames);
  const auto blocks = read_checkpoint(dir / "s.ckpt");
  CHECK(find_block(blocks, "synth.G.layer0.W") != nullptr);
  CHECK(find_block(blocks, "synth.D.layer1.b") != nullptr);

  SynthConfig bad = cfg;
  bad.resolution = 31;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.discriminator_lr = -1e-4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  // A separate discriminator rate changes only how D moves.
  SynthConfig slow = cfg;
  slow.discriminator_lr = cfg.lr / 10.0;
  SynthModel c(slow);
  train_synth(c, seqs, stats);
  CHECK(blocks_of(c.discriminator.params()).front().value !=
        blocks_of(b.discriminator.params()).front().value);
}

TEST_CASE("PGM and frame sequences") {
  const fs::path dir = fs::temp_directory_path() / "facetalk_test_pgm";
  fs::remove_all(dir);
  Rng rng(2);
  std::vector<FrameImage> frames;
  for (int i = 0; i < 3; ++i) {
    FrameImage f(6, 4);
    for (double& v : f.pixels) v = rng.uniform();
    frames.push_back(f);
  }
  const std::string bytes = encode_pgm(frames[0]);
  CHECK(bytes.rfind("P5\n6 4\n255\n", 0) == 0);
  CHECK(bytes.size() == 11 + 24);
  const FrameImage back = decode_pgm(bytes);
  REQUIRE(back.width == 6);
  for (std::size_t i = 0; i < back.pixels.size(); ++i)
    CHECK(std::fabs(back.pixels[i] - frames[0].pixels[i]) <= 0.5 / 255.0 + 1e-12);
  CHECK(encode_pgm(back) == bytes);

  write_frame_sequence(dir, frames, 25.0);
  CHECK(fs::exists(dir / "frame_00002.pgm"));
  CHECK(read_text_file(dir / "index.txt") ==
        "fps=25\nframe_00000.pgm\nframe_00001.pgm\nframe_00002.pgm\n");
  double fps = 0.0;
  const auto again = read_frame_sequence(dir, &fps);
  CHECK(fps == 25.0);
  REQUIRE(again.size() == 3);
  CHECK(encode_pgm(again[2]) == encode_pgm(frames[2]));

  CHECK_THROWS_AS(decode_pgm("P2\n1 1\n255\n0"), DataError);
  CHECK_THROWS_AS(decode_pgm("P5\n2 2\n255\nab"), DataError);
  CHECK_THROWS_AS(read_pgm(dir / "missing.pgm"), DataError);
}
