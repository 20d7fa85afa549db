#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "doctest.h"
#include "facetalk/error.hpp"
#include "facetalk/features.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/rng.hpp"

using namespace facetalk;
namespace fs = std::filesystem;

namespace {

NormStats sample_stats() {
  NormStats s;
  for (std::size_t d = 0; d < kFrameDim; ++d) {
    s.min[d] = -1.0 + 0.1 * static_cast<double>(d);
    s.max[d] = 2.0 + 0.3 * static_cast<double>(d);
  }
  return s;
}

AuPoseSequence random_sequence(Rng& rng, std::size_t n) {
  AuPoseSequence seq;
  seq.frames.resize(n);
  for (auto& f : seq.frames) {
    for (std::size_t i = 0; i < kNumAu; ++i) f.au(i) = rng.uniform(0.0, kAuMax);
    for (std::size_t i = 0; i < kNumPose; ++i) f.pose(i) = rng.uniform(-1.5, 1.5);
  }
  return seq;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("facetalk_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string csv_text(const std::string& row2_au04) {
  AuPoseSequence seq;
  seq.frames.resize(3);
  std::string text = format_csv(seq);
  // Replace the AU04_r cell (4th column) of the second data row.
  std::size_t pos = 0;
  for (int line = 0; line < 2; ++line) pos = text.find('\n', pos) + 1;
  std::size_t cell = pos;
  for (int c = 0; c < 3; ++c) cell = text.find(',', cell) + 1;
  const std::size_t end = text.find(',', cell);
  return text.replace(cell, end - cell, row2_au04);
}

}  // namespace

TEST_CASE("column layout") {
  CHECK(column_name(0) == "AU01_r");
  CHECK(column_name(2) == "AU04_r");
  CHECK(column_name(16) == "AU45_r");
  CHECK(column_name(17) == "pose_Rx");
  CHECK(column_name(19) == "pose_Rz");
  CHECK(au_index("AU12") == 8);
  CHECK_THROWS_AS(au_index("AU03"), ConfigError);
}

TEST_CASE("normalize examples") {
  const NormStats s = sample_stats();
  AuPose lo, hi;
  lo.values = s.min;
  hi.values = s.max;
  for (double v : normalize(lo, s).values) CHECK(v == 0.0);
  for (double v : normalize(hi, s).values) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));

  NormStats degenerate = s;
  degenerate.max[4] = degenerate.min[4];
  AuPose x;
  x.values[4] = 123.0;
  CHECK(normalize(x, degenerate).values[4] == 0.5);
}

TEST_CASE("normalize then denormalize is identity") {
  const NormStats s = sample_stats();
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    AuPose x;
    for (double& v : x.values) v = rng.uniform(-5.0, 10.0);
    const AuPose back = denormalize(normalize(x, s), s);
    for (std::size_t d = 0; d < kFrameDim; ++d) CHECK(std::fabs(back.values[d] - x.values[d]) <= 1e-12);
  }
}

TEST_CASE("out-of-range values are not clamped") {
  const NormStats s = sample_stats();
  AuPose x;
  x.values = s.max;
  x.values[0] += 3.0;
  CHECK(normalize(x, s).values[0] > 1.0);
}

TEST_CASE("norm stats use only the given sequences") {
  AuPoseSequence a, b;
  a.frames.resize(2);
  b.frames.resize(1);
  a.frames[0].values[3] = -2.0;
  a.frames[1].values[3] = 4.0;
  b.frames[0].values[3] = 1.0;
  const NormStats s = compute_norm_stats({&a, &b});
  CHECK(s.min[3] == -2.0);
  CHECK(s.max[3] == 4.0);
  CHECK(s.min[0] == 0.0);
  CHECK(s.max[0] == 0.0);
  CHECK_THROWS_AS(compute_norm_stats({}), DataError);

  const fs::path dir = scratch_dir("stats");
  write_norm_stats(dir / "stats.txt", s);
  const NormStats back = read_norm_stats(dir / "stats.txt");
  CHECK(back.min == s.min);
  CHECK(back.max == s.max);
  CHECK(NormStats::from_array(s.to_array()).max == s.max);
}

TEST_CASE("ingest_csv") {
  const fs::path dir = scratch_dir("csv");
  SUBCASE("well-formed file") {
    write_text_file(dir / "a.csv", csv_text("1.5"));
    const AuPoseSequence seq = ingest_csv(dir / "a.csv");
    CHECK(seq.size() == 3);
    CHECK(seq.fps == 25.0);
    CHECK(seq.frames[1].values[2] == 1.5);
  }
  SUBCASE("NaN cell cites row and column") {
    write_text_file(dir / "a.csv", csv_text("NaN"));
    try {
      ingest_csv(dir / "a.csv");
      FAIL("expected a parse error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("row 2, column AU04_r") != std::string::npos);
    }
  }
  SUBCASE("missing column") {
    std::string text = csv_text("0");
    text.replace(text.find("AU09_r"), 6, "AU08_r");
    write_text_file(dir / "a.csv", text);
    CHECK_THROWS_WITH_AS(ingest_csv(dir / "a.csv"),
                         doctest::Contains("missing column AU09_r"), DataError);
  }
  SUBCASE("empty file") {
    write_text_file(dir / "a.csv", "");
    CHECK_THROWS_AS(ingest_csv(dir / "a.csv"), DataError);
  }
  SUBCASE("frame index must ascend from 0") {
    std::string text = csv_text("0");
    const std::size_t row1 = text.find('\n') + 1;
    text[row1] = '5';
    write_text_file(dir / "a.csv", text);
    CHECK_THROWS_WITH_AS(ingest_csv(dir / "a.csv"), doctest::Contains("row 1, column frame"),
                         DataError);
  }
  SUBCASE("fps from meta.txt") {
    write_text_file(dir / "a.csv", csv_text("0"));
    write_text_file(dir / "meta.txt", "fps=30\nsplit=val\n");
    CHECK(ingest_csv(dir / "a.csv").fps == 30.0);
  }
}

TEST_CASE("csv roundtrip preserves values to 1e-9") {
  Rng rng(11);
  const fs::path dir = scratch_dir("roundtrip");
  for (int trial = 0; trial < 20; ++trial) {
    const AuPoseSequence seq = random_sequence(rng, 1 + rng.index(40));
    write_csv(dir / "s.csv", seq);
    const AuPoseSequence back = ingest_csv(dir / "s.csv");
    REQUIRE(back.size() == seq.size());
    double worst = 0.0;
    for (std::size_t f = 0; f < seq.size(); ++f)
      for (std::size_t d = 0; d < kFrameDim; ++d)
        worst = std::max(worst, std::fabs(back.frames[f].values[d] - seq.frames[f].values[d]));
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("window counts") {
  AuPoseSequence seq;
  seq.frames.resize(10);
  CHECK(window(seq, 10, 1).size() == 1);
  seq.frames.resize(12);
  CHECK(window(seq, 10, 1).size() == 3);
  CHECK(window(seq, 5, 3).size() == 3);
  seq.frames.resize(9);
  CHECK(window(seq, 10, 1).empty());
  CHECK_THROWS_AS(window(seq, 0, 1), ConfigError);

  Rng rng(2);
  seq = random_sequence(rng, 12);
  const auto w = window(seq, 10, 1);
  CHECK(w[2].frames[0] == seq.frames[2]);
  CHECK(w[2].frames[9] == seq.frames[11]);
}

TEST_CASE("synth_conversation is deterministic per seed") {
  const ConversationSample a = synth_conversation(42, 120);
  const ConversationSample b = synth_conversation(42, 120);
  const ConversationSample c = synth_conversation(43, 120);
  CHECK(format_csv(a.speaker) == format_csv(b.speaker));
  CHECK(format_csv(a.listener) == format_csv(b.listener));
  CHECK(a.transcript == b.transcript);
  CHECK(format_csv(a.speaker) != format_csv(c.speaker));
  CHECK(a.speaker.size() == 120);
  CHECK(a.listener.size() == 120);
  CHECK(a.transcript.size() >= 6);
  CHECK_THROWS_AS(synth_conversation(1, 1), ConfigError);
}

TEST_CASE("synthetic tracks are smooth and in range") {
  double worst_step = 0.0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const ConversationSample s = synth_conversation(seed, 150);
    for (const AuPoseSequence* seq : {&s.speaker, &s.listener}) {
      for (std::size_t f = 0; f < seq->size(); ++f) {
        const AuPose& p = seq->frames[f];
        for (std::size_t i = 0; i < kNumAu; ++i) {
          CHECK(p.au(i) >= 0.0);
          CHECK(p.au(i) <= kAuMax);
        }
        for (std::size_t i = 0; i < kNumPose; ++i) CHECK(std::fabs(p.pose(i)) <= kPoseLimit);
        if (f == 0) continue;
        for (std::size_t d = 0; d < kFrameDim; ++d)
          worst_step = std::max(worst_step, std::fabs(p.values[d] - seq->frames[f - 1].values[d]));
      }
    }
  }
  CHECK(worst_step <= 0.3);
}

TEST_CASE("listener AU12 follows the speaker at the configured lag") {
  const std::size_t au12 = au_index("AU12");
  for (int lag : {5, 7, 10}) {
    SynthOptions opts;
    opts.lag = lag;
    // Accumulated mean-removed cross-covariance over lags 0..20.
    std::vector<double> xcov(21, 0.0);
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      const ConversationSample s = synth_conversation(1000 + seed, 200, 25.0, opts);
      const std::size_t n = s.speaker.size();
      double ms = 0.0, ml = 0.0;
      for (std::size_t f = 0; f < n; ++f) {
        ms += s.speaker.frames[f].au(au12);
        ml += s.listener.frames[f].au(au12);
      }
      ms /= static_cast<double>(n);
      ml /= static_cast<double>(n);
      for (std::size_t k = 0; k < xcov.size(); ++k) {
        double acc = 0.0;
        for (std::size_t f = 0; f + k < n; ++f)
          acc += (s.speaker.frames[f].au(au12) - ms) * (s.listener.frames[f + k].au(au12) - ml);
        xcov[k] += acc / static_cast<double>(n - k);
      }
    }
    const auto peak = std::max_element(xcov.begin(), xcov.end()) - xcov.begin();
    CHECK(peak == lag);
  }
}

TEST_CASE("text modulates speaker motion") {
  // Same seed stream but different transcripts should not give the same
  // speaker track; word gains depend only on the word.
  const auto& vocab = synth_vocabulary();
  CHECK(vocab.size() >= 30);
  const ConversationSample s = synth_conversation(5, 100);
  for (const auto& tok : s.transcript)
    CHECK(std::find(vocab.begin(), vocab.end(), tok) != vocab.end());
}

TEST_CASE("dataset layout roundtrip") {
  const fs::path dir = scratch_dir("dataset");
  const auto splits = assign_splits(10, 9);
  for (std::size_t i = 0; i < 10; ++i) {
    ConversationSample s = synth_conversation(i, 40);
    s.split = splits[i];
    write_sample(dir / ("sample_" + std::to_string(100 + i)), s);
  }
  fs::create_directories(dir / "not_a_sample");
  const auto data = read_dataset(dir);
  REQUIRE(data.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    const ConversationSample s = synth_conversation(i, 40);
    CHECK(data[i].transcript == s.transcript);
    CHECK(data[i].split == splits[i]);
    CHECK(data[i].speaker.size() == 40);
    CHECK(std::fabs(data[i].listener.frames[7].values[8] - s.listener.frames[7].values[8]) <= 1e-9);
  }
  CHECK_THROWS_AS(read_dataset(dir / "missing"), DataError);
}

TEST_CASE("split assignment") {
  const auto splits = assign_splits(10, 1);
  int counts[3] = {0, 0, 0};
  for (Split s : splits) ++counts[static_cast<int>(s)];
  CHECK(counts[0] == 8);
  CHECK(counts[1] == 1);
  CHECK(counts[2] == 1);
  CHECK(assign_splits(10, 1) == splits);
  const auto big = assign_splits(200, 1);
  CHECK(std::count(big.begin(), big.end(), Split::kVal) == 20);
  CHECK(std::count(big.begin(), big.end(), Split::kTest) == 20);
}

TEST_CASE("transcript tokenization") {
  CHECK(tokenize("Hello  big\tWorld\n") == std::vector<std::string>{"hello", "big", "world"});
  CHECK(tokenize("   ").empty());
}

TEST_CASE("key value parsing") {
  const KeyValues kv = parse_key_values("# c\n\na = 1\nb=x=y\na=2\n", "cfg");
  CHECK(*find_value(kv, "a") == "2");
  CHECK(*find_value(kv, "b") == "x=y");
  CHECK(find_value(kv, "c") == nullptr);
  CHECK_THROWS_WITH_AS(parse_key_values("ok=1\nbroken\n", "cfg"), doctest::Contains("cfg:2"),
                       ConfigError);
  double v = 0.0;
  CHECK(parse_double("1e-3", v));
  CHECK(v == 1e-3);
  CHECK_FALSE(parse_double("nan", v));
  CHECK_FALSE(parse_double("1.5x", v));
  std::size_t n = 0;
  CHECK(parse_size("12", n));
  CHECK_FALSE(parse_size("-1", n));
}
