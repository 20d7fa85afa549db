#include "facetalk/features.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "facetalk/error.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/rng.hpp"

namespace facetalk {

namespace fs = std::filesystem;

std::size_t au_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumAu; ++i) {
    if (kAuNames[i] == name) return i;
  }
  throw ConfigError("unknown action unit '" + std::string(name) + "'");
}

std::string column_name(std::size_t dim) {
  if (dim < kNumAu) return std::string(kAuNames[dim]) + "_r";
  return std::string(kPoseNames.at(dim - kNumAu));
}

Array AuPoseSequence::to_array() const {
  Array out(Shape{frames.size(), kFrameDim});
  for (std::size_t f = 0; f < frames.size(); ++f)
    std::copy(frames[f].values.begin(), frames[f].values.end(),
              out.data() + f * kFrameDim);
  return out;
}

AuPoseSequence AuPoseSequence::from_array(const Array& a, double fps) {
  if (a.rank() != 2 || a.cols() != kFrameDim) {
    throw ShapeError("AU+POSE sequence array must be [n x 20], got " +
                     shape_string(a.shape()));
  }
  AuPoseSequence seq;
  seq.fps = fps;
  seq.frames.resize(a.rows());
  for (std::size_t f = 0; f < a.rows(); ++f)
    std::copy_n(a.data() + f * kFrameDim, kFrameDim, seq.frames[f].values.begin());
  return seq;
}

AuPose clamp_native(const AuPose& p) {
  AuPose out = p;
  for (std::size_t i = 0; i < kNumAu; ++i) out.au(i) = std::clamp(p.au(i), 0.0, kAuMax);
  for (std::size_t i = 0; i < kNumPose; ++i)
    out.pose(i) = std::clamp(p.pose(i), -kPoseLimit, kPoseLimit);
  return out;
}

Array NormStats::to_array() const {
  Array out(Shape{2, kFrameDim});
  for (std::size_t d = 0; d < kFrameDim; ++d) {
    out.at(0, d) = min[d];
    out.at(1, d) = max[d];
  }
  return out;
}

NormStats NormStats::from_array(const Array& a) {
  if (a.shape() != Shape{2, kFrameDim}) {
    throw DataError("normalization stats block must be [2x20], got " +
                    shape_string(a.shape()));
  }
  NormStats s;
  for (std::size_t d = 0; d < kFrameDim; ++d) {
    s.min[d] = a.at(0, d);
    s.max[d] = a.at(1, d);
    if (s.min[d] > s.max[d]) {
      throw DataError("normalization stats: min > max on " + column_name(d));
    }
  }
  return s;
}

NormStats compute_norm_stats(const std::vector<const AuPoseSequence*>& seqs) {
  NormStats s;
  s.min.fill(INFINITY);
  s.max.fill(-INFINITY);
  std::size_t count = 0;
  for (const AuPoseSequence* seq : seqs) {
    for (const AuPose& f : seq->frames) {
      for (std::size_t d = 0; d < kFrameDim; ++d) {
        s.min[d] = std::min(s.min[d], f.values[d]);
        s.max[d] = std::max(s.max[d], f.values[d]);
      }
      ++count;
    }
  }
  if (count == 0) throw DataError("cannot compute normalization stats of no frames");
  return s;
}

namespace {

constexpr double kDegenerateRange = 1e-9;

}  // namespace

AuPose normalize(const AuPose& x, const NormStats& stats) {
  AuPose out;
  for (std::size_t d = 0; d < kFrameDim; ++d) {
    const double range = stats.max[d] - stats.min[d];
    out.values[d] = range < kDegenerateRange ? 0.5 : (x.values[d] - stats.min[d]) / range;
  }
  return out;
}

AuPose denormalize(const AuPose& x, const NormStats& stats) {
  AuPose out;
  for (std::size_t d = 0; d < kFrameDim; ++d) {
    const double range = stats.max[d] - stats.min[d];
    out.values[d] = range < kDegenerateRange ? stats.min[d]
                                             : stats.min[d] + x.values[d] * range;
  }
  return out;
}

AuPoseSequence normalize(const AuPoseSequence& seq, const NormStats& stats) {
  AuPoseSequence out;
  out.fps = seq.fps;
  for (const AuPose& f : seq.frames) out.frames.push_back(normalize(f, stats));
  return out;
}

AuPoseSequence denormalize(const AuPoseSequence& seq, const NormStats& stats) {
  AuPoseSequence out;
  out.fps = seq.fps;
  for (const AuPose& f : seq.frames) out.frames.push_back(denormalize(f, stats));
  return out;
}

namespace {

void append_number(std::string& out, double v, int precision) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, precision);
  out.append(buf, res.ptr);
}

void append_exact(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::array<double, kFrameDim> parse_number_list(std::string_view text,
                                                 std::string_view what) {
  const auto cells = split_commas(trim(text));
  if (cells.size() != kFrameDim) {
    throw DataError(std::string(what) + ": expected 20 values, got " +
                    std::to_string(cells.size()));
  }
  std::array<double, kFrameDim> out{};
  for (std::size_t i = 0; i < kFrameDim; ++i) {
    if (!parse_double(cells[i], out[i])) {
      throw DataError(std::string(what) + ": bad number '" + std::string(cells[i]) + "'");
    }
  }
  return out;
}

}  // namespace

void write_norm_stats(const fs::path& path, const NormStats& stats) {
  std::string out;
  for (int row = 0; row < 2; ++row) {
    out += row == 0 ? "min=" : "max=";
    const auto& v = row == 0 ? stats.min : stats.max;
    for (std::size_t d = 0; d < kFrameDim; ++d) {
      if (d) out += ',';
      append_exact(out, v[d]);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

NormStats read_norm_stats(const fs::path& path) {
  const KeyValues kv = read_key_values(path);
  const std::string* mn = find_value(kv, "min");
  const std::string* mx = find_value(kv, "max");
  if (!mn || !mx) throw DataError(path.string() + ": missing min= or max= line");
  NormStats s;
  s.min = parse_number_list(*mn, path.string() + " min");
  s.max = parse_number_list(*mx, path.string() + " max");
  return NormStats::from_array(s.to_array());
}

std::string format_csv(const AuPoseSequence& seq) {
  std::string out = "frame";
  for (std::size_t d = 0; d < kFrameDim; ++d) out += "," + column_name(d);
  out += '\n';
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    out += std::to_string(f);
    for (double v : seq.frames[f].values) {
      out += ',';
      append_number(out, v, 12);
    }
    out += '\n';
  }
  return out;
}

void write_csv(const fs::path& path, const AuPoseSequence& seq) {
  write_text_file(path, format_csv(seq));
}

AuPoseSequence parse_csv(std::string_view text, double fps) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw DataError("CSV is empty");

  const auto header = split_commas(lines[0]);
  std::vector<std::string> expected{"frame"};
  for (std::size_t d = 0; d < kFrameDim; ++d) expected.push_back(column_name(d));
  for (std::size_t c = 0; c < expected.size(); ++c) {
    if (c >= header.size() || trim(header[c]) != expected[c]) {
      throw DataError("CSV header: missing column " + expected[c] + " at position " +
                      std::to_string(c + 1));
    }
  }
  if (header.size() != expected.size()) {
    throw DataError("CSV header: unexpected extra column '" +
                    std::string(header[expected.size()]) + "'");
  }
  if (lines.size() < 2) throw DataError("CSV has a header but no frames");

  AuPoseSequence seq;
  seq.fps = fps;
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = split_commas(lines[r]);
    const std::string where = "row " + std::to_string(r);
    if (cells.size() != expected.size()) {
      throw DataError(where + ": expected " + std::to_string(expected.size()) +
                      " columns, got " + std::to_string(cells.size()));
    }
    std::size_t frame = 0;
    if (!parse_size(cells[0], frame)) {
      throw DataError(where + ", column frame: non-numeric value '" +
                      std::string(cells[0]) + "'");
    }
    if (frame != r - 1) {
      throw DataError(where + ", column frame: expected index " +
                      std::to_string(r - 1) + ", got " + std::to_string(frame));
    }
    AuPose p;
    for (std::size_t d = 0; d < kFrameDim; ++d) {
      if (!parse_double(cells[d + 1], p.values[d])) {
        throw DataError(where + ", column " + expected[d + 1] +
                        ": non-numeric value '" + std::string(cells[d + 1]) + "'");
      }
    }
    seq.frames.push_back(p);
  }
  return seq;
}

namespace {

double meta_fps(const fs::path& dir) {
  const fs::path meta = dir / "meta.txt";
  if (!fs::exists(meta)) return 25.0;
  const KeyValues kv = read_key_values(meta);
  const std::string* v = find_value(kv, "fps");
  if (!v) return 25.0;
  double fps = 0.0;
  if (!parse_double(*v, fps) || fps <= 0.0) {
    throw DataError(meta.string() + ": fps must be a positive number, got '" + *v + "'");
  }
  return fps;
}

}  // namespace

AuPoseSequence ingest_csv(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return parse_csv(text, meta_fps(path.parent_path()));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<AuPoseSequence> window(const AuPoseSequence& seq, std::size_t length,
                                   std::size_t stride) {
  if (length == 0 || stride == 0) throw ConfigError("window length and stride must be >= 1");
  std::vector<AuPoseSequence> out;
  for (std::size_t start = 0; start + length <= seq.frames.size(); start += stride) {
    AuPoseSequence w;
    w.fps = seq.fps;
    w.frames.assign(seq.frames.begin() + static_cast<std::ptrdiff_t>(start),
                    seq.frames.begin() + static_cast<std::ptrdiff_t>(start + length));
    out.push_back(std::move(w));
  }
  return out;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split '" + std::string(name) + "'");
}

const std::vector<std::string>& synth_vocabulary() {
  static const std::vector<std::string> words = {
      "yes",   "no",     "well",   "really", "great",  "game",   "team",
      "think", "season", "play",   "win",    "lose",   "coach",  "ball",
      "sure",  "look",   "right",  "never",  "always", "maybe",  "best",
      "worst", "fans",   "score",  "trade",  "final",  "start",  "night",
      "happy", "angry",  "funny",  "crazy",  "listen", "honest", "point",
      "tough", "big",    "small",  "fast",   "slow"};
  return words;
}

namespace {

std::vector<double> gaussian_events(Rng& rng, std::size_t n, double rate_per_frame,
                                    double amp_lo, double amp_hi, double sigma_lo,
                                    double sigma_hi) {
  std::vector<double> out(n, 0.0);
  const int count = std::max(1, static_cast<int>(std::lround(rate_per_frame * n)) +
                                    rng.integer(-1, 1));
  for (int e = 0; e < count; ++e) {
    const double center = rng.uniform(0.0, static_cast<double>(n));
    const double amp = rng.uniform(amp_lo, amp_hi);
    const double sigma = rng.uniform(sigma_lo, sigma_hi);
    for (std::size_t f = 0; f < n; ++f) {
      const double z = (static_cast<double>(f) - center) / sigma;
      out[f] += amp * std::exp(-0.5 * z * z);
    }
  }
  return out;
}

std::vector<double> sinusoid_mix(Rng& rng, std::size_t n, double fps, int min_terms,
                                 int max_terms, double amp_lo, double amp_hi,
                                 double freq_hi) {
  std::vector<double> out(n, 0.0);
  const int terms = rng.integer(min_terms, max_terms);
  for (int k = 0; k < terms; ++k) {
    const double amp = rng.uniform(amp_lo, amp_hi);
    const double freq = rng.uniform(0.08, freq_hi);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t f = 0; f < n; ++f)
      out[f] += amp * std::sin(2.0 * M_PI * freq * static_cast<double>(f) / fps + phase);
  }
  return out;
}

// Per-word AU gains; a word raises a few channels while it is spoken.
std::array<double, kNumAu> word_gains(const std::string& word) {
  Rng rng(fnv1a64(word));
  std::array<double, kNumAu> g{};
  for (double& v : g) v = rng.uniform() < 0.3 ? rng.uniform(0.4, 1.6) : 0.0;
  return g;
}

// Smooth interpolation of per-token gains over the frame span: Hann bumps of
// half-width one token segment form a partition of unity.
std::vector<double> token_envelope(const std::vector<std::array<double, kNumAu>>& gains,
                                   std::size_t channel, std::size_t n) {
  std::vector<double> out(n, 0.0);
  const double seg = static_cast<double>(n) / static_cast<double>(gains.size());
  for (std::size_t k = 0; k < gains.size(); ++k) {
    const double g = gains[k][channel];
    if (g == 0.0) continue;
    const double center = (static_cast<double>(k) + 0.5) * seg;
    for (std::size_t f = 0; f < n; ++f) {
      const double d = std::fabs(static_cast<double>(f) - center);
      if (d < seg) out[f] += g * 0.5 * (1.0 + std::cos(M_PI * d / seg));
    }
  }
  return out;
}

void slew_limit_and_clamp(std::vector<double>& x, double max_step, double lo, double hi) {
  for (std::size_t f = 1; f < x.size(); ++f) {
    x[f] = x[f - 1] + std::clamp(x[f] - x[f - 1], -max_step, max_step);
  }
  for (double& v : x) v = std::clamp(v, lo, hi);
}

}  // namespace

ConversationSample synth_conversation(std::uint64_t seed, std::size_t n_frames,
                                      double fps, const SynthOptions& options) {
  if (n_frames < 2) {
    throw ConfigError("synth_conversation needs at least 2 frames, got " +
                      std::to_string(n_frames));
  }
  if (!(fps > 0.0)) throw ConfigError("fps must be positive");
  if (options.lag < 5 || options.lag > 10) {
    throw ConfigError("listener lag must be within 5..10 frames");
  }
  if (options.attenuation < 0.4 || options.attenuation > 0.7) {
    throw ConfigError("listener attenuation must be within 0.4..0.7");
  }
  if (!(options.noise >= 0.0)) throw ConfigError("listener noise must be >= 0");
  const std::size_t n = n_frames;
  Rng rng(mix_seed(seed, 0x5eed));

  ConversationSample sample;
  const auto& vocab = synth_vocabulary();
  const int length = rng.integer(6, 14);
  std::vector<std::array<double, kNumAu>> gains;
  for (int k = 0; k < length; ++k) {
    sample.transcript.push_back(vocab[rng.index(vocab.size())]);
    gains.push_back(word_gains(sample.transcript.back()));
  }

  const std::size_t au01 = au_index("AU01"), au02 = au_index("AU02");
  const std::size_t au06 = au_index("AU06"), au12 = au_index("AU12");
  const std::size_t au45 = au_index("AU45");

  // Event components shared by speaker and (lagged) listener.
  const std::vector<double> smiles = gaussian_events(rng, n, 1.0 / 45.0, 0.8, 1.8, 2.5, 4.0);
  const std::vector<double> brows = gaussian_events(rng, n, 1.0 / 70.0, 0.5, 1.2, 2.5, 4.0);
  const std::vector<double> blinks = gaussian_events(rng, n, 1.0 / 60.0, 1.5, 3.0, 1.5, 2.0);
  const std::vector<double> nods = gaussian_events(rng, n, 1.0 / 60.0, 0.08, 0.2, 3.0, 5.0);

  auto event_component = [&](std::size_t dim, std::size_t f) -> double {
    if (dim == au12) return smiles[f];
    if (dim == au06) return 0.6 * smiles[f];
    if (dim == au01 || dim == au02) return brows[f];
    if (dim == au45) return blinks[f];
    if (dim == kNumAu) return nods[f];
    return 0.0;
  };

  std::array<std::vector<double>, kFrameDim> speaker, listener;
  for (std::size_t d = 0; d < kFrameDim; ++d) {
    const bool is_pose = d >= kNumAu;
    std::vector<double> s(n), l(n);
    const double s_base = is_pose ? rng.uniform(-0.1, 0.1) : rng.uniform(0.4, 1.6);
    const auto s_wave = is_pose ? sinusoid_mix(rng, n, fps, 2, 3, 0.02, 0.12, 0.4)
                                : sinusoid_mix(rng, n, fps, 2, 4, 0.05, 0.3, 0.6);
    const auto s_text = is_pose ? std::vector<double>(n, 0.0) : token_envelope(gains, d, n);
    const double l_base = is_pose ? rng.uniform(-0.08, 0.08) : rng.uniform(0.2, 1.0);
    const auto l_wave = is_pose ? sinusoid_mix(rng, n, fps, 1, 2, 0.01, 0.06, 0.3)
                                : sinusoid_mix(rng, n, fps, 1, 2, 0.03, 0.15, 0.4);
    const double noise_scale = is_pose ? options.noise / 5.0 : options.noise;
    double noise = 0.0;
    for (std::size_t f = 0; f < n; ++f) {
      s[f] = s_base + s_wave[f] + s_text[f] + event_component(d, f);
      noise = 0.8 * noise + noise_scale * rng.normal();
      const double response =
          f >= static_cast<std::size_t>(options.lag)
              ? options.attenuation * event_component(d, f - options.lag)
              : 0.0;
      l[f] = l_base + l_wave[f] + response + noise;
    }
    const double lo = is_pose ? -kPoseLimit : 0.0;
    const double hi = is_pose ? kPoseLimit : kAuMax;
    const double step = is_pose ? std::min(options.max_step, 0.05) : options.max_step;
    slew_limit_and_clamp(s, step, lo, hi);
    slew_limit_and_clamp(l, step, lo, hi);
    speaker[d] = std::move(s);
    listener[d] = std::move(l);
  }

  sample.speaker.fps = sample.listener.fps = fps;
  sample.speaker.frames.resize(n);
  sample.listener.frames.resize(n);
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t d = 0; d < kFrameDim; ++d) {
      sample.speaker.frames[f].values[d] = speaker[d][f];
      sample.listener.frames[f].values[d] = listener[d][f];
    }
  }
  return sample;
}

std::vector<std::string> tokenize(std::string_view line) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) {
      std::string tok(line.substr(i, j - i));
      for (char& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      tokens.push_back(std::move(tok));
    }
    i = j;
  }
  return tokens;
}

std::vector<std::vector<std::string>> read_transcript_lines(const fs::path& path) {
  const std::string text = read_text_file(path);
  std::vector<std::vector<std::string>> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    lines.push_back(tokenize(line));
  }
  return lines;
}

namespace {

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace

void write_sample(const fs::path& dir, const ConversationSample& sample) {
  if (sample.speaker.size() != sample.listener.size()) {
    throw DataError("speaker and listener tracks differ in length");
  }
  fs::create_directories(dir);
  write_csv(dir / "speaker.csv", sample.speaker);
  write_csv(dir / "listener.csv", sample.listener);
  write_text_file(dir / "transcript.txt", join_tokens(sample.transcript) + "\n");
  std::string meta = "fps=";
  append_exact(meta, sample.speaker.fps);
  meta += "\nsplit=" + std::string(split_name(sample.split)) + "\n";
  write_text_file(dir / "meta.txt", meta);
}

ConversationSample read_sample(const fs::path& dir) {
  ConversationSample sample;
  const KeyValues meta = read_key_values(dir / "meta.txt");
  if (const std::string* split = find_value(meta, "split")) {
    sample.split = parse_split(*split);
  }
  sample.speaker = ingest_csv(dir / "speaker.csv");
  sample.listener = ingest_csv(dir / "listener.csv");
  if (sample.speaker.size() != sample.listener.size()) {
    throw DataError(dir.string() + ": speaker and listener tracks differ in length");
  }
  const auto lines = read_transcript_lines(dir / "transcript.txt");
  for (const auto& line : lines)
    sample.transcript.insert(sample.transcript.end(), line.begin(), line.end());
  return sample;
}

std::vector<ConversationSample> read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "meta.txt")) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<ConversationSample> out;
  for (const auto& d : dirs) out.push_back(read_sample(d));
  if (out.empty()) throw DataError("dataset has no samples: " + dir.string());
  return out;
}

std::vector<Split> assign_splits(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x5b1));
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const std::size_t n_val = (count + 5) / 10;
  const std::size_t n_test = (count + 5) / 10;
  std::vector<Split> splits(count, Split::kTrain);
  if (count < 3) return splits;
  for (std::size_t i = 0; i < n_val; ++i) splits[order[i]] = Split::kVal;
  for (std::size_t i = 0; i < n_test; ++i) splits[order[n_val + i]] = Split::kTest;
  return splits;
}

}  // namespace facetalk
