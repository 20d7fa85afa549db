#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "facetalk/error.hpp"
#include "facetalk/features.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/synthesizer.hpp"
#include "facetalk/training.hpp"

namespace fs = std::filesystem;
using namespace facetalk;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// Synth training chops every track into clips of this many frames.
constexpr std::size_t kSynthClip = 8;

// One record appended to `<dir>/manifest.txt` per run.
class Manifest {
 public:
  explicit Manifest(std::string command) : command_(std::move(command)), start_(Clock::now()) {}

  void set(const std::string& key, const std::string& value) { fields_.emplace_back(key, value); }

  void append_to(const fs::path& dir) const {
    fs::create_directories(dir);
    const double seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    std::ofstream out(dir / "manifest.txt", std::ios::app | std::ios::binary);
    if (!out) throw DataError("cannot append to " + (dir / "manifest.txt").string());
    out << "command=" << command_ << "\n";
    out << "version=" << FACETALK_VERSION << "\n";
    for (const auto& [k, v] : fields_) out << k << "=" << v << "\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", seconds);
    out << "duration_s=" << buf << "\n---\n";
  }

 private:
  using Clock = std::chrono::steady_clock;
  std::string command_;
  Clock::time_point start_;
  std::vector<std::pair<std::string, std::string>> fields_;
};

fs::path parent_or_cwd(const fs::path& p) {
  return p.has_parent_path() ? p.parent_path() : fs::path(".");
}

std::string metric_line(const std::string& name, double value) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s = %.6f\n", name.c_str(), value);
  return buf;
}

// ---- gen-data ----

struct GenDataArgs {
  fs::path out;
  std::size_t samples = 0;
  std::size_t frames = 250;
  std::uint64_t seed = 0;
};

void run_gen_data(const GenDataArgs& a) {
  if (a.samples < 1) throw ConfigError("--samples must be at least 1");
  if (a.frames < 2) throw ConfigError("--frames must be at least 2");
  Manifest manifest("gen-data");
  fs::create_directories(a.out);
  const auto splits = assign_splits(a.samples, a.seed);
  std::vector<ConversationSample> samples;
  for (std::size_t i = 0; i < a.samples; ++i) {
    samples.push_back(synth_conversation(mix_seed(a.seed, i), a.frames));
    samples.back().split = splits[i];
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu", i);
    write_sample(a.out / name, samples.back());
  }
  write_norm_stats(a.out / "stats.txt", train_stats(samples));
  // Self-check: everything written must read back.
  const auto back = read_dataset(a.out);
  if (back.size() != samples.size()) throw DataError("dataset self-check failed");
  manifest.set("out", a.out.string());
  manifest.set("samples", std::to_string(a.samples));
  manifest.set("frames", std::to_string(a.frames));
  manifest.set("seed", std::to_string(a.seed));
  manifest.append_to(a.out);
  std::cout << "wrote " << a.samples << " samples to " << a.out.string() << "\n";
}

// ---- train ----

struct Dataset {
  std::vector<ConversationSample> samples;
  NormStats stats;
};

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.samples = read_dataset(dir);
  if (d.samples.empty()) throw DataError("no samples in " + dir.string());
  d.stats = fs::exists(dir / "stats.txt") ? read_norm_stats(dir / "stats.txt")
                                          : train_stats(d.samples);
  return d;
}

LossConfig loss_of(const RunConfig& rc) {
  LossConfig loss;
  if (rc.gamma) loss.gamma = *rc.gamma;
  if (rc.alpha) loss.alpha = *rc.alpha;
  if (rc.n_b) loss.n_b = *rc.n_b;
  if (rc.exponent) loss.exponent = *rc.exponent;
  if (rc.continuity_mean_frames) loss.continuity_mean_frames = *rc.continuity_mean_frames;
  loss.validate();
  return loss;
}

TrainConfig train_config_of(const RunConfig& rc) {
  TrainConfig cfg;
  if (rc.lr) cfg.lr = *rc.lr;
  if (rc.batch) cfg.batch = *rc.batch;
  if (rc.iters) cfg.iters = *rc.iters;
  if (rc.seed) cfg.seed = *rc.seed;
  cfg.loss = loss_of(rc);
  cfg.validate();
  return cfg;
}

std::vector<AuPoseSequence> synth_clips(const std::vector<const ConversationSample*>& samples) {
  std::vector<AuPoseSequence> clips;
  for (const auto* s : samples)
    for (const auto* track : {&s->speaker, &s->listener})
      for (auto& w : window(*track, kSynthClip, kSynthClip)) clips.push_back(std::move(w));
  return clips;
}

void run_train(const std::string& phase_flag, const fs::path& config_path) {
  const RunConfig rc = read_run_config(config_path);
  std::string phase = phase_flag;
  if (rc.phase && phase.empty()) phase = *rc.phase;
  if (rc.phase && *rc.phase != phase) {
    throw ConfigError("--phase " + phase + " conflicts with config phase=" + *rc.phase);
  }
  if (phase != "listening" && phase != "speaking" && phase != "synth") {
    throw ConfigError("phase must be listening, speaking or synth");
  }
  if (!rc.dataset_dir) throw ConfigError("config is missing dataset_dir");
  const fs::path ckpt = rc.checkpoint ? *rc.checkpoint : fs::path(phase + ".ckpt");
  const fs::path history_path = fs::path(ckpt.string() + ".history.csv");

  Manifest manifest("train");
  manifest.set("phase", phase);
  manifest.set("config", config_path.string());
  for (const auto& [k, v] : read_key_values(config_path)) manifest.set("config." + k, v);
  manifest.set("seed", std::to_string(rc.seed.value_or(0)));

  const Dataset data = load_dataset(*rc.dataset_dir);
  const auto train = select_split(data.samples, Split::kTrain);
  if (train.empty()) throw DataError("dataset has no train samples");
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());

  if (phase == "listening") {
    ListeningConfig mcfg;
    if (rc.layers) mcfg.layers = *rc.layers;
    if (rc.hidden) mcfg.hidden = *rc.hidden;
    if (rc.n) mcfg.n = *rc.n;
    mcfg.validate();
    const TrainConfig cfg = train_config_of(rc);
    ListeningModel model(mcfg, cfg.seed);
    const auto pairs = listening_pairs(train, data.stats, mcfg.n, 1);
    const TrainHistory h = train_listening(model, pairs, cfg);
    save_listening(ckpt, model, data.stats);
    write_history(history_path, h.rows);
  } else if (phase == "speaking") {
    SpeakingConfig mcfg;
    if (rc.layers) mcfg.layers = *rc.layers;
    if (rc.hidden) mcfg.hidden = *rc.hidden;
    if (rc.n) mcfg.dec_len = *rc.n;
    mcfg.validate();
    const TrainConfig cfg = train_config_of(rc);
    const auto pairs = speaking_pairs(train, data.stats, mcfg.dec_len);
    std::vector<std::vector<std::string>> sentences;
    for (const auto& p : pairs) sentences.push_back(p.tokens);
    SpeakingModel model(mcfg, Vocabulary::build(sentences), cfg.seed);
    const auto schedule = default_schedule(model, cfg.iters);
    const SpeakingHistory h = train_speaking(model, pairs, cfg, schedule);
    save_speaking(ckpt, model, data.stats);
    write_history(history_path, h.history.rows);
    for (const auto& st : h.stages) {
      manifest.set("stage." + st.name,
                   "iters " + std::to_string(st.first_iter) + "-" + std::to_string(st.last_iter) +
                       ", samples " + std::to_string(st.samples));
    }
  } else {
    SynthConfig cfg;
    if (rc.lr) cfg.lr = *rc.lr;
    if (rc.batch) cfg.batch = *rc.batch;
    if (rc.iters) cfg.steps = *rc.iters;
    if (rc.d_lr) cfg.discriminator_lr = *rc.d_lr;
    if (rc.adv_weight) cfg.adversarial_weight = *rc.adv_weight;
    if (rc.seed) cfg.seed = *rc.seed;
    const std::size_t layers = rc.layers.value_or(1);
    const std::size_t hidden = rc.hidden.value_or(256);
    cfg.generator_widths.assign(layers, hidden);
    cfg.discriminator_widths.assign(layers, std::max<std::size_t>(1, hidden / 2));
    SynthModel model(cfg);
    const SynthTraining t = train_synth(model, synth_clips(train), data.stats);
    save_synth(ckpt, model, data.stats);
    write_text_file(history_path, format_synth_history(t.history));
    write_text_file(parent_or_cwd(ckpt) / "renderer_spec.txt", renderer_spec_text(cfg.resolution));
  }
  manifest.set("dataset_dir", rc.dataset_dir->string());
  manifest.set("checkpoint", ckpt.string());
  manifest.set("history", history_path.string());
  manifest.append_to(parent_or_cwd(ckpt));
  std::cout << "wrote " << ckpt.string() << " and " << history_path.string() << "\n";
}

// ---- eval ----

struct EvalArgs {
  std::string phase;
  fs::path checkpoint;
  fs::path dataset;
  std::string split = "test";
  fs::path out;
};

void run_eval(const EvalArgs& a) {
  Manifest manifest("eval");
  const Split split = parse_split(a.split);
  const Dataset data = load_dataset(a.dataset);
  const auto chosen = select_split(data.samples, split);
  if (chosen.empty()) throw DataError("dataset has no " + a.split + " samples");
  std::string report;
  if (a.phase == "listening") {
    LoadedListening l = load_listening(a.checkpoint);
    const std::size_t n = l.model->config().n;
    const EvalReport r =
        evaluate_listening(*l.model, listening_pairs(chosen, l.stats, n, n), LossConfig{});
    report = metric_line("d_mse", r.d_mse) + metric_line("d_cos", r.d_cos) +
             metric_line("continuity", r.continuity) + metric_line("samples", r.samples);
  } else if (a.phase == "speaking") {
    LoadedSpeaking s = load_speaking(a.checkpoint);
    const EvalReport r = evaluate_speaking(
        *s.model, speaking_pairs(chosen, s.stats, s.model->config().dec_len), LossConfig{});
    report = metric_line("d_mse", r.d_mse) + metric_line("d_cos", r.d_cos) +
             metric_line("continuity", r.continuity) + metric_line("samples", r.samples);
  } else if (a.phase == "synth") {
    LoadedSynth s = load_synth(a.checkpoint);
    const SynthEval r = evaluate_synth(s.model->generator, synth_clips(chosen), s.stats);
    report = metric_line("d_au", r.d_au) + metric_line("d_pose", r.d_pose) +
             metric_line("l1", r.l1) + metric_line("frames", r.frames) +
             metric_line("extract_failures", r.failures);
  } else {
    throw ConfigError("phase must be listening, speaking or synth");
  }
  const fs::path out = a.out.empty() ? parent_or_cwd(a.checkpoint) / "metrics.txt" : a.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text_file(out, report);
  std::cout << report;
  manifest.set("phase", a.phase);
  manifest.set("checkpoint", a.checkpoint.string());
  manifest.set("dataset", a.dataset.string());
  manifest.set("split", a.split);
  manifest.set("metrics", out.string());
  manifest.append_to(parent_or_cwd(out));
}

// ---- converse ----

struct ConverseArgs {
  fs::path listen_ckpt;
  fs::path speak_ckpt;
  fs::path synth_ckpt;
  fs::path input;
  std::size_t turns = 1;
  fs::path out;
};

AuPoseSequence to_native(const Array& normalized, const NormStats& stats, double fps) {
  AuPoseSequence seq = denormalize(AuPoseSequence::from_array(normalized, fps), stats);
  for (auto& f : seq.frames) f = clamp_native(f);
  return seq;
}

void run_converse(const ConverseArgs& a) {
  Manifest manifest("converse");
  LoadedListening listen = load_listening(a.listen_ckpt);
  LoadedSpeaking speak = load_speaking(a.speak_ckpt);
  LoadedSynth synth = load_synth(a.synth_ckpt);
  const AuPoseSequence incoming = ingest_csv(a.input / "speaker.csv");
  const auto lines = read_transcript_lines(a.input / "transcript.txt");
  const std::size_t n = listen.model->config().n;
  fs::create_directories(a.out);
  write_text_file(a.out / "renderer_spec.txt",
                  renderer_spec_text(synth.model->config.resolution));

  std::size_t done = 0;
  for (std::size_t k = 0; k < a.turns; ++k) {
    const bool listening = k % 2 == 0;
    const std::size_t index = k / 2;
    AuPoseSequence emitted;
    if (listening) {
      if ((index + 1) * n > incoming.size()) {
        std::cerr << "warning: speaker track exhausted after " << done << " turns\n";
        break;
      }
      AuPoseSequence win;
      win.fps = incoming.fps;
      win.frames.assign(incoming.frames.begin() + static_cast<std::ptrdiff_t>(index * n),
                        incoming.frames.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
      const Array pred = listen.model->predict(normalize(win, listen.stats).to_array());
      emitted = to_native(pred, listen.stats, incoming.fps);
    } else {
      if (index >= lines.size()) {
        std::cerr << "warning: transcript exhausted after " << done << " turns\n";
        break;
      }
      emitted = to_native(speak.model->predict(lines[index]), speak.stats, incoming.fps);
    }
    char name[32];
    std::snprintf(name, sizeof name, "turn%02zu_%s", k, listening ? "listen" : "speak");
    const fs::path dir = a.out / name;
    fs::create_directories(dir);
    write_csv(dir / (listening ? "listener.csv" : "speaker.csv"), emitted);
    write_frame_sequence(dir, generate_sequence(synth.model->generator, emitted, synth.stats),
                         emitted.fps);
    ++done;
  }
  manifest.set("listen_ckpt", a.listen_ckpt.string());
  manifest.set("speak_ckpt", a.speak_ckpt.string());
  manifest.set("synth_ckpt", a.synth_ckpt.string());
  manifest.set("input", a.input.string());
  manifest.set("turns_requested", std::to_string(a.turns));
  manifest.set("turns_done", std::to_string(done));
  manifest.set("out", a.out.string());
  manifest.append_to(a.out);
  std::cout << "wrote " << done << " turns to " << a.out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational avatar pipeline: data, training, evaluation, conversation"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic conversation dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--samples", gen.samples, "Number of samples")->required();
  gen_cmd->add_option("--frames", gen.frames, "Frames per sample");
  gen_cmd->add_option("--seed", gen.seed, "Seed");

  std::string train_phase;
  fs::path train_config;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--phase", train_phase, "listening, speaking or synth");
  train_cmd->add_option("--config", train_config, "Run config file")->required();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--phase", ev.phase, "listening, speaking or synth")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--dataset", ev.dataset, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test");
  eval_cmd->add_option("--out", ev.out, "metrics.txt path (default: next to the checkpoint)");

  ConverseArgs cv;
  auto* conv_cmd = app.add_subcommand("converse", "Alternate listening and speaking turns");
  conv_cmd->add_option("--listen-ckpt", cv.listen_ckpt, "Listening checkpoint")->required();
  conv_cmd->add_option("--speak-ckpt", cv.speak_ckpt, "Speaking checkpoint")->required();
  conv_cmd->add_option("--synth-ckpt", cv.synth_ckpt, "Synthesizer checkpoint")->required();
  conv_cmd->add_option("--input", cv.input, "Directory with speaker.csv and transcript.txt")
      ->required();
  conv_cmd->add_option("--turns", cv.turns, "Number of turns")->required();
  conv_cmd->add_option("--out", cv.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) run_gen_data(gen);
    if (*train_cmd) run_train(train_phase, train_config);
    if (*eval_cmd) run_eval(ev);
    if (*conv_cmd) run_converse(cv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
