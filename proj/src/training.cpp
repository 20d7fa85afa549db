#include "facetalk/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>

#include "facetalk/checkpoint.hpp"
#include "facetalk/error.hpp"
#include "facetalk/keyvalue.hpp"
#include "facetalk/optim.hpp"

namespace facetalk {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (iters < 1) throw ConfigError("iters must be >= 1");
  if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (clip_norm < 0.0) throw ConfigError("clip norm must be >= 0");
  loss.validate();
}

namespace {

void append_shortest(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

}  // namespace

std::string format_history(const std::vector<HistoryRow>& rows) {
  std::string out = "iter,total,mse,con\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iter);
    for (double v : {r.total, r.mse, r.con}) {
      out += ',';
      append_shortest(out, v);
    }
    out += '\n';
  }
  return out;
}

void write_history(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  write_text_file(path, format_history(rows));
}

std::vector<const ConversationSample*> select_split(const std::vector<ConversationSample>& samples,
                                                    Split split) {
  std::vector<const ConversationSample*> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(&s);
  return out;
}

NormStats train_stats(const std::vector<ConversationSample>& samples) {
  std::vector<const AuPoseSequence*> tracks;
  for (const auto* s : select_split(samples, Split::kTrain)) {
    tracks.push_back(&s->speaker);
    tracks.push_back(&s->listener);
  }
  if (tracks.empty()) throw DataError("dataset has no train-split samples");
  return compute_norm_stats(tracks);
}

std::vector<SequencePair> listening_pairs(const std::vector<const ConversationSample*>& samples,
                                          const NormStats& stats, std::size_t n,
                                          std::size_t stride) {
  std::vector<SequencePair> out;
  for (const auto* s : samples) {
    const auto speak = window(normalize(s->speaker, stats), n, stride);
    const auto listen = window(normalize(s->listener, stats), n, stride);
    for (std::size_t w = 0; w < speak.size(); ++w)
      out.push_back({speak[w].to_array(), listen[w].to_array()});
  }
  return out;
}

std::vector<TextPair> speaking_pairs(const std::vector<const ConversationSample*>& samples,
                                     const NormStats& stats, std::size_t dec_len) {
  std::vector<TextPair> out;
  for (const auto* s : samples) {
    const auto windows = window(normalize(s->speaker, stats), dec_len, dec_len);
    if (windows.empty()) continue;
    out.push_back({s->transcript, windows.front().to_array()});
  }
  return out;
}

namespace {

// [B x D] frame t of the chosen sequences.
std::vector<Var> batch_frames(Tape& tape, const std::vector<const Array*>& seqs) {
  const std::size_t len = seqs.front()->rows(), dim = seqs.front()->cols();
  std::vector<Var> frames;
  for (std::size_t t = 0; t < len; ++t) {
    Array m(Shape{seqs.size(), dim});
    for (std::size_t b = 0; b < seqs.size(); ++b)
      std::copy_n(seqs[b]->data() + t * dim, dim, m.data() + b * dim);
    frames.push_back(tape.constant(std::move(m)));
  }
  return frames;
}

void require_finite_loss(double v, std::size_t iter) {
  if (!std::isfinite(v)) {
    throw NumericError("non-finite training loss at iteration " + std::to_string(iter));
  }
}

// Shared step: forward via `build`, backward, clip, Adam.
template <typename Build>
void run_iterations(ParamStore& params, const TrainConfig& cfg, std::size_t count,
                    std::size_t first_iter, std::size_t pool, Rng& rng, Build build,
                    TrainHistory& history) {
  AdamConfig adam;
  adam.lr = cfg.lr;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t iter = first_iter + k;
    std::vector<std::size_t> picks(cfg.batch);
    for (auto& p : picks) p = rng.index(pool);
    Tape tape;
    const SequenceLoss loss = build(tape, picks);
    const double total = loss.total.value().item();
    require_finite_loss(total, iter);
    tape.backward(loss.total);
    if (cfg.clip_norm > 0.0) clip_grad_norm(params, cfg.clip_norm);
    adam_step(params, adam);
    history.losses.push_back(total);
    if (iter % cfg.eval_interval == 0) {
      history.rows.push_back({iter, total, loss.mse.value().item(), loss.continuity.value().item()});
    }
  }
}

}  // namespace

TrainHistory train_listening(ListeningModel& model, const std::vector<SequencePair>& data,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw DataError("no listening training windows");
  for (const auto& p : data) {
    if (p.input.rows() != model.config().n || p.target.rows() != model.config().n) {
      throw ShapeError("listening pair length differs from the model window n");
    }
  }
  Rng rng(mix_seed(cfg.seed, 0x7a11));
  TrainHistory history;
  auto build = [&](Tape& tape, const std::vector<std::size_t>& picks) {
    std::vector<const Array*> in, out;
    for (std::size_t p : picks) {
      in.push_back(&data[p].input);
      out.push_back(&data[p].target);
    }
    const auto x = batch_frames(tape, in);
    const auto y = batch_frames(tape, out);
    return total_loss(y, model.forward_teacher_forced(tape, x, y), cfg.loss);
  };
  run_iterations(model.params(), cfg, cfg.iters, 1, data.size(), rng, build, history);
  if (history.rows.empty() || history.rows.back().iter != cfg.iters) {
    // Final row when the budget is not a multiple of the interval.
    Tape tape;
    std::vector<std::size_t> all(std::min<std::size_t>(data.size(), 256));
    std::iota(all.begin(), all.end(), 0);
    const SequenceLoss loss = build(tape, all);
    history.rows.push_back({cfg.iters, loss.total.value().item(), loss.mse.value().item(),
                            loss.continuity.value().item()});
  }
  return history;
}

HistoryRow teacher_forced_listening(ListeningModel& model, const std::vector<SequencePair>& data,
                                    const LossConfig& loss) {
  if (data.empty()) throw DataError("no listening windows to score");
  constexpr std::size_t kChunk = 128;
  HistoryRow row;
  for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
    const std::size_t end = std::min(data.size(), begin + kChunk);
    std::vector<const Array*> in, out;
    for (std::size_t i = begin; i < end; ++i) {
      in.push_back(&data[i].input);
      out.push_back(&data[i].target);
    }
    Tape tape;
    tape.treat_as_constant(model.params());
    const auto x = batch_frames(tape, in);
    const auto y = batch_frames(tape, out);
    const SequenceLoss l = total_loss(y, model.forward_teacher_forced(tape, x, y), loss);
    // Batch losses are means over rows, so chunks combine by row count.
    const double w = static_cast<double>(end - begin) / static_cast<double>(data.size());
    row.total += w * l.total.value().item();
    row.mse += w * l.mse.value().item();
    row.con += w * l.continuity.value().item();
  }
  return row;
}

std::vector<Stage> default_schedule(const SpeakingModel& model, std::size_t total_iters) {
  const std::size_t s1 = std::max<std::size_t>(1, total_iters / 10);
  const std::size_t s2 = std::max<std::size_t>(1, total_iters * 6 / 10);
  const std::size_t s3 = std::max<std::size_t>(1, total_iters - std::min(total_iters, s1 + s2));
  return {{"pretrain", {}, s1, 0.1},
          {"decoder", model.encoder_blocks(), s2, 1.0},
          {"finetune", {}, s3, 1.0}};
}

void validate_schedule(const SpeakingModel& model, const std::vector<Stage>& schedule) {
  if (schedule.size() != 3) {
    throw ConfigError("speaking schedule needs 3 stages, got " + std::to_string(schedule.size()));
  }
  for (const auto& stage : schedule) {
    if (stage.iters < 1) throw ConfigError("stage '" + stage.name + "' has no iterations");
    if (!(stage.subset > 0.0 && stage.subset <= 1.0)) {
      throw ConfigError("stage '" + stage.name + "' subset must be in (0, 1]");
    }
    std::set<std::string> seen;
    for (const auto& name : stage.frozen) {
      if (!model.params().contains(name)) {
        throw ConfigError("stage '" + stage.name + "' freezes unknown block '" + name + "'");
      }
      if (!seen.insert(name).second) {
        throw ConfigError("stage '" + stage.name + "' lists block '" + name + "' twice");
      }
    }
    if (seen.size() == model.params().size()) {
      throw ConfigError("stage '" + stage.name + "' freezes every block");
    }
  }
  if (!schedule[0].frozen.empty() || !schedule[2].frozen.empty()) {
    throw ConfigError("pretrain and finetune stages must train every block");
  }
  const auto encoder = model.encoder_blocks();
  const std::set<std::string> frozen(schedule[1].frozen.begin(), schedule[1].frozen.end());
  for (const auto& name : encoder) {
    if (!frozen.count(name)) {
      throw ConfigError("decoder stage must freeze encoder block '" + name + "'");
    }
  }
}

SpeakingHistory train_speaking(SpeakingModel& model, const std::vector<TextPair>& data,
                               const TrainConfig& cfg, const std::vector<Stage>& schedule) {
  cfg.validate();
  validate_schedule(model, schedule);
  if (data.empty()) throw DataError("no speaking training pairs");
  for (const auto& p : data) {
    if (p.target.rows() != model.config().dec_len) {
      throw ShapeError("speaking target length differs from dec_len");
    }
  }
  std::vector<std::vector<std::size_t>> indices;
  for (const auto& p : data)
    indices.push_back(embed_indices(model.vocabulary(), p.tokens, model.config().enc_len));

  Rng rng(mix_seed(cfg.seed, 0x5ea4));
  SpeakingHistory out;
  std::size_t iter = 1;
  ParamStore& params = model.params();
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    const Stage& stage = schedule[s];
    // Seeded subset of the pool for this stage.
    std::vector<std::size_t> pool(data.size());
    std::iota(pool.begin(), pool.end(), 0);
    if (stage.subset < 1.0) {
      Rng pick(mix_seed(cfg.seed, 0x5b00 + s));
      for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[pick.index(i)]);
      const auto keep = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(stage.subset * static_cast<double>(pool.size()))));
      pool.resize(keep);
      std::sort(pool.begin(), pool.end());
    }

    StageRecord record;
    record.name = stage.name;
    record.first_iter = iter;
    record.samples = pool.size();
    for (std::size_t i = 0; i < params.size(); ++i) params.entry(i).frozen = false;
    for (const auto& name : stage.frozen) {
      params.set_frozen(name, true);
      record.frozen_before.push_back(params.checksum(name));
    }

    auto build = [&](Tape& tape, const std::vector<std::size_t>& picks) {
      std::vector<std::vector<std::size_t>> sentences;
      std::vector<const Array*> targets;
      for (std::size_t p : picks) {
        sentences.push_back(indices[pool[p]]);
        targets.push_back(&data[pool[p]].target);
      }
      const auto y = batch_frames(tape, targets);
      return total_loss(y, model.forward_teacher_forced(tape, sentences, y), cfg.loss);
    };
    run_iterations(params, cfg, stage.iters, iter, pool.size(), rng, build, out.history);
    iter += stage.iters;
    record.last_iter = iter - 1;
    for (const auto& name : stage.frozen) record.frozen_after.push_back(params.checksum(name));
    out.stages.push_back(std::move(record));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params.entry(i).frozen = false;
  const std::size_t last = iter - 1;
  if (out.history.rows.empty() || out.history.rows.back().iter != last) {
    // Final row when the budget is not a multiple of the interval.
    Tape tape;
    std::vector<const Array*> targets;
    std::vector<std::vector<std::size_t>> sentences;
    for (std::size_t i = 0; i < std::min<std::size_t>(data.size(), 256); ++i) {
      sentences.push_back(indices[i]);
      targets.push_back(&data[i].target);
    }
    const auto y = batch_frames(tape, targets);
    const SequenceLoss loss = total_loss(y, model.forward_teacher_forced(tape, sentences, y), cfg.loss);
    out.history.rows.push_back({last, loss.total.value().item(), loss.mse.value().item(),
                                loss.continuity.value().item()});
  }
  return out;
}

std::vector<Array> predict_listening(ListeningModel& model, const std::vector<SequencePair>& data) {
  std::vector<Array> out;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<const Array*> in;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) in.push_back(&data[i].input);
    Tape tape;
    tape.treat_as_constant(model.params());
    const auto pred = model.forward_free_running(tape, batch_frames(tape, in));
    for (auto& a : sequences_of(pred)) out.push_back(std::move(a));
  }
  return out;
}

std::vector<Array> predict_speaking(SpeakingModel& model, const std::vector<TextPair>& data) {
  std::vector<Array> out;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    std::vector<std::vector<std::size_t>> batch;
    for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i)
      batch.push_back(embed_indices(model.vocabulary(), data[i].tokens, model.config().enc_len));
    Tape tape;
    tape.treat_as_constant(model.params());
    for (auto& a : sequences_of(model.forward_free_running(tape, batch))) out.push_back(std::move(a));
  }
  return out;
}

EvalReport evaluate(const std::vector<Array>& gt, const std::vector<Array>& pred,
                    const LossConfig& loss) {
  const MseCosine m = eval_mse_cosine(gt, pred);
  EvalReport r;
  r.d_mse = m.d_mse;
  r.d_cos = m.d_cos;
  r.samples = gt.size();
  for (std::size_t i = 0; i < gt.size(); ++i) r.continuity += continuity_loss(gt[i], pred[i], loss);
  r.continuity /= static_cast<double>(gt.size());
  return r;
}

EvalReport evaluate_listening(ListeningModel& model, const std::vector<SequencePair>& data,
                              const LossConfig& loss) {
  if (data.empty()) throw DataError("no listening evaluation windows");
  std::vector<Array> gt;
  for (const auto& p : data) gt.push_back(p.target);
  return evaluate(gt, predict_listening(model, data), loss);
}

EvalReport evaluate_speaking(SpeakingModel& model, const std::vector<TextPair>& data,
                             const LossConfig& loss) {
  if (data.empty()) throw DataError("no speaking evaluation pairs");
  std::vector<Array> gt;
  for (const auto& p : data) gt.push_back(p.target);
  return evaluate(gt, predict_speaking(model, data), loss);
}

std::filesystem::path vocab_path(const std::filesystem::path& checkpoint) {
  std::filesystem::path p = checkpoint;
  p += ".vocab";
  return p;
}

namespace {

std::size_t config_value(const Array& cfg, std::size_t i, const std::string& what) {
  const double v = cfg[i];
  if (!(v >= 1.0) || v != std::floor(v)) throw DataError("checkpoint config: bad " + what);
  return static_cast<std::size_t>(v);
}

const NamedArray& require_block(const std::vector<NamedArray>& blocks, const std::string& name,
                                const std::filesystem::path& path) {
  const NamedArray* b = find_block(blocks, name);
  if (!b) throw DataError(path.string() + ": missing block '" + name + "'");
  return *b;
}

}  // namespace

void save_listening(const std::filesystem::path& path, const ListeningModel& model,
                    const NormStats& stats) {
  auto blocks = blocks_of(model.params());
  const auto& c = model.config();
  blocks.push_back({"listen.config", Array::vector({static_cast<double>(c.layers),
                                                    static_cast<double>(c.hidden),
                                                    static_cast<double>(c.n)})});
  blocks.push_back({"stats", stats.to_array()});
  write_checkpoint(path, blocks);
}

LoadedListening load_listening(const std::filesystem::path& path) {
  const auto blocks = read_checkpoint(path);
  const NamedArray* cfg_block = find_block(blocks, "listen.config");
  if (!cfg_block) {
    throw DataError(path.string() + ": not a listening checkpoint (no listen.config block)");
  }
  if (cfg_block->value.size() != 3) throw DataError(path.string() + ": bad listen.config block");
  ListeningConfig cfg;
  cfg.layers = config_value(cfg_block->value, 0, "layers");
  cfg.hidden = config_value(cfg_block->value, 1, "hidden");
  cfg.n = config_value(cfg_block->value, 2, "n");
  LoadedListening out;
  out.model = std::make_unique<ListeningModel>(cfg, 0);
  load_blocks(out.model->params(), blocks);
  out.stats = NormStats::from_array(require_block(blocks, "stats", path).value);
  return out;
}

void save_speaking(const std::filesystem::path& path, const SpeakingModel& model,
                   const NormStats& stats) {
  auto blocks = blocks_of(model.params());
  const auto& c = model.config();
  blocks.push_back({"speak.config",
                    Array::vector({static_cast<double>(c.layers), static_cast<double>(c.hidden),
                                   static_cast<double>(c.embed), static_cast<double>(c.enc_len),
                                   static_cast<double>(c.dec_len)})});
  blocks.push_back({"stats", stats.to_array()});
  write_checkpoint(path, blocks);
  model.vocabulary().save(vocab_path(path));
}

LoadedSpeaking load_speaking(const std::filesystem::path& path) {
  const auto blocks = read_checkpoint(path);
  const NamedArray* cfg_block = find_block(blocks, "speak.config");
  if (!cfg_block) {
    throw DataError(path.string() + ": not a speaking checkpoint (no speak.config block)");
  }
  if (cfg_block->value.size() != 5) throw DataError(path.string() + ": bad speak.config block");
  SpeakingConfig cfg;
  cfg.layers = config_value(cfg_block->value, 0, "layers");
  cfg.hidden = config_value(cfg_block->value, 1, "hidden");
  cfg.embed = config_value(cfg_block->value, 2, "embed");
  cfg.enc_len = config_value(cfg_block->value, 3, "enc_len");
  cfg.dec_len = config_value(cfg_block->value, 4, "dec_len");
  LoadedSpeaking out;
  out.model = std::make_unique<SpeakingModel>(cfg, Vocabulary::load(vocab_path(path)), 0);
  load_blocks(out.model->params(), blocks);
  out.stats = NormStats::from_array(require_block(blocks, "stats", path).value);
  return out;
}

RunConfig parse_run_config(const KeyValues& kv) {
  RunConfig rc;
  std::set<std::string> seen;
  for (const auto& [key, value] : kv) {
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    auto number = [&](auto& field) {
      double v = 0.0;
      if (!parse_double(value, v)) {
        throw ConfigError("config key '" + key + "': '" + value + "' is not a number");
      }
      field = v;
    };
    auto count = [&](auto& field) {
      std::size_t v = 0;
      if (!parse_size(value, v)) {
        throw ConfigError("config key '" + key + "': '" + value + "' is not a non-negative integer");
      }
      field = v;
    };
    if (key == "phase") {
      rc.phase = value;
    } else if (key == "lr") {
      number(rc.lr);
    } else if (key == "batch") {
      count(rc.batch);
    } else if (key == "iters") {
      count(rc.iters);
    } else if (key == "seed") {
      std::size_t v = 0;
      if (!parse_size(value, v)) throw ConfigError("config key 'seed': '" + value + "' is not a non-negative integer");
      rc.seed = static_cast<std::uint64_t>(v);
    } else if (key == "hidden") {
      count(rc.hidden);
    } else if (key == "layers") {
      count(rc.layers);
    } else if (key == "n") {
      count(rc.n);
    } else if (key == "gamma") {
      number(rc.gamma);
    } else if (key == "alpha") {
      number(rc.alpha);
    } else if (key == "n_b") {
      count(rc.n_b);
    } else if (key == "exponent") {
      if (value != "1" && value != "2") throw ConfigError("config key 'exponent' must be 1 or 2");
      rc.exponent = value == "1" ? 1 : 2;
    } else if (key == "continuity_mean") {
      if (value != "frames" && value != "n_b") {
        throw ConfigError("config key 'continuity_mean' must be frames or n_b");
      }
      rc.continuity_mean_frames = value == "frames";
    } else if (key == "d_lr") {
      number(rc.d_lr);
    } else if (key == "adv_weight") {
      number(rc.adv_weight);
    } else if (key == "dataset_dir") {
      rc.dataset_dir = value;
    } else if (key == "checkpoint") {
      rc.checkpoint = value;
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  return rc;
}

RunConfig read_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(parse_key_values(text, path.string()));
}

}  // namespace facetalk
