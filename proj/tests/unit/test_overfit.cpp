#include "doctest.h"
#include "facetalk/training.hpp"

using namespace facetalk;

TEST_CASE("speaking model overfits a toy corpus") {
  std::vector<ConversationSample> data;
  for (std::uint64_t i = 0; i < 16; ++i) data.push_back(synth_conversation(500 + i, 20));
  const NormStats stats = train_stats(data);
  std::vector<const ConversationSample*> all;
  for (const auto& s : data) all.push_back(&s);
  const auto pairs = speaking_pairs(all, stats, 20);
  std::vector<std::vector<std::string>> sentences;
  for (const auto& p : pairs) sentences.push_back(p.tokens);
  SpeakingConfig mcfg;
  mcfg.layers = 2;
  mcfg.hidden = 32;
  mcfg.embed = 16;
  mcfg.enc_len = 14;
  mcfg.dec_len = 20;
  SpeakingModel model(mcfg, Vocabulary::build(sentences), 1);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch = 16;
  cfg.eval_interval = 100;
  const SpeakingHistory h = train_speaking(model, pairs, cfg, default_schedule(model, 1500));
  MESSAGE("speaking toy final total_loss " << h.history.rows.back().total);
  CHECK(h.history.rows.back().total < 1e-2);
}
