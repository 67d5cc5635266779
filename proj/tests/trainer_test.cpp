#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "gova/config.hpp"
#include "gova/trainer.hpp"

namespace gova {
namespace {

namespace fs = std::filesystem;

// A small world shared by every test: 600 pairs, a tiny model.
struct World {
  RunConfig cfg;
  Corpus corpus;
  DatasetSplit split;
  Vocabulary vocab;
  std::optional<RasterCache> rasters;
  std::vector<PreparedPair> pairs;

  World() {
    cfg = desk_preset();
    cfg.n_pairs = 600;
    cfg.split.seen_per_word = 5;
    cfg.split.unseen_per_word = 5;
    corpus = generate_corpus(cfg.world, cfg.master_seed, cfg.n_pairs);
    split = split_dataset(corpus, split_config(cfg));
    vocab = Vocabulary::from_corpus(corpus);
    ModelConfig& m = cfg.model;
    m.d_model = 16;
    m.ffn_dim = 32;
    m.alignment_dim = 8;
    m.n_queries = 4;
    m.cross_blocks = m.object_blocks = m.text_blocks = 1;
    m.vocab_size = vocab.size();
    cfg.train.steps = 4;
    cfg.train.batch_size = 2;
    cfg.fewshot.shots = 2;
    cfg.fewshot.steps = 3;
    cfg.fewshot.batch_size = 2;
    rasters.emplace(corpus);
    for (const auto& id : split.pretrain) pairs.push_back(prepare_pair(rasters->record(id), vocab, *rasters, true));
  }

  Parameters init() const { return init_parameters(cfg.model, init_seed(cfg)); }
  SessionData session() { return {&corpus, &split, &vocab, &*rasters}; }
};

World& world() {
  static World w;
  return w;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("gova_trainer_test_" + name);
  fs::remove_all(d);
  return d;
}

std::optional<ErrorKind> error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

bool same_tensors(const Parameters& a, const Parameters& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [k, m] : a.tensors) {
    auto it = b.tensors.find(k);
    if (it == b.tensors.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols()) return false;
    if (std::memcmp(m.data(), it->second.data(), sizeof(double) * static_cast<std::size_t>(m.size())) != 0) return false;
  }
  return true;
}

nlohmann::ordered_json without_wall_time(const StepLog& s) {
  auto j = to_json(s);
  j.erase("wall_ms");
  return j;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint trained_checkpoint() {
  World& w = world();
  const PretrainResult r = pretrain(w.cfg.model, train_config(w.cfg), w.vocab, w.pairs, w.init());
  return {w.cfg.model, w.vocab.words(), r.params};
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint ck = trained_checkpoint();
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck), ck.config);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.vocab, ck.vocab);
  EXPECT_EQ(back.params.step_count, ck.params.step_count);
  EXPECT_EQ(back.params.rng_state, ck.params.rng_state);
  EXPECT_TRUE(same_tensors(back.params, ck.params));
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, SaveAndLoadThroughAFile) {
  const Checkpoint ck = trained_checkpoint();
  const fs::path dir = scratch_dir("file");
  save_checkpoint(ck, dir / "m.ckpt");
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
  EXPECT_TRUE(same_tensors(load_checkpoint(dir / "m.ckpt").params, ck.params));
  fs::remove_all(dir);
}

TEST(Checkpoint, ConfigMismatchIsRejected) {
  const Checkpoint ck = trained_checkpoint();
  ModelConfig other = ck.config;
  other.n_queries += 1;
  EXPECT_EQ(error_kind([&] { decode_checkpoint(encode_checkpoint(ck), other); }), ErrorKind::kCheckpoint);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const std::string bytes = encode_checkpoint(trained_checkpoint());
  for (std::size_t at : {std::size_t{20}, bytes.size() / 2, bytes.size() - 9}) {
    std::string bad = bytes;
    bad[at] = static_cast<char>(bad[at] ^ 0x5a);
    EXPECT_EQ(error_kind([&] { decode_checkpoint(bad); }), ErrorKind::kCheckpoint) << "byte " << at;
  }
  EXPECT_EQ(error_kind([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 3)); }), ErrorKind::kCheckpoint);
  EXPECT_EQ(error_kind([&] { decode_checkpoint("GOVA"); }), ErrorKind::kCheckpoint);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(error_kind([&] { decode_checkpoint(magic); }), ErrorKind::kCheckpoint);
}

TEST(Checkpoint, UnknownVersionIsRejectedEvenWithValidChecksum) {
  std::string bytes = encode_checkpoint(trained_checkpoint());
  const std::uint32_t v = kCheckpointVersion + 1;
  std::memcpy(bytes.data() + sizeof kCheckpointMagic, &v, sizeof v);
  const std::size_t body = bytes.size() - 8;
  const std::uint64_t sum = detail::fnv1a(bytes, body);
  std::memcpy(bytes.data() + body, &sum, sizeof sum);
  try {
    decode_checkpoint(bytes);
    ADD_FAILURE() << "no error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCheckpoint);
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Pre-training

TEST(Pretrain, ZeroStepsReturnsTheInitialParameters) {
  World& w = world();
  TrainConfig tc = train_config(w.cfg);
  tc.steps = 0;
  const fs::path dir = scratch_dir("zero");
  const PretrainResult r = pretrain(w.cfg.model, tc, w.vocab, w.pairs, w.init(), {dir, "pretrain"});
  EXPECT_TRUE(same_tensors(r.params, w.init()));
  EXPECT_TRUE(r.log.empty());
  ASSERT_EQ(r.checkpoints.size(), 1u);
  EXPECT_EQ(r.checkpoints[0].filename(), "pretrain_step0.ckpt");
  fs::remove_all(dir);
}

TEST(Pretrain, IdenticalConfigsGiveIdenticalLogsAndParameters) {
  World& w = world();
  const TrainConfig tc = train_config(w.cfg);
  const PretrainResult a = pretrain(w.cfg.model, tc, w.vocab, w.pairs, w.init());
  const PretrainResult b = pretrain(w.cfg.model, tc, w.vocab, w.pairs, w.init());
  ASSERT_EQ(a.log.size(), static_cast<std::size_t>(tc.steps));
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(without_wall_time(a.log[i]), without_wall_time(b.log[i]));
  EXPECT_TRUE(same_tensors(a.params, b.params));

  TrainConfig other = tc;
  other.seed += 1;
  const PretrainResult c = pretrain(w.cfg.model, other, w.vocab, w.pairs, w.init());
  EXPECT_FALSE(same_tensors(a.params, c.params));
}

TEST(Pretrain, MetricsLogAndCheckpointsAreWritten) {
  World& w = world();
  TrainConfig tc = train_config(w.cfg);
  tc.checkpoint_every = 2;
  const fs::path dir = scratch_dir("metrics");
  const PretrainResult r = pretrain(w.cfg.model, tc, w.vocab, w.pairs, w.init(), {dir, "pretrain"});
  std::ifstream in(dir / "pretrain_metrics.jsonl");
  std::string line;
  std::int64_t expect_step = 1;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<std::int64_t>(), expect_step++);
    for (const char* k : {"loss", "mlm", "pos", "contrast", "l1", "giou", "lr", "wall_ms"}) EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(expect_step, tc.steps + 1);
  std::set<std::string> names;
  for (const auto& p : r.checkpoints) names.insert(p.filename().string());
  EXPECT_EQ(names, (std::set<std::string>{"pretrain_step0.ckpt", "pretrain_step2.ckpt", "pretrain_step4.ckpt"}));
  EXPECT_TRUE(same_tensors(load_checkpoint(dir / "pretrain_step4.ckpt").params, r.params));
  fs::remove_all(dir);
}

TEST(Pretrain, FrozenImageGroupIsBitIdentical) {
  World& w = world();
  TrainConfig tc = train_config(w.cfg);
  tc.freeze_image = true;
  const Parameters start = w.init();
  const PretrainResult r = pretrain(w.cfg.model, tc, w.vocab, w.pairs, start);
  bool some_image = false, text_moved = false;
  for (const auto& [k, m] : start.tensors) {
    if (param_group(k) == ParamGroup::kImage) {
      some_image = true;
      EXPECT_EQ(r.params.at(k), m) << k;
    } else if (!(r.params.at(k) == m)) {
      text_moved = true;
    }
  }
  EXPECT_TRUE(some_image);
  EXPECT_TRUE(text_moved);
}

TEST(Pretrain, RejectsBadConfigs) {
  World& w = world();
  TrainConfig tc = train_config(w.cfg);
  tc.batch_size = 0;
  EXPECT_EQ(error_kind([&] { pretrain(w.cfg.model, tc, w.vocab, w.pairs, w.init()); }), ErrorKind::kConfig);
  tc = train_config(w.cfg);
  tc.masking.keep = 0.5;
  EXPECT_EQ(error_kind([&] { pretrain(w.cfg.model, tc, w.vocab, w.pairs, w.init()); }), ErrorKind::kConfig);
  EXPECT_EQ(error_kind([&] { pretrain(w.cfg.model, train_config(w.cfg), w.vocab, {}, w.init()); }), ErrorKind::kConfig);
}

TEST(Pretrain, HoldoutAuditCatchesLeaks) {
  World& w = world();
  EXPECT_NO_THROW(require_holdout_sound(w.corpus, w.split, w.cfg.split.holdout_words));
  DatasetSplit leaky = w.split;
  leaky.pretrain.push_back(leaky.unseen_train.front());
  EXPECT_EQ(error_kind([&] { require_holdout_sound(w.corpus, leaky, w.cfg.split.holdout_words); }),
            ErrorKind::kIntegrity);
}

// ---------------------------------------------------------------------------
// Few-shot sessions

TEST(FewShot, ShotsMentionTheirWordAndAreDistinct) {
  World& w = world();
  const SessionData d = w.session();
  const auto words = w.cfg.fewshot.target_words;
  const auto shots = sample_shots(d, words, 2, 7);
  ASSERT_EQ(shots.size(), 2 * words.size());
  EXPECT_EQ(std::set<std::string>(shots.begin(), shots.end()).size(), shots.size());
  for (std::size_t i = 0; i < shots.size(); ++i) {
    const auto& toks = w.rasters->record(shots[i]).caption.tokens;
    EXPECT_NE(std::find(toks.begin(), toks.end(), words[i / 2]), toks.end()) << shots[i];
  }
  EXPECT_EQ(sample_shots(d, words, 2, 7), shots);
  EXPECT_EQ(error_kind([&] { sample_shots(d, words, 100000, 7); }), ErrorKind::kShortfall);
}

TEST(FewShot, SessionLeavesTheStartingModelAndGroundingHeadsUntouched) {
  World& w = world();
  const Parameters start = trained_checkpoint().params;
  const Parameters copy = start;
  const SessionResult s =
      fewshot_session(w.cfg.model, start, w.session(), fewshot_config(w.cfg), train_config(w.cfg), "s");
  EXPECT_TRUE(same_tensors(start, copy));
  EXPECT_EQ(s.log.size(), static_cast<std::size_t>(w.cfg.fewshot.steps));
  EXPECT_FALSE(same_tensors(s.params, start));
  // Masked-LM-only updates never reach the box, alignment and position heads.
  for (const char* k : {"mm.pos_head.w", "mm.box.fc3.w", "mm.obj_align.w", "mm.tok_align.w", "mm.box.size"})
    EXPECT_EQ(s.params.at(k), start.at(k)) << k;
  for (const auto& l : s.log) {
    EXPECT_EQ(l.terms.count("pos") ? l.terms.at("pos") : 0.0, 0.0);
  }
}

TEST(FewShot, SessionsAreReproducibleAndIndependent) {
  World& w = world();
  const Parameters start = trained_checkpoint().params;
  const auto fs = fewshot_config(w.cfg);
  const auto tc = train_config(w.cfg);
  const SessionResult a = fewshot_session(w.cfg.model, start, w.session(), fs, tc, "a");
  const SessionResult b = fewshot_session(w.cfg.model, start, w.session(), fs, tc, "b");
  EXPECT_TRUE(same_tensors(a.params, b.params));
  EXPECT_EQ(a.unseen_post, b.unseen_post);
  EXPECT_EQ(a.train_pairs, b.train_pairs);
  for (const auto& word : fs.target_words) {
    ASSERT_TRUE(a.trajectory.count(word));
    EXPECT_EQ(a.trajectory.at(word).pre, a.unseen_pre.get(word, Protocol::kAll).log_gppl);
  }
}

TEST(FewShot, ZeroStepsKeepsPostEqualToPre) {
  World& w = world();
  auto fs = fewshot_config(w.cfg);
  fs.steps = 0;
  const Parameters start = trained_checkpoint().params;
  const SessionResult s = fewshot_session(w.cfg.model, start, w.session(), fs, train_config(w.cfg), "z");
  EXPECT_EQ(s.seen_pre, s.seen_post);
  EXPECT_EQ(s.unseen_pre, s.unseen_post);
  EXPECT_TRUE(s.log.empty());
}

TEST(FewShot, OneClassModeRunsOneSessionPerWordFromTheSameStart) {
  World& w = world();
  auto fs = fewshot_config(w.cfg);
  fs.mode = FewShotMode::kOneClass;
  fs.steps = 1;
  const Parameters start = trained_checkpoint().params;
  const auto results = run_fewshot(w.cfg.model, start, w.session(), fs, train_config(w.cfg));
  ASSERT_EQ(results.size(), fs.target_words.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    EXPECT_EQ(results[i].label, "one_class_" + fs.target_words[i] + "_k2");
    EXPECT_EQ(results[i].trajectory.size(), 1u);
    EXPECT_EQ(results[i].seen_pre, results[0].seen_pre);
  }
}

TEST(FewShot, UnknownTargetWordIsAConfigError) {
  World& w = world();
  auto fs = fewshot_config(w.cfg);
  fs.target_words = {"zebra"};
  EXPECT_EQ(error_kind([&] { fewshot_session(w.cfg.model, w.init(), w.session(), fs, train_config(w.cfg), "x"); }),
            ErrorKind::kConfig);
}

// ---------------------------------------------------------------------------
// Curriculum

TEST(Curriculum, NoGroundingFineTuneSwitchesToTheFullObjective) {
  World& w = world();
  ModelConfig m = w.cfg.model;
  m.variant = Variant::kNoGrounding;
  CurriculumPlan plan;
  plan.pretrain = train_config(w.cfg);
  plan.pretrain.steps = 2;
  plan.grounding_finetune_steps = 1;
  plan.shot_sizes = {2};
  plan.fewshot = fewshot_config(w.cfg);
  plan.fewshot.steps = 1;
  plan.init_seed = 3;
  const fs::path dir = scratch_dir("curriculum");
  const auto results = run_curriculum(m, plan, w.session(), dir);
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(results[0].label, "pretrain");
  EXPECT_EQ(results[1].label, "multi_class_k2");
  EXPECT_TRUE(fs::exists(dir / "grounding_ft_step3.ckpt"));
  EXPECT_EQ(load_checkpoint(dir / "grounding_ft_step3.ckpt").config.variant, Variant::kFull);
  EXPECT_TRUE(fs::exists(dir / "sessions.json"));
  EXPECT_EQ(nlohmann::json::parse(read_file(dir / "sessions.json")).size(), 2u);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace gova
