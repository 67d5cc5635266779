#pragma once

// Training loops: grounded pre-training, MLM-only few-shot sessions with
// before/after evaluation, and curricula chaining the two.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gova/checkpoint.hpp"
#include "gova/dataworld.hpp"
#include "gova/evalsuite.hpp"
#include "gova/model.hpp"
#include "gova/objectives.hpp"
#include "gova/rng.hpp"

namespace gova {

struct TrainConfig {
  int steps = 5000;
  int batch_size = 64;
  double lr_image = 1e-4;
  double lr_text = 1e-4;
  double lr_multimodal = 1e-4;
  bool freeze_image = false;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  int eval_every = 0;
  int checkpoint_every = 0;
  LossWeights weights;
  MaskingPolicy masking;
  MatchOptions match;

  void validate() const {
    require(steps >= 0 && batch_size > 0, ErrorKind::kConfig, "steps must be >= 0 and batch_size > 0");
    require(lr_image >= 0 && lr_text >= 0 && lr_multimodal >= 0, ErrorKind::kConfig, "learning rates must be >= 0");
    masking.validate();
  }
  double lr(ParamGroup g) const {
    switch (g) {
      case ParamGroup::kImage: return freeze_image ? 0.0 : lr_image;
      case ParamGroup::kText: return lr_text;
      case ParamGroup::kMultimodal: return lr_multimodal;
    }
    return 0.0;
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["lr_image"] = c.lr_image;
  j["lr_text"] = c.lr_text;
  j["lr_multimodal"] = c.lr_multimodal;
  j["freeze_image"] = c.freeze_image;
  j["optimizer"] = {{"name", "adam"}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.adam_eps}, {"clip_norm", c.clip_norm}};
  j["seed"] = c.seed;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  j["weights"] = {{"mlm", c.weights.mlm}, {"pos", c.weights.pos}, {"contrast", c.weights.contrast},
                  {"l1", c.weights.l1}, {"giou", c.weights.giou}, {"no_object_scale", c.weights.no_object_scale}};
  j["masking"] = {{"p_groundable", c.masking.p_groundable}, {"p_other", c.masking.p_other},
                  {"replace_mask", c.masking.replace_mask}, {"replace_random", c.masking.replace_random},
                  {"keep", c.masking.keep}};
  j["alignment_match_cost"] = c.match.alignment_cost;
  return j;
}

// ---------------------------------------------------------------------------
// Data preparation

/// One caption-image pair ready for training.
struct PreparedPair {
  std::string id;
  std::vector<int> ids;
  std::vector<bool> groundable;
  GroundingTargets grounding;
  const ImageRaster* raster = nullptr;
};

/// Lazily renders (or loads) and caches pair rasters.
class RasterCache {
 public:
  explicit RasterCache(const Corpus& corpus, std::filesystem::path base_dir = {}) : base_(std::move(base_dir)) {
    for (const auto& r : corpus) by_id_[r.id] = &r;
  }
  const ImageRaster& get(const std::string& pair_id) {
    auto it = cache_.find(pair_id);
    if (it != cache_.end()) return it->second;
    auto rec = by_id_.find(pair_id);
    require(rec != by_id_.end(), ErrorKind::kIntegrity, "unknown pair id '" + pair_id + "'");
    return cache_.emplace(pair_id, record_raster(*rec->second, base_)).first->second;
  }
  const PairRecord& record(const std::string& pair_id) const {
    auto rec = by_id_.find(pair_id);
    require(rec != by_id_.end(), ErrorKind::kIntegrity, "unknown pair id '" + pair_id + "'");
    return *rec->second;
  }

 private:
  std::filesystem::path base_;
  std::unordered_map<std::string, const PairRecord*> by_id_;
  std::unordered_map<std::string, ImageRaster> cache_;
};

inline PreparedPair prepare_pair(const PairRecord& rec, const Vocabulary& vocab, RasterCache& rasters, bool with_image) {
  PreparedPair p;
  p.id = rec.id;
  p.ids = vocab.encode(rec.caption.tokens);
  const auto roles = rec.caption.token_roles();
  for (Role r : roles) p.groundable.push_back(groundable_role(r));
  for (const Phrase& ph : rec.caption.phrases) {
    std::vector<int> span;
    for (int t = ph.start; t < ph.end; ++t) span.push_back(t);
    for (int b : ph.box_ids) {
      const ObjectSpec* o = rec.object(b);
      require(o != nullptr, ErrorKind::kIntegrity, "dangling box id in " + rec.id);
      p.grounding.boxes.push_back(o->box);
      p.grounding.spans.push_back(span);
    }
  }
  if (with_image) p.raster = &rasters.get(rec.id);
  return p;
}

/// Ids of words that occur in the given pairs; used as the pool for random
/// token replacement so held-out words never enter training inputs.
inline std::vector<int> word_pool(const std::vector<PreparedPair>& pairs) {
  std::set<int> s;
  for (const auto& p : pairs)
    for (int id : p.ids)
      if (id > Vocabulary::kNoObj) s.insert(id);
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::map<std::string, Mat> m, v;
  std::int64_t t = 0;
};

inline double global_norm(const Gradients& g) {
  double s = 0.0;
  for (const auto& [k, m] : g) s += m.squaredNorm();
  return std::sqrt(s);
}

/// One Adam update; parameters whose group rate is 0 are left untouched.
inline void adam_step(Parameters& p, const Gradients& grads, AdamState& st, const TrainConfig& cfg) {
  ++st.t;
  double clip = 1.0;
  if (cfg.clip_norm > 0) {
    const double n = global_norm(grads);
    if (n > cfg.clip_norm) clip = cfg.clip_norm / n;
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (auto& [name, w] : p.tensors) {
    const double lr = cfg.lr(param_group(name));
    if (lr == 0.0) continue;
    const Mat& g = grads.at(name);
    Mat& m = st.m.try_emplace(name, Mat::Zero(w.rows(), w.cols())).first->second;
    Mat& v = st.v.try_emplace(name, Mat::Zero(w.rows(), w.cols())).first->second;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * clip * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * (clip * g).cwiseAbs2();
    w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
  }
}

// ---------------------------------------------------------------------------
// Steps

struct StepLog {
  std::int64_t step = 0;
  double loss = 0.0;
  std::map<std::string, double> terms;  // batch means of unweighted terms
  double lr = 0.0;
  double wall_ms = 0.0;
};

inline nlohmann::ordered_json to_json(const StepLog& s) {
  nlohmann::ordered_json j;
  j["step"] = s.step;
  j["loss"] = s.loss;
  for (const auto& [k, v] : s.terms) j[k] = v;
  j["lr"] = s.lr;
  j["wall_ms"] = s.wall_ms;
  return j;
}

/// Loss and gradients of one instance; gradients accumulate into `grads`
/// scaled by `scale`.
inline LossResult instance_loss(const ModelConfig& mcfg, const Parameters& params, Gradients* grads,
                                 const PreparedPair& pair, const MaskedText& masked, bool mlm_only,
                                 const LossWeights& w, const MatchOptions& match, double scale) {
  ad::Tape tape(grads != nullptr);
  Binder P(tape, params, grads);
  ForwardGraph g = forward_graph(mcfg, P, masked.ids, has_image(mcfg.variant) ? pair.raster : nullptr);
  InstanceTargets tgt;
  tgt.mlm = masked.targets;
  if (!mlm_only) tgt.grounding = pair.grounding;
  LossResult r = total_loss(mcfg, g, tgt, w, match);
  if (grads && std::isfinite(r.value)) tape.backward(ad::scale(r.total, scale));
  r.total = {};
  return r;
}

/// One optimizer step over a batch sampled with replacement from `pairs`.
/// The step's randomness is a pure function of (seed, step index).
inline StepLog train_step(const ModelConfig& mcfg, Parameters& params, AdamState& opt, const TrainConfig& cfg,
                          const std::vector<PreparedPair>& pairs, const std::vector<int>& random_pool, bool mlm_only,
                          std::uint64_t stream = 21) {
  require(!pairs.empty(), ErrorKind::kConfig, "no training pairs");
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(derive_seed(cfg.seed, stream, static_cast<std::uint64_t>(params.step_count)));
  Gradients grads = zero_gradients(params);
  StepLog log;
  log.step = params.step_count + 1;
  const double scale = 1.0 / cfg.batch_size;
  std::vector<std::string> batch_ids;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const PreparedPair& pair = pairs[rng.below(pairs.size())];
    batch_ids.push_back(pair.id);
    const MaskedText masked = apply_masking(pair.ids, pair.groundable, rng, cfg.masking, mcfg.vocab_size, random_pool);
    LossResult r = instance_loss(mcfg, params, &grads, pair, masked, mlm_only, cfg.weights, cfg.match, scale);
    const double total = r.value;
    if (!std::isfinite(total)) {
      std::string ids;
      for (const auto& id : batch_ids) ids += (ids.empty() ? "" : ",") + id;
      fail(ErrorKind::kNumeric, "non-finite loss at step " + std::to_string(log.step) + "; batch pair ids: " + ids);
    }
    log.loss += total * scale;
    for (const auto& [k, v] : r.breakdown) log.terms[k] += v * scale;
  }
  adam_step(params, grads, opt, cfg);
  params.step_count += 1;
  params.rng_state = rng.state();
  log.lr = cfg.lr_multimodal;
  log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  std::vector<PredictionRecord> predictions;
  std::vector<EvalRecord> records;
  CorpusReport report;
};

inline Evaluation evaluate(const ModelConfig& mcfg, const Parameters& params, const Vocabulary& vocab,
                           const std::vector<ClozeInstance>& instances, RasterCache& rasters,
                           const ExtractOptions& opt = {}) {
  Evaluation ev;
  for (const auto& inst : instances) {
    const ImageRaster* img = has_image(mcfg.variant) ? &rasters.get(inst.pair_id) : nullptr;
    const ForwardOutput out = forward(mcfg, params, vocab.encode(inst.tokens), img);
    ev.predictions.push_back(extract_prediction(out, inst, vocab, opt));
    ev.records.push_back(score_prediction(ev.predictions.back(), inst));
  }
  ev.report = aggregate(ev.records);
  return ev;
}

// ---------------------------------------------------------------------------
// Pre-training

struct RunIo {
  std::filesystem::path out_dir;  // empty: nothing written
  std::string tag = "pretrain";
};

struct PretrainResult {
  Parameters params;
  std::vector<StepLog> log;
  std::vector<std::filesystem::path> checkpoints;
};

/// Fails when any pretrain caption mentions a held-out word.
inline void require_holdout_sound(const Corpus& corpus, const DatasetSplit& split, const std::vector<std::string>& holdout) {
  const auto leaks = audit_holdout(corpus, split.pretrain, holdout);
  if (!leaks.empty()) {
    std::string msg = "holdout audit failed: held-out words in pretrain pairs:";
    for (const auto& l : leaks) msg += " " + l;
    fail(ErrorKind::kIntegrity, msg);
  }
}

inline std::filesystem::path checkpoint_path(const RunIo& io, std::int64_t step) {
  return io.out_dir / (io.tag + "_step" + std::to_string(step) + ".ckpt");
}

/// Runs `cfg.steps` optimizer steps from `init`. With an output directory,
/// appends one metrics line per step and writes the initial, periodic and
/// final checkpoints.
inline PretrainResult pretrain(const ModelConfig& mcfg, const TrainConfig& cfg, const Vocabulary& vocab,
                               const std::vector<PreparedPair>& pairs, Parameters init, const RunIo& io = {},
                               const std::function<void(const Parameters&)>& on_eval = {}) {
  mcfg.validate();
  cfg.validate();
  PretrainResult res;
  res.params = std::move(init);
  const std::vector<int> pool = word_pool(pairs);
  AdamState opt;
  std::ofstream metrics;
  auto save = [&] {
    if (io.out_dir.empty()) return;
    const auto path = checkpoint_path(io, res.params.step_count);
    save_checkpoint({mcfg, vocab.words(), res.params}, path);
    res.checkpoints.push_back(path);
  };
  if (!io.out_dir.empty()) {
    std::filesystem::create_directories(io.out_dir);
    metrics.open(io.out_dir / (io.tag + "_metrics.jsonl"), std::ios::app);
    require(metrics.good(), ErrorKind::kIo, "cannot open metrics log in " + io.out_dir.string());
  }
  save();
  for (int s = 0; s < cfg.steps; ++s) {
    StepLog l = train_step(mcfg, res.params, opt, cfg, pairs, pool, false);
    if (metrics.is_open()) metrics << to_json(l).dump() << "\n" << std::flush;
    res.log.push_back(std::move(l));
    const auto step = res.params.step_count;
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && on_eval) on_eval(res.params);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && s + 1 < cfg.steps) save();
  }
  if (cfg.steps > 0) save();
  return res;
}

// ---------------------------------------------------------------------------
// Few-shot sessions

enum class FewShotMode { kMultiClass, kOneClass };

struct FewShotConfig {
  int shots = 8;
  int steps = 50;
  int batch_size = 8;
  FewShotMode mode = FewShotMode::kMultiClass;
  std::vector<std::string> target_words;
  bool replay = false;  // also sample pretrain pairs
  std::uint64_t seed = 0;

  void validate() const {
    require(shots > 0 && steps >= 0 && batch_size > 0, ErrorKind::kConfig, "invalid few-shot sizes");
  }
};

struct WordTrajectory {
  double pre = kInf, post = kInf;  // corpus log G-PPL (all protocol)
};

struct SessionResult {
  std::string label;
  CorpusReport seen_pre, unseen_pre, seen_post, unseen_post;
  std::map<std::string, WordTrajectory> trajectory;
  std::vector<StepLog> log;
  std::vector<std::string> train_pairs;
  Parameters params;
};

inline nlohmann::ordered_json to_json(const SliceReport& r) {
  auto num = [](double v) -> nlohmann::ordered_json {
    if (std::isfinite(v)) return v;
    return format_real(v);
  };
  nlohmann::ordered_json j;
  j["word"] = r.word;
  j["protocol"] = std::string(protocol_name(r.protocol));
  j["n"] = r.n;
  j["ghr1"] = r.ghr1;
  j["log_gppl"] = num(r.log_gppl);
  j["log_gppl_inst"] = num(r.log_gppl_inst);
  j["hr1"] = r.hr1;
  j["log_ppl"] = r.log_ppl;
  j["acc"] = r.acc;
  j["mean_iou"] = r.mean_iou;
  j["failure_rate"] = r.failure_rate;
  return j;
}

inline nlohmann::ordered_json to_json(const CorpusReport& rep) {
  auto a = nlohmann::ordered_json::array();
  for (const auto& r : rep.rows) a.push_back(to_json(r));
  return a;
}

inline nlohmann::ordered_json to_json(const SessionResult& s) {
  nlohmann::ordered_json j;
  j["label"] = s.label;
  j["train_pairs"] = s.train_pairs;
  j["seen_pre"] = to_json(s.seen_pre);
  j["unseen_pre"] = to_json(s.unseen_pre);
  j["seen_post"] = to_json(s.seen_post);
  j["unseen_post"] = to_json(s.unseen_post);
  auto traj = nlohmann::ordered_json::object();
  for (const auto& [w, t] : s.trajectory) traj[w] = {format_real(t.pre), format_real(t.post)};
  j["trajectory"] = traj;
  return j;
}

/// Shared inputs of a few-shot session.
struct SessionData {
  const Corpus* corpus = nullptr;
  const DatasetSplit* split = nullptr;
  const Vocabulary* vocab = nullptr;
  RasterCache* rasters = nullptr;
};

/// Deterministically picks `shots` unseen-train pairs mentioning each word.
inline std::vector<std::string> sample_shots(const SessionData& d, const std::vector<std::string>& words, int shots,
                                             std::uint64_t seed) {
  std::vector<std::string> chosen;
  std::set<std::string> taken;
  for (std::size_t wi = 0; wi < words.size(); ++wi) {
    std::vector<std::string> cands;
    for (const auto& id : d.split->unseen_train) {
      const auto& toks = d.rasters->record(id).caption.tokens;
      if (std::find(toks.begin(), toks.end(), words[wi]) != toks.end() && !taken.count(id)) cands.push_back(id);
    }
    Rng rng(derive_seed(seed, 31, wi));
    rng.shuffle(cands);
    require(static_cast<int>(cands.size()) >= shots, ErrorKind::kShortfall,
            "only " + std::to_string(cands.size()) + " training pairs for '" + words[wi] + "', need " + std::to_string(shots));
    for (int k = 0; k < shots; ++k) {
      chosen.push_back(cands[static_cast<std::size_t>(k)]);
      taken.insert(cands[static_cast<std::size_t>(k)]);
    }
  }
  return chosen;
}

/// One MLM-only session on the target words, evaluated before and after on
/// both test splits. `base` supplies learning rates and optimizer settings.
inline SessionResult fewshot_session(const ModelConfig& mcfg, const Parameters& start, const SessionData& d,
                                     const FewShotConfig& fs, const TrainConfig& base, const std::string& label,
                                     const std::vector<std::string>* replay_pretrain = nullptr) {
  fs.validate();
  for (const auto& w : fs.target_words)
    require(d.vocab->contains(w), ErrorKind::kConfig, "target word '" + w + "' is not in the vocabulary");
  SessionResult res;
  res.label = label;
  res.params = start;
  res.params.step_count = 0;

  res.train_pairs = sample_shots(d, fs.target_words, fs.shots, fs.seed);
  std::vector<PreparedPair> pairs;
  for (const auto& id : res.train_pairs)
    pairs.push_back(prepare_pair(d.rasters->record(id), *d.vocab, *d.rasters, has_image(mcfg.variant)));
  if (fs.replay && replay_pretrain) {
    Rng rng(derive_seed(fs.seed, 32, 0));
    for (std::size_t k = 0; k < pairs.size() && !replay_pretrain->empty(); ++k) {
      const auto& id = (*replay_pretrain)[rng.below(replay_pretrain->size())];
      pairs.push_back(prepare_pair(d.rasters->record(id), *d.vocab, *d.rasters, has_image(mcfg.variant)));
    }
  }

  const Evaluation seen_pre = evaluate(mcfg, start, *d.vocab, d.split->seen_test, *d.rasters);
  const Evaluation unseen_pre = evaluate(mcfg, start, *d.vocab, d.split->unseen_test, *d.rasters);
  res.seen_pre = seen_pre.report;
  res.unseen_pre = unseen_pre.report;

  TrainConfig cfg = base;
  cfg.steps = fs.steps;
  cfg.batch_size = fs.batch_size;
  cfg.seed = fs.seed;
  AdamState opt;
  const std::vector<int> pool = word_pool(pairs);
  for (int s = 0; s < fs.steps; ++s) res.log.push_back(train_step(mcfg, res.params, opt, cfg, pairs, pool, true, 41));

  if (fs.steps == 0) {
    res.seen_post = res.seen_pre;
    res.unseen_post = res.unseen_pre;
  } else {
    res.seen_post = evaluate(mcfg, res.params, *d.vocab, d.split->seen_test, *d.rasters).report;
    res.unseen_post = evaluate(mcfg, res.params, *d.vocab, d.split->unseen_test, *d.rasters).report;
  }
  for (const auto& w : fs.target_words) {
    WordTrajectory t;
    for (const auto& r : res.unseen_pre.rows)
      if (r.word == w && r.protocol == Protocol::kAll) t.pre = r.log_gppl;
    for (const auto& r : res.unseen_post.rows)
      if (r.word == w && r.protocol == Protocol::kAll) t.post = r.log_gppl;
    res.trajectory[w] = t;
  }
  return res;
}

/// Multi-class: one session over all words. One-class: one session per
/// word, each starting from `start`.
inline std::vector<SessionResult> run_fewshot(const ModelConfig& mcfg, const Parameters& start, const SessionData& d,
                                              const FewShotConfig& fs, const TrainConfig& base) {
  std::vector<SessionResult> out;
  const std::string k = "k" + std::to_string(fs.shots);
  if (fs.mode == FewShotMode::kMultiClass) {
    out.push_back(fewshot_session(mcfg, start, d, fs, base, "multi_class_" + k, &d.split->pretrain));
  } else {
    for (const auto& w : fs.target_words) {
      FewShotConfig one = fs;
      one.target_words = {w};
      out.push_back(fewshot_session(mcfg, start, d, one, base, "one_class_" + w + "_" + k, &d.split->pretrain));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curriculum

struct CurriculumPlan {
  TrainConfig pretrain;
  int grounding_finetune_steps = 0;  // extra full-objective steps for a no_grounding model
  std::vector<int> shot_sizes;       // one few-shot stage per entry
  FewShotConfig fewshot;
  std::uint64_t init_seed = 0;
};

/// Pre-training (optionally followed by a grounding fine-tune) then the
/// configured few-shot stages; every stage boundary is checkpointed when an
/// output directory is given.
inline std::vector<SessionResult> run_curriculum(ModelConfig mcfg, const CurriculumPlan& plan, const SessionData& d,
                                                 const std::filesystem::path& out_dir = {},
                                                 const std::optional<Parameters>& resume = std::nullopt) {
  std::vector<PreparedPair> pairs;
  for (const auto& id : d.split->pretrain)
    pairs.push_back(prepare_pair(d.rasters->record(id), *d.vocab, *d.rasters, has_image(mcfg.variant)));

  Parameters params;
  if (resume) {
    params = *resume;
  } else {
    require_holdout_sound(*d.corpus, *d.split, plan.fewshot.target_words);
    params = pretrain(mcfg, plan.pretrain, *d.vocab, pairs, init_parameters(mcfg, plan.init_seed),
                      {out_dir, "pretrain"}).params;
    if (plan.grounding_finetune_steps > 0 && mcfg.variant == Variant::kNoGrounding) {
      mcfg.variant = Variant::kFull;
      TrainConfig ft = plan.pretrain;
      ft.steps = plan.grounding_finetune_steps;
      ft.seed = derive_seed(plan.pretrain.seed, 51, 0);
      params = pretrain(mcfg, ft, *d.vocab, pairs, std::move(params), {out_dir, "grounding_ft"}).params;
    }
  }

  std::vector<SessionResult> results;
  SessionResult stage0;
  stage0.label = "pretrain";
  stage0.seen_post = stage0.seen_pre = evaluate(mcfg, params, *d.vocab, d.split->seen_test, *d.rasters).report;
  stage0.unseen_post = stage0.unseen_pre = evaluate(mcfg, params, *d.vocab, d.split->unseen_test, *d.rasters).report;
  stage0.params = params;
  results.push_back(std::move(stage0));

  for (int k : plan.shot_sizes) {
    FewShotConfig fs = plan.fewshot;
    fs.shots = k;
    for (auto& r : run_fewshot(mcfg, params, d, fs, plan.pretrain)) {
      if (!out_dir.empty()) save_checkpoint({mcfg, d.vocab->words(), r.params}, out_dir / (r.label + ".ckpt"));
      results.push_back(std::move(r));
    }
  }
  if (!out_dir.empty()) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : results) arr.push_back(to_json(r));
    atomic_write(out_dir / "sessions.json", arr.dump(2) + "\n");
  }
  return results;
}

}  // namespace gova
