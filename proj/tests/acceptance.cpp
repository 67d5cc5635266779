// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
// fails. `acceptance 2 5` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gova/analysis.hpp"
#include "gova/config.hpp"
#include "gova/trainer.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace gova;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

void note(const std::string& s) { std::cout << "  " << s << std::endl; }

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Shared desk-scale setup

constexpr int kC6Steps = 1000;

struct Desk {
  RunConfig cfg = desk_preset();
  Corpus corpus;
  DatasetSplit split;
  Vocabulary vocab;
  std::optional<RasterCache> rasters;
  std::vector<PreparedPair> pairs;

  std::optional<Parameters> pretrained;    // cfg.train.steps
  std::optional<Parameters> at_c6_steps;   // same run, kC6Steps
  double pretrain_seconds = 0.0;

  Desk() {
    cfg.model.vocab_size = 0;
    corpus = generate_corpus(cfg.world, cfg.master_seed, cfg.n_pairs);
    split = split_dataset(corpus, split_config(cfg));
    vocab = Vocabulary::from_corpus(corpus);
    cfg.model.vocab_size = vocab.size();
    rasters.emplace(corpus);
    for (const auto& id : split.pretrain) pairs.push_back(prepare_pair(rasters->record(id), vocab, *rasters, true));
    note("desk corpus: " + std::to_string(corpus.size()) + " pairs, pretrain " + std::to_string(split.pretrain.size()) +
         ", seen_test " + std::to_string(split.seen_test.size()) + ", unseen_test " +
         std::to_string(split.unseen_test.size()) + ", vocab " + std::to_string(vocab.size()));
  }

  SessionData session() { return {&corpus, &split, &vocab, &*rasters}; }

  void run_pretrain() {
    if (pretrained) return;
    TrainConfig tc = train_config(cfg);
    tc.eval_every = kC6Steps;
    const auto t0 = Clock::now();
    auto res = pretrain(cfg.model, tc, vocab, pairs, init_parameters(cfg.model, init_seed(cfg)), {},
                        [&](const Parameters& p) {
                          if (p.step_count == kC6Steps) at_c6_steps = p;
                          note("pretrain step " + std::to_string(p.step_count) + " (" + fmt(seconds_since(t0), 5) + " s)");
                        });
    pretrain_seconds = seconds_since(t0);
    pretrained = std::move(res.params);
  }

  CorpusReport eval(const ModelConfig& m, const Parameters& p, const std::vector<ClozeInstance>& inst) {
    return evaluate(m, p, vocab, inst, *rasters, cfg.eval).report;
  }
};

Desk& desk() {
  static Desk d;
  return d;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome c1_metric_identities() {
  const auto t0 = Clock::now();
  auto round2 = [](double v) { return std::round(v * 100.0) / 100.0; };
  const double seen = g_ppl(1.26, 0.588), unseen = g_ppl(11.01, 0.563);
  const double secs = seconds_since(t0);
  const bool ok = round2(seen) == 1.79 && round2(unseen) == 11.58 && secs < 1.0;
  return {ok, "(1.26, 0.588) -> " + fmt(seen) + ", (11.01, 0.563) -> " + fmt(unseen) + " in " + fmt(secs, 2) + " s"};
}

Outcome c2_geometry_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2);
  int hungarian_bad = 0, giou_bad = 0;
  double worst_raster = 0.0;
  std::uniform_int_distribution<int> dim(1, 6);
  std::uniform_real_distribution<double> val(-3.0, 5.0);
  for (int t = 0; t < 500; ++t) {
    CostMatrix c(dim(rng), dim(rng));
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = val(rng);
    const Assignment got = hungarian(c), want = test::brute_force_assignment(c);
    hungarian_bad += got.pairs != want.pairs || std::abs(got.total_cost - want.total_cost) > 1e-9;
  }
  for (int t = 0; t < 500; ++t) {
    const BoxSet gold = test::random_lattice_box_set(rng, 1, 3, 1000);
    const BoxSet pred = test::random_lattice_box_set(rng, 1, 4, 1000);
    worst_raster = std::max({worst_raster, std::abs(iou_any(gold, pred) - test::raster_iou_any(gold, pred, 1000)),
                             std::abs(iou_all(gold, pred) - test::raster_iou(gold, pred, 1000))});
  }
  for (int t = 0; t < 500; ++t) {
    const Box a = test::random_box(rng, 1e-3), b = test::random_box(rng, 1e-3);
    giou_bad += giou(a, b) > iou(a, b);
  }
  const double secs = seconds_since(t0);
  const bool ok = hungarian_bad == 0 && worst_raster <= 2e-3 && giou_bad == 0 && secs < 60.0;
  return {ok, "hungarian mismatches " + std::to_string(hungarian_bad) + "/500, worst raster IoU error " +
                  fmt(worst_raster) + " (tol 2e-3), GIoU > IoU " + std::to_string(giou_bad) + "/500, " +
                  fmt(secs, 3) + " s"};
}

Outcome c3_gradients() {
  const auto t0 = Clock::now();
  const test::Problem pr(Variant::kFull);
  double worst = 0.0;
  std::string detail;
  for (const char* term : {"total", "mlm", "l1", "giou", "pos", "contrast"}) {
    const double e = test::worst_error(test::gradient_errors(pr, term, 3));
    worst = std::max(worst, e);
    detail += std::string(term) + " " + fmt(e, 2) + ", ";
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0, "worst relative error per term: " + detail + fmt(secs, 3) + " s (tol 1e-4)"};
}

Outcome c4_masking() {
  const MaskingPolicy p;
  const int n = 100000;
  Rng rng(2024);
  double rates[2];
  for (int g = 0; g < 2; ++g)
    rates[g] = static_cast<double>(apply_masking(std::vector<int>(n, 9), std::vector<bool>(n, g == 0), rng, p, 30)
                                       .targets.size()) / n;
  const MaskedText m = apply_masking(std::vector<int>(n, 9), std::vector<bool>(n, true), rng, p, 30);
  std::map<Corruption, double> count;
  for (auto c : m.corruption)
    if (c != Corruption::kNone) count[c] += 1.0;
  const double sel = static_cast<double>(m.targets.size());
  const double mask = count[Corruption::kMask] / sel, rnd = count[Corruption::kRandom] / sel,
               keep = count[Corruption::kKeep] / sel;
  const bool ok = std::abs(rates[0] - 0.4) <= 0.01 && std::abs(rates[1] - 0.1) <= 0.01 && std::abs(mask - 0.8) <= 0.01 &&
                  std::abs(rnd - 0.1) <= 0.01 && std::abs(keep - 0.1) <= 0.01;
  return {ok, "selection groundable " + fmt(rates[0]) + " other " + fmt(rates[1]) + ", split " + fmt(mask) + "/" +
                  fmt(rnd) + "/" + fmt(keep) + " (tol 0.01)"};
}

Outcome c5_word_agnostic_grounding() {
  Desk& d = desk();
  d.run_pretrain();
  const CorpusReport rep = d.eval(d.cfg.model, *d.pretrained, d.split.unseen_test);
  const SliceReport& any = rep.overall(Protocol::kAny);

  // Random proposals: one box drawn from the pretrain object-box pool per
  // instance, 20 draws each.
  std::unordered_map<std::string, const PairRecord*> by_id;
  for (const auto& r : d.corpus) by_id[r.id] = &r;
  BoxSet pool;
  for (const auto& id : d.split.pretrain)
    for (const auto& o : by_id.at(id)->objects) pool.push_back(o.box);
  Rng rng(5);
  double hits = 0, scene_hits = 0, n = 0;
  for (int rep_i = 0; rep_i < 20; ++rep_i)
    for (const auto& inst : d.split.unseen_test) {
      hits += iou_any(inst.gold_boxes, {pool[rng.below(pool.size())]}) > 0.5;
      const auto& objs = by_id.at(inst.pair_id)->objects;
      scene_hits += iou_any(inst.gold_boxes, {objs[rng.below(objs.size())].box}) > 0.5;
      n += 1;
    }
  const double baseline = hits / n;
  const double chance = 1.0 / (d.vocab.size() - Vocabulary::kNumReserved);
  note("in-scene random object rate (information only): " + fmt(scene_hits / n));
  const bool ok = any.acc > 2.0 * baseline && any.hr1 < 2.0 * chance && d.pretrain_seconds <= 7200.0 &&
                  d.cfg.train.steps <= 20000;
  return {ok, "unseen acc(any) " + fmt(any.acc) + " vs 2 x baseline " + fmt(2.0 * baseline) + ", unseen HR@1 " +
                  fmt(any.hr1) + " vs 2 x chance " + fmt(2.0 * chance) + ", " + std::to_string(d.cfg.train.steps) +
                  " steps in " + fmt(d.pretrain_seconds / 60.0, 3) + " min"};
}

Outcome c6_grounding_bootstrap() {
  Desk& d = desk();
  const int ft_steps = kC6Steps / 4;
  bool all = true;
  std::string detail;
  for (int r = 0; r < 3; ++r) {
    RunConfig cfg = d.cfg;
    cfg.train.seed = static_cast<std::uint64_t>(r);
    cfg.init_seed = 1 + static_cast<std::uint64_t>(r);
    TrainConfig tc = train_config(cfg);
    tc.steps = kC6Steps;

    Parameters full;
    if (r == 0 && d.at_c6_steps) {
      full = *d.at_c6_steps;
    } else {
      full = pretrain(cfg.model, tc, d.vocab, d.pairs, init_parameters(cfg.model, init_seed(cfg))).params;
    }

    ModelConfig nog = cfg.model;
    nog.variant = Variant::kNoGrounding;
    Parameters p = pretrain(nog, tc, d.vocab, d.pairs, init_parameters(nog, init_seed(cfg))).params;
    TrainConfig ft = tc;
    ft.steps = ft_steps;
    ft.seed = derive_seed(tc.seed, 51, 0);
    p = pretrain(cfg.model, ft, d.vocab, d.pairs, std::move(p)).params;

    const CorpusReport a = d.eval(cfg.model, full, d.split.seen_test);
    const CorpusReport b = d.eval(cfg.model, p, d.split.seen_test);
    const double ia = a.overall(Protocol::kAny).mean_iou, ib = b.overall(Protocol::kAny).mean_iou;
    note("replicate " + std::to_string(r) + ": seen mean IoU any full " + fmt(ia) + " / no_grounding+ft " + fmt(ib) +
         "; all " + fmt(a.overall(Protocol::kAll).mean_iou) + " / " + fmt(b.overall(Protocol::kAll).mean_iou));
    all = all && ia - ib >= 0.05;
    detail += (r ? ", " : "") + fmt(ia - ib, 3);
  }
  return {all, "full minus no_grounding seen mean IoU (any) at " + std::to_string(kC6Steps) + " steps (+" +
                   std::to_string(ft_steps) + " grounding fine-tune for no_grounding): " + detail + " (need >= 0.05 each)"};
}

Outcome c7_fewshot() {
  Desk& d = desk();
  d.run_pretrain();
  const auto t0 = Clock::now();
  const SessionResult s =
      fewshot_session(d.cfg.model, *d.pretrained, d.session(), fewshot_config(d.cfg), train_config(d.cfg), "c7");
  const double secs = seconds_since(t0);
  auto g = [](const CorpusReport& r) { return r.overall(Protocol::kAll).log_gppl; };
  const double gap = g(s.unseen_pre) - g(s.seen_pre);
  const double closed = (g(s.unseen_pre) - g(s.unseen_post)) / gap;
  const double degrade = g(s.seen_post) - g(s.seen_pre);
  for (const auto& [w, t] : s.trajectory) note(w + ": log G-PPL " + fmt(t.pre) + " -> " + fmt(t.post));
  const bool ok = std::isfinite(gap) && gap > 0 && closed >= 0.5 && degrade <= 1.0 && secs < 300.0;
  return {ok, "unseen log G-PPL (all) " + fmt(g(s.unseen_pre)) + " -> " + fmt(g(s.unseen_post)) + ", gap closed " +
                  fmt(closed, 3) + " (need >= 0.5); seen " + fmt(g(s.seen_pre)) + " -> " + fmt(g(s.seen_post)) +
                  " (need degradation <= 1.0); " + fmt(secs, 3) + " s"};
}

Outcome c8_statistics() {
  Rng rng(99);
  auto noise = [&](Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
    return v;
  };
  auto drop_last = [](const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
    return likelihood_ratio_test(ols_fit(X, y), ols_fit(X.leftCols(X.cols() - 1), y));
  };
  int rejections = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    Eigen::MatrixXd X(60, 3);
    for (int c = 0; c < 3; ++c) X.col(c) = noise(60);
    const Eigen::VectorXd y = 0.7 * X.col(0) + noise(60);
    rejections += drop_last(X, y).p < 0.05;
  }
  const double fpr = rejections / 1000.0;

  Eigen::MatrixXd X(200, 2);
  X.col(0) = noise(200);
  X.col(1) = noise(200);
  const Eigen::VectorXd y = X.col(0) + 0.5 * X.col(1) + noise(200);
  const double planted = drop_last(X, y).p;

  double worst = 0.0;
  for (int k : {1, 2, 3})
    for (int i = 0; i < 50; ++i) {
      const double x = 0.05 + 0.5 * i;
      worst = std::max(worst, std::abs(chi2_sf(x, k) - test::chi2_sf_oracle(x, k)));
    }
  const bool ok = std::abs(fpr - 0.05) <= 0.02 && planted < 1e-3 && worst <= 1e-10;
  return {ok, "null FPR " + fmt(fpr) + " (0.05 +- 0.02), planted p " + fmt(planted, 3) + " (< 1e-3), chi2_sf worst error " +
                  fmt(worst, 3) + " (<= 1e-10)"};
}

Outcome c9_reproducibility() {
  RunConfig cfg = desk_preset();
  cfg.n_pairs = 600;
  cfg.split.seen_per_word = 5;
  cfg.split.unseen_per_word = 5;

  const std::string data_a = corpus_to_jsonl(generate_corpus(cfg.world, cfg.master_seed, cfg.n_pairs));
  const std::string data_b = corpus_to_jsonl(generate_corpus(cfg.world, cfg.master_seed, cfg.n_pairs));
  const bool data_same = data_a == data_b;

  std::istringstream in(data_a);
  const Corpus corpus = corpus_from_jsonl(in);
  const DatasetSplit split = split_dataset(corpus, split_config(cfg));
  const Vocabulary vocab = Vocabulary::from_corpus(corpus);
  cfg.model.vocab_size = vocab.size();
  RasterCache rasters(corpus);
  std::vector<PreparedPair> pairs;
  for (const auto& id : split.pretrain) pairs.push_back(prepare_pair(rasters.record(id), vocab, rasters, true));
  TrainConfig tc = train_config(cfg);
  tc.steps = 10;
  tc.batch_size = 4;
  auto run = [&] { return pretrain(cfg.model, tc, vocab, pairs, init_parameters(cfg.model, init_seed(cfg))); };
  const PretrainResult r1 = run(), r2 = run();
  bool logs_same = r1.log.size() == r2.log.size();
  for (std::size_t i = 0; logs_same && i < r1.log.size(); ++i) {
    auto a = to_json(r1.log[i]), b = to_json(r2.log[i]);
    a.erase("wall_ms");
    b.erase("wall_ms");
    logs_same = a == b;
  }

  const Checkpoint back = decode_checkpoint(encode_checkpoint({cfg.model, vocab.words(), r1.params}), cfg.model);
  bool forward_same = true;
  for (std::size_t i = 0; i < std::min<std::size_t>(8, split.seen_test.size()); ++i) {
    const auto& inst = split.seen_test[i];
    const auto ids = vocab.encode(inst.tokens);
    const ForwardOutput a = forward(cfg.model, r1.params, ids, &rasters.get(inst.pair_id));
    const ForwardOutput b = forward(cfg.model, back.params, ids, &rasters.get(inst.pair_id));
    forward_same = forward_same && a.mlm_logits == b.mlm_logits && a.boxes == b.boxes && a.pos_align == b.pos_align &&
                   a.obj_embed == b.obj_embed && a.tok_embed == b.tok_embed;
  }
  return {data_same && logs_same && forward_same,
          std::string("dataset regeneration ") + (data_same ? "byte-identical" : "DIFFERS") + ", metric logs " +
              (logs_same ? "identical" : "DIFFER") + ", checkpoint round-trip forward " +
              (forward_same ? "bit-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"C1 metric-formula fidelity", c1_metric_identities},
      {"C2 geometry oracles", c2_geometry_oracles},
      {"C3 gradient checks", c3_gradients},
      {"C4 masking-policy statistics", c4_masking},
      {"C5 desk-scale word-agnostic grounding", c5_word_agnostic_grounding},
      {"C6 grounding-objective bootstrapping", c6_grounding_bootstrap},
      {"C7 few-shot acquisition", c7_fewshot},
      {"C8 statistics calibration", c8_statistics},
      {"C9 reproducibility and persistence", c9_reproducibility},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(static_cast<int>(i) + 1)) continue;
    const auto& [name, fn] = criteria[i];
    std::cout << "running " << name << std::endl;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
