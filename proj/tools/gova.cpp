// gova: command-line driver over the library.
//
//   gova gen-data  --out DIR
//   gova pretrain  --data DIR --out DIR
//   gova eval      --data DIR --checkpoint FILE --split seen_test|unseen_test --out DIR
//   gova fewshot   --data DIR --checkpoint FILE --out DIR
//   gova analyze   --data DIR --model-dump FILE --text-dump FILE --out DIR
//
// Value precedence: preset < --config file < --set overrides < --seed.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>

#include "gova/analysis.hpp"
#include "gova/config.hpp"
#include "gova/trainer.hpp"

namespace fs = std::filesystem;
using namespace gova;

namespace {

struct Common {
  std::string config_file;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  bool overwrite = false;
  std::vector<std::string> sets;
};

struct Args {
  std::string data, checkpoint, split = "seen_test", model_dump, text_dump, label = "full";
};

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

std::string file_hash(const fs::path& p) {
  const std::string bytes = read_file(p);
  return hex(detail::fnv1a(bytes, bytes.size()));
}

// Holds DIR/.lock for the lifetime of a command.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    require(fd_ >= 0, ErrorKind::kIo, "output directory is locked by another run: " + path_.string());
  }
  ~OutputLock() {
    ::close(fd_);
    fs::remove(path_);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

RunConfig resolve_config(const Common& c, const std::string& command) {
  RunConfig cfg = preset(c.preset);
  bool seed_given = false;
  if (!c.config_file.empty()) {
    const std::string text = read_file(c.config_file);
    apply_config_text(cfg, text);
    RunConfig probe = preset(c.preset);
    probe.master_seed = cfg.master_seed + 1;
    apply_config_text(probe, text);
    seed_given = probe.master_seed == cfg.master_seed;
  }
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorKind::kConfig, "--set expects section.key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
    if (detail::trim(kv.substr(0, eq)) == "master_seed") seed_given = true;
  }
  if (c.seed) {
    cfg.master_seed = *c.seed;
    seed_given = true;
  }
  if (!seed_given) {
    cfg.master_seed = (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
    std::cout << "seed: " << cfg.master_seed << " (drawn; pass --seed to pin)\n";
  }
  if (!c.out.empty()) {
    cfg.output_dir = c.out;
  } else if (cfg.output_dir.empty()) {
    const char* root = std::getenv("GOVA_OUT_ROOT");
    cfg.output_dir = (fs::path(root ? root : "runs") / command).string();
  }
  return cfg;
}

void prepare_output(const RunConfig& cfg, bool overwrite) {
  const fs::path dir = cfg.output_dir;
  if (fs::exists(dir) && !overwrite)
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().filename() != ".lock")
        fail(ErrorKind::kIo, "output directory " + dir.string() + " is not empty; pass --overwrite");
}

void echo_config(const RunConfig& cfg) { std::cout << "# effective config\n" << config_text(cfg) << "# end config\n"; }

struct Dataset {
  Corpus corpus;
  DatasetSplit split;
  Vocabulary vocab;
};

Dataset load_dataset(const fs::path& dir) {
  require(!dir.empty(), ErrorKind::kConfig, "--data is required");
  Dataset d;
  const fs::path file = dir / "dataset.jsonl";
  const std::string hash = file_hash(file);
  std::cout << "dataset: " << file.string() << " fnv1a=" << hash << "\n";
  d.corpus = load_external(file);
  d.split.pretrain = read_id_list(dir / "splits" / "pretrain.json");
  d.split.unseen_train = read_id_list(dir / "splits" / "unseen_train.json");
  d.split.seen_test = resolve_instances(d.corpus, read_id_list(dir / "splits" / "seen_test.json"));
  d.split.unseen_test = resolve_instances(d.corpus, read_id_list(dir / "splits" / "unseen_test.json"));
  d.vocab = Vocabulary::from_corpus(d.corpus);
  return d;
}

Checkpoint load_checked(const fs::path& path) {
  require(!path.empty(), ErrorKind::kConfig, "--checkpoint is required");
  const std::string hash = file_hash(path);
  std::cout << "checkpoint: " << path.string() << " fnv1a=" << hash << "\n";
  return load_checkpoint(path);
}

const std::vector<ClozeInstance>& pick_split(const Dataset& d, const std::string& name) {
  if (name == "seen_test") return d.split.seen_test;
  if (name == "unseen_test") return d.split.unseen_test;
  fail(ErrorKind::kConfig, "unknown split '" + name + "' (seen_test or unseen_test)");
}

void cmd_gen_data(const RunConfig& cfg) {
  const fs::path out = cfg.output_dir;
  const Corpus corpus = generate_corpus(cfg.world, cfg.master_seed, cfg.n_pairs);
  const DatasetSplit split = split_dataset(corpus, split_config(cfg));
  const auto leaks = audit_holdout(corpus, split.pretrain, cfg.split.holdout_words);
  write_dataset(corpus, out / "dataset.jsonl");
  write_split_manifests(split, out / "splits");
  std::cout << "pairs " << corpus.size() << " pretrain " << split.pretrain.size() << " unseen_train "
            << split.unseen_train.size() << " seen_test " << split.seen_test.size() << " unseen_test "
            << split.unseen_test.size() << "\n";
  for (const auto& s : split.dropped_seen_words)
    std::cout << "dropped seen word " << s.word << " (" << s.available << " of " << s.required << ")\n";
  std::cout << "holdout audit: " << (leaks.empty() ? "ok" : "FAILED") << "\n";
  std::cout << "dataset fnv1a=" << file_hash(out / "dataset.jsonl") << "\n";
  require(leaks.empty(), ErrorKind::kIntegrity, "held-out words leaked into pretrain pairs");
}

void cmd_pretrain(RunConfig cfg, const Args& a) {
  const Dataset d = load_dataset(a.data);
  require_holdout_sound(d.corpus, d.split, cfg.split.holdout_words);
  RasterCache rasters(d.corpus, a.data);
  cfg.model.vocab_size = d.vocab.size();
  std::vector<PreparedPair> pairs;
  for (const auto& id : d.split.pretrain)
    pairs.push_back(prepare_pair(rasters.record(id), d.vocab, rasters, has_image(cfg.model.variant)));

  const fs::path out = cfg.output_dir;
  ModelConfig mcfg = cfg.model;
  const TrainConfig tc = train_config(cfg);
  Parameters params = pretrain(mcfg, tc, d.vocab, pairs, init_parameters(mcfg, init_seed(cfg)), {out, "pretrain"}).params;
  if (cfg.grounding_finetune_steps > 0 && mcfg.variant == Variant::kNoGrounding) {
    mcfg.variant = Variant::kFull;
    TrainConfig ft = tc;
    ft.steps = cfg.grounding_finetune_steps;
    ft.seed = derive_seed(tc.seed, 51, 0);
    params = pretrain(mcfg, ft, d.vocab, pairs, std::move(params), {out, "grounding_ft"}).params;
  }
  save_checkpoint({mcfg, d.vocab.words(), params}, out / "model.ckpt");
  std::cout << "steps " << params.step_count << " model " << (out / "model.ckpt").string()
            << " fnv1a=" << file_hash(out / "model.ckpt") << "\n";
}

void cmd_eval(const RunConfig& cfg, const Args& a) {
  const Dataset d = load_dataset(a.data);
  const Checkpoint ck = load_checked(a.checkpoint);
  require(ck.vocab == d.vocab.words(), ErrorKind::kCheckpoint, "checkpoint vocabulary differs from the dataset");
  RasterCache rasters(d.corpus, a.data);
  const auto& instances = pick_split(d, a.split);
  const Evaluation ev = evaluate(ck.config, ck.params, d.vocab, instances, rasters, cfg.eval);
  const fs::path out = cfg.output_dir;
  dump_predictions(ev.predictions, out / ("predictions_" + a.split + ".jsonl"));
  atomic_write(out / ("report_" + a.split + ".csv"), report_csv(ev.report));
  for (Protocol p : {Protocol::kAny, Protocol::kAll}) {
    const auto& r = ev.report.overall(p);
    std::cout << protocol_name(p) << ": n " << r.n << " hr1 " << r.hr1 << " log_ppl " << r.log_ppl << " mean_iou "
              << r.mean_iou << " acc " << r.acc << " log_gppl " << format_real(r.log_gppl) << "\n";
  }
}

void cmd_fewshot(const RunConfig& cfg, const Args& a) {
  Dataset d = load_dataset(a.data);
  const Checkpoint ck = load_checked(a.checkpoint);
  require(ck.vocab == d.vocab.words(), ErrorKind::kCheckpoint, "checkpoint vocabulary differs from the dataset");
  RasterCache rasters(d.corpus, a.data);
  SessionData sd{&d.corpus, &d.split, &d.vocab, &rasters};
  const auto results = run_fewshot(ck.config, ck.params, sd, fewshot_config(cfg), train_config(cfg));
  const fs::path out = cfg.output_dir;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    arr.push_back(to_json(r));
    save_checkpoint({ck.config, d.vocab.words(), r.params}, out / (r.label + ".ckpt"));
    for (const auto& [w, t] : r.trajectory)
      std::cout << r.label << " " << w << " log_gppl " << format_real(t.pre) << " -> " << format_real(t.post) << "\n";
  }
  atomic_write(out / "sessions.json", arr.dump(2) + "\n");
}

void cmd_analyze(const RunConfig& cfg, const Args& a) {
  const Dataset d = load_dataset(a.data);
  require(!a.model_dump.empty() && !a.text_dump.empty(), ErrorKind::kConfig, "--model-dump and --text-dump are required");
  const auto& instances = pick_split(d, a.split);
  const CorpusReport model = score_dump(a.model_dump, instances);
  const CorpusReport text = score_dump(a.text_dump, instances);
  PredictorTable table = compute_predictors(d.corpus, d.split, d.vocab, model, text);
  for (const auto& f : cfg.predictor_files) ingest_predictor_csv(table, fs::path(f));
  const RegressionReport rep = regress(table, a.label);
  const fs::path out = cfg.output_dir;
  atomic_write(out / "predictors.csv", predictor_table_csv(table));
  emit_analysis({rep}, out);
  std::cout << "words " << table.words.size() << " regressions " << rep.rows.size() << "\n";
  for (const auto& [outcome, n] : rep.excluded) std::cout << "excluded from " << outcome << ": " << n << "\n";

  if (!cfg.kl_checkpoints.empty()) {
    RasterCache rasters(d.corpus, a.data);
    std::vector<std::pair<std::int64_t, Parameters>> cks;
    ModelConfig mcfg;
    for (const auto& f : cfg.kl_checkpoints) {
      Checkpoint ck = load_checked(f);
      mcfg = ck.config;
      cks.emplace_back(ck.params.step_count, std::move(ck.params));
    }
    const auto unigram = unigram_distribution(d.corpus, d.split.pretrain, d.vocab);
    atomic_write(out / "kl.csv", kl_csv(kl_vs_unigram(mcfg, cks, instances, d.vocab, rasters, unigram)));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gova: grounded word acquisition toolkit"};
  app.require_subcommand(1);
  Common c;
  Args a;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config_file, "key = value config file");
    sub->add_option("--preset", c.preset, "base preset")->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--seed", c.seed, "master seed");
    sub->add_option("--out", c.out, "output directory (default $GOVA_OUT_ROOT/<command>)");
    sub->add_flag("--overwrite", c.overwrite, "allow writing into a non-empty output directory");
    sub->add_option("--set", c.sets, "override one value, section.key=value");
  };
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus and split manifests");
  auto* pre = app.add_subcommand("pretrain", "grounded pre-training");
  auto* ev = app.add_subcommand("eval", "prediction dump and corpus report for one split");
  auto* few = app.add_subcommand("fewshot", "few-shot word acquisition sessions");
  auto* ana = app.add_subcommand("analyze", "predictor regressions and KL curve");
  for (auto* s : {gen, pre, ev, few, ana}) add_common(s);
  for (auto* s : {pre, ev, few, ana}) s->add_option("--data", a.data, "gen-data output directory")->required();
  for (auto* s : {ev, few}) s->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required();
  for (auto* s : {ev, ana}) s->add_option("--split", a.split, "seen_test or unseen_test");
  ana->add_option("--model-dump", a.model_dump, "prediction dump of the grounded model")->required();
  ana->add_option("--text-dump", a.text_dump, "prediction dump of the text-only model")->required();
  ana->add_option("--label", a.label, "variant label for the regression rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error[usage]: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    const RunConfig cfg = resolve_config(c, name);
    prepare_output(cfg, c.overwrite);
    OutputLock lock(cfg.output_dir);
    echo_config(cfg);
    if (name == "gen-data") cmd_gen_data(cfg);
    else if (name == "pretrain") cmd_pretrain(cfg, a);
    else if (name == "eval") cmd_eval(cfg, a);
    else if (name == "fewshot") cmd_fewshot(cfg, a);
    else cmd_analyze(cfg, a);
    atomic_write(fs::path(cfg.output_dir) / "config.ini", config_text(cfg));
  } catch (const Error& e) {
    std::cerr << "error[" << to_string(e.kind()) << "]: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error[io]: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
