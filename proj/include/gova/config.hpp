#pragma once

// Run configuration: every module config in one struct, a sectioned
// key = value text format, and the desk / paper presets.
//
//   # comment
//   master_seed = 42
//   [model]
//   d_model = 64
//
// Keys before the first section header belong to the top level. Lists are
// comma separated. Unknown sections or keys are errors.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gova/error.hpp"
#include "gova/evalsuite.hpp"
#include "gova/model.hpp"
#include "gova/trainer.hpp"

namespace gova {

struct RunConfig {
  std::uint64_t master_seed = 42;
  std::string output_dir;

  WorldConfig world;
  std::size_t n_pairs = 6000;
  SplitConfig split;

  ModelConfig model;  // vocab_size is filled from the dataset
  TrainConfig train;
  int grounding_finetune_steps = 0;
  std::uint64_t init_seed = 1;

  FewShotConfig fewshot;
  ExtractOptions eval;

  std::vector<std::string> predictor_files;
  std::vector<std::string> kl_checkpoints;
};

/// Desk-scale preset used by the acceptance run.
inline RunConfig desk_preset() {
  RunConfig c;
  c.model.d_model = 64;
  c.model.ffn_dim = 256;
  c.model.alignment_dim = 32;
  c.model.n_queries = 8;
  c.train.steps = 5000;
  c.train.batch_size = 16;
  c.train.lr_image = c.train.lr_text = c.train.lr_multimodal = 5e-4;
  c.train.seed = 0;
  c.grounding_finetune_steps = 1250;
  c.fewshot.target_words = c.split.unseen_test_words;
  c.fewshot.seed = 0;
  return c;
}

/// Full-size dimensions and learning rates; far beyond a desk budget.
inline RunConfig paper_preset() {
  RunConfig c = desk_preset();
  c.model = paper_model(0);
  c.model.max_text_len = 256;
  c.n_pairs = 30000;
  c.train.steps = 150000;
  c.train.batch_size = 128;
  c.train.freeze_image = true;
  c.train.lr_image = 0.0;
  c.train.lr_text = 1e-5;
  c.train.lr_multimodal = 1e-4;
  c.grounding_finetune_steps = 37500;
  return c;
}

inline RunConfig preset(const std::string& name) {
  if (name == "desk") return desk_preset();
  if (name == "paper") return paper_preset();
  fail(ErrorKind::kConfig, "unknown preset '" + name + "'");
}

// Every seed in a run is derived from master_seed; the per-module seed
// fields select independent replicates under one master seed.
inline SplitConfig split_config(const RunConfig& c) {
  SplitConfig s = c.split;
  s.seed = derive_seed(c.master_seed, 101, c.split.seed);
  return s;
}
inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t = c.train;
  t.seed = derive_seed(c.master_seed, 102, c.train.seed);
  return t;
}
inline std::uint64_t init_seed(const RunConfig& c) { return derive_seed(c.master_seed, 103, c.init_seed); }
inline FewShotConfig fewshot_config(const RunConfig& c) {
  FewShotConfig f = c.fewshot;
  f.seed = derive_seed(c.master_seed, 104, c.fewshot.seed);
  return f;
}

namespace detail {

struct Field {
  std::string section, key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  require(r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorKind::kConfig,
          "bad value for '" + key + "': '" + s + "'");
  return v;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

class FieldTable {
 public:
  std::vector<Field> fields;
  std::string section;

  template <class T>
  void num(const std::string& key, T& ref) {
    if constexpr (std::is_floating_point_v<T>)
      add(key, [&ref] { return fmt_double(ref); }, [&ref, key](const std::string& s) { ref = parse_number<T>(key, s); });
    else
      add(key, [&ref] { return std::to_string(ref); }, [&ref, key](const std::string& s) { ref = parse_number<T>(key, s); });
  }
  void flag(const std::string& key, bool& ref) {
    add(key, [&ref] { return std::string(ref ? "true" : "false"); }, [&ref, key](const std::string& s) {
      require(s == "true" || s == "false", ErrorKind::kConfig, "bad value for '" + key + "': expected true or false");
      ref = s == "true";
    });
  }
  void str(const std::string& key, std::string& ref) {
    add(key, [&ref] { return ref; }, [&ref](const std::string& s) { ref = s; });
  }
  void list(const std::string& key, std::vector<std::string>& ref) {
    add(key, [&ref] { return join_list(ref); }, [&ref](const std::string& s) { ref = split_list(s); });
  }
  void add(const std::string& key, std::function<std::string()> get, std::function<void(const std::string&)> set) {
    fields.push_back({section, key, std::move(get), std::move(set)});
  }
};

inline FieldTable bind(RunConfig& c) {
  FieldTable t;
  t.num("master_seed", c.master_seed);
  t.str("output_dir", c.output_dir);

  t.section = "world";
  t.num("n_pairs", c.n_pairs);
  t.num("canvas_width", c.world.canvas_width);
  t.num("canvas_height", c.world.canvas_height);
  t.num("min_objects", c.world.min_objects);
  t.num("max_objects", c.world.max_objects);
  t.num("max_pair_iou", c.world.max_pair_iou);
  t.num("min_box_area", c.world.min_box_area);
  t.list("shapes", c.world.shapes);
  t.list("colors", c.world.colors);
  t.list("sizes", c.world.sizes);
  t.list("patterns", c.world.patterns);
  t.num("small_side_lo", c.world.small_side_lo);
  t.num("small_side_hi", c.world.small_side_hi);
  t.num("large_side_lo", c.world.large_side_lo);
  t.num("large_side_hi", c.world.large_side_hi);
  t.num("max_mentions", c.world.max_mentions);
  t.num("max_retries", c.world.max_retries);

  t.section = "split";
  t.list("holdout_words", c.split.holdout_words);
  t.list("unseen_test_words", c.split.unseen_test_words);
  t.list("seen_test_words", c.split.seen_test_words);
  t.num("seen_per_word", c.split.seen_per_word);
  t.num("unseen_per_word", c.split.unseen_per_word);
  t.num("seen_test_fraction", c.split.seen_test_fraction);
  t.num("seed", c.split.seed);

  t.section = "model";
  t.num("d_model", c.model.d_model);
  t.num("n_heads", c.model.n_heads);
  t.num("cross_blocks", c.model.cross_blocks);
  t.num("object_blocks", c.model.object_blocks);
  t.num("text_blocks", c.model.text_blocks);
  t.num("ffn_dim", c.model.ffn_dim);
  t.num("n_queries", c.model.n_queries);
  t.num("max_text_len", c.model.max_text_len);
  t.num("patch_size", c.model.patch_size);
  t.num("alignment_dim", c.model.alignment_dim);
  t.num("temperature", c.model.temperature);
  t.add("variant", [&c] { return std::string(variant_name(c.model.variant)); },
        [&c](const std::string& s) { c.model.variant = parse_variant(s); });
  t.num("init_seed", c.init_seed);

  t.section = "train";
  t.num("steps", c.train.steps);
  t.num("batch_size", c.train.batch_size);
  t.num("lr_image", c.train.lr_image);
  t.num("lr_text", c.train.lr_text);
  t.num("lr_multimodal", c.train.lr_multimodal);
  t.flag("freeze_image", c.train.freeze_image);
  t.num("beta1", c.train.beta1);
  t.num("beta2", c.train.beta2);
  t.num("adam_eps", c.train.adam_eps);
  t.num("clip_norm", c.train.clip_norm);
  t.num("seed", c.train.seed);
  t.num("eval_every", c.train.eval_every);
  t.num("checkpoint_every", c.train.checkpoint_every);
  t.num("w_mlm", c.train.weights.mlm);
  t.num("w_pos", c.train.weights.pos);
  t.num("w_contrast", c.train.weights.contrast);
  t.num("w_l1", c.train.weights.l1);
  t.num("w_giou", c.train.weights.giou);
  t.num("no_object_scale", c.train.weights.no_object_scale);
  t.num("p_groundable", c.train.masking.p_groundable);
  t.num("p_other", c.train.masking.p_other);
  t.num("replace_mask", c.train.masking.replace_mask);
  t.num("replace_random", c.train.masking.replace_random);
  t.num("keep", c.train.masking.keep);
  t.flag("alignment_match_cost", c.train.match.alignment_cost);
  t.num("grounding_finetune_steps", c.grounding_finetune_steps);

  t.section = "fewshot";
  t.num("shots", c.fewshot.shots);
  t.num("steps", c.fewshot.steps);
  t.num("batch_size", c.fewshot.batch_size);
  t.add("mode", [&c] { return std::string(c.fewshot.mode == FewShotMode::kMultiClass ? "multi_class" : "one_class"); },
        [&c](const std::string& s) {
          require(s == "multi_class" || s == "one_class", ErrorKind::kConfig, "fewshot mode must be multi_class or one_class");
          c.fewshot.mode = s == "multi_class" ? FewShotMode::kMultiClass : FewShotMode::kOneClass;
        });
  t.list("target_words", c.fewshot.target_words);
  t.flag("replay", c.fewshot.replay);
  t.num("seed", c.fewshot.seed);

  t.section = "eval";
  t.num("max_no_object", c.eval.max_no_object);
  t.num("min_mask_mass", c.eval.min_mask_mass);
  t.num("topk", c.eval.topk);

  t.section = "analysis";
  t.list("predictor_files", c.predictor_files);
  t.list("kl_checkpoints", c.kl_checkpoints);
  return t;
}

}  // namespace detail

/// Sets one value addressed as "section.key" (or "key" at top level).
inline void set_config_value(RunConfig& c, const std::string& path, const std::string& value) {
  const auto dot = path.find('.');
  const std::string section = dot == std::string::npos ? "" : path.substr(0, dot);
  const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
  auto t = detail::bind(c);
  bool known_section = section.empty();
  for (auto& f : t.fields) {
    if (f.section == section) known_section = true;
    if (f.section == section && f.key == key) return f.set(value);
  }
  fail(ErrorKind::kConfig, known_section ? "unknown key '" + path + "'" : "unknown section '" + section + "'");
}

/// Applies a config text on top of `c`.
inline void apply_config_text(RunConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        require(line.back() == ']', ErrorKind::kConfig, "malformed section header");
        section = detail::trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      require(eq != std::string::npos, ErrorKind::kConfig, "expected key = value");
      const std::string key = detail::trim(line.substr(0, eq));
      set_config_value(c, section.empty() ? key : section + "." + key, detail::trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(e.kind(), "config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

/// Canonical text of the effective config; parses back to the same values.
inline std::string config_text(const RunConfig& c) {
  RunConfig copy = c;
  auto t = detail::bind(copy);
  std::string out, section;
  for (const auto& f : t.fields) {
    if (f.section != section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace gova
