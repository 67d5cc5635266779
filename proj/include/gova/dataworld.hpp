#pragma once

// Synthetic grounded-caption world: scene generation, rendering, templated
// captions with exact phrase-to-box alignment, cloze curation, seen/unseen
// splitting and JSONL persistence.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gova/error.hpp"
#include "gova/geometry.hpp"
#include "gova/rng.hpp"

namespace gova {

enum class Role { kNoun, kAdj, kOther };

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::kNoun: return "NOUN";
    case Role::kAdj: return "ADJ";
    case Role::kOther: return "OTHER";
  }
  return "OTHER";
}

inline Role parse_role(std::string_view s) {
  if (s == "NOUN") return Role::kNoun;
  if (s == "ADJ") return Role::kAdj;
  if (s == "OTHER") return Role::kOther;
  fail(ErrorKind::kParse, "unknown role '" + std::string(s) + "'");
}

inline bool groundable_role(Role r) { return r == Role::kNoun || r == Role::kAdj; }

struct WorldConfig {
  int canvas_width = 64;
  int canvas_height = 64;
  int min_objects = 2;
  int max_objects = 6;
  double max_pair_iou = 0.3;
  double min_box_area = 0.01;
  std::vector<std::string> shapes{"circle", "square", "triangle", "diamond", "cross", "star"};
  std::vector<std::string> colors{"red", "green", "blue", "yellow", "purple", "white"};
  std::vector<std::string> sizes{"small", "large"};
  std::vector<std::string> patterns{"plain", "striped", "dotted"};
  // Box side ranges (fraction of the canvas) for the two size classes.
  double small_side_lo = 0.16, small_side_hi = 0.24;
  double large_side_lo = 0.30, large_side_hi = 0.42;
  int max_mentions = 3;
  int max_retries = 200;
};

struct ObjectSpec {
  int id = 0;
  std::string shape, color, size, pattern;
  Box box;
  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int width = 0, height = 0;
  std::vector<ObjectSpec> objects;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Phrase {
  int start = 0, end = 0;  // token span [start, end)
  std::vector<Role> roles;  // one per token in the span
  std::vector<int> box_ids;
  friend bool operator==(const Phrase&, const Phrase&) = default;
};

struct GroundedCaption {
  std::vector<std::string> tokens;
  std::vector<Phrase> phrases;
  friend bool operator==(const GroundedCaption&, const GroundedCaption&) = default;

  /// Role of every token; tokens outside phrases are OTHER.
  std::vector<Role> token_roles() const {
    std::vector<Role> r(tokens.size(), Role::kOther);
    for (const Phrase& p : phrases)
      for (int i = p.start; i < p.end; ++i) r[static_cast<std::size_t>(i)] = p.roles[static_cast<std::size_t>(i - p.start)];
    return r;
  }
};

/// One image-caption pair as stored in the dataset JSONL.
struct PairRecord {
  std::string id;
  int width = 0, height = 0;
  std::vector<ObjectSpec> objects;
  GroundedCaption caption;
  std::optional<std::string> image_path;
  friend bool operator==(const PairRecord&, const PairRecord&) = default;

  const ObjectSpec* object(int box_id) const {
    for (const ObjectSpec& o : objects)
      if (o.id == box_id) return &o;
    return nullptr;
  }
};

using Corpus = std::vector<PairRecord>;

inline constexpr std::string_view kMaskToken = "[MASK]";

/// A masked test item: exactly one groundable word replaced by MASK.
struct ClozeInstance {
  std::string instance_id;
  std::string pair_id;
  std::vector<std::string> tokens;  // tokens[mask_position] == kMaskToken
  int mask_position = 0;
  std::string target_word;
  Role word_role = Role::kNoun;
  BoxSet gold_boxes;
  std::vector<int> gold_box_ids;
  int phrase_start = 0, phrase_end = 0;
};

struct ImageRaster {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
  friend bool operator==(const ImageRaster&, const ImageRaster&) = default;

  std::uint8_t at(int x, int y, int c) const {
    return rgb[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3 +
               static_cast<std::size_t>(c)];
  }
};

inline std::string plural_of(const std::string& noun) {
  if (!noun.empty() && (noun.back() == 's' || noun.back() == 'x')) return noun + "es";
  return noun + "s";
}

// ---------------------------------------------------------------------------
// Scene generation and rendering

inline SceneSpec generate_scene(std::uint64_t seed, const WorldConfig& cfg) {
  require(cfg.min_objects >= 2 && cfg.max_objects >= cfg.min_objects, ErrorKind::kConfig,
          "world: need 2 <= min_objects <= max_objects");
  require(!cfg.shapes.empty() && !cfg.colors.empty() && !cfg.sizes.empty() && !cfg.patterns.empty(),
          ErrorKind::kConfig, "world: empty attribute inventory");
  Rng rng(seed);
  auto pick = [&](const std::vector<std::string>& v) { return v[rng.below(v.size())]; };
  const int n = cfg.min_objects + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
  const double snap_x = cfg.canvas_width, snap_y = cfg.canvas_height;

  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    SceneSpec scene{seed, cfg.canvas_width, cfg.canvas_height, {}};
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      ObjectSpec o;
      o.id = i;
      o.shape = pick(cfg.shapes);
      o.color = pick(cfg.colors);
      o.size = pick(cfg.sizes);
      o.pattern = pick(cfg.patterns);
      if (i == 1) {
        // distractor: shares shape or color with the first object
        if (rng.bernoulli(0.5)) o.shape = scene.objects[0].shape;
        else o.color = scene.objects[0].color;
      }
      const bool large = cfg.sizes.size() > 1 && o.size == cfg.sizes.back();
      const double lo = large ? cfg.large_side_lo : cfg.small_side_lo;
      const double hi = large ? cfg.large_side_hi : cfg.small_side_hi;
      ok = false;
      for (int place = 0; place < 50 && !ok; ++place) {
        const double w = rng.uniform(lo, hi);
        const double h = std::clamp(w * rng.uniform(0.85, 1.15), lo, hi);
        const double x0 = rng.uniform(0.0, 1.0 - w), y0 = rng.uniform(0.0, 1.0 - h);
        Box b{std::round(x0 * snap_x) / snap_x, std::round(y0 * snap_y) / snap_y,
              std::round((x0 + w) * snap_x) / snap_x, std::round((y0 + h) * snap_y) / snap_y};
        b.x1 = std::min(b.x1, 1.0);
        b.y1 = std::min(b.y1, 1.0);
        if (b.area() < cfg.min_box_area) continue;
        bool clear = true;
        for (const ObjectSpec& other : scene.objects)
          if (iou(b, other.box) > cfg.max_pair_iou) clear = false;
        if (clear) {
          o.box = b;
          ok = true;
        }
      }
      if (ok) scene.objects.push_back(std::move(o));
    }
    if (ok) return scene;
  }
  fail(ErrorKind::kGeneration, "scene generation failed after " + std::to_string(cfg.max_retries) + " retries");
}

namespace detail {

inline std::array<std::uint8_t, 3> palette(const std::string& color) {
  static const std::map<std::string, std::array<std::uint8_t, 3>> table{
      {"red", {220, 40, 40}},     {"green", {40, 190, 60}},   {"blue", {50, 90, 235}},
      {"yellow", {235, 220, 50}}, {"purple", {150, 60, 205}}, {"white", {240, 240, 240}},
      {"orange", {245, 140, 30}}, {"pink", {245, 150, 200}},  {"brown", {140, 90, 40}},
      {"gray", {140, 140, 140}},  {"black", {10, 10, 10}},    {"cyan", {40, 220, 220}}};
  if (auto it = table.find(color); it != table.end()) return it->second;
  // Unknown colors hash to a stable RGB triple.
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char ch : color) h = (h ^ ch) * 0x100000001B3ull;
  h = splitmix64(h);
  return {static_cast<std::uint8_t>(64 + (h & 0x7F)), static_cast<std::uint8_t>(64 + ((h >> 8) & 0x7F)),
          static_cast<std::uint8_t>(64 + ((h >> 16) & 0x7F))};
}

inline bool inside_star(double u, double v) {
  // Five-pointed star, point up, outer radius 1, inner radius 0.45.
  std::array<std::array<double, 2>, 10> poly{};
  for (int k = 0; k < 10; ++k) {
    const double r = (k % 2 == 0) ? 1.0 : 0.45;
    const double a = -std::numbers::pi / 2 + k * std::numbers::pi / 5;
    poly[static_cast<std::size_t>(k)] = {r * std::cos(a), r * std::sin(a)};
  }
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& pi = poly[i];
    const auto& pj = poly[j];
    if ((pi[1] > v) != (pj[1] > v) && u < (pj[0] - pi[0]) * (v - pi[1]) / (pj[1] - pi[1]) + pi[0]) in = !in;
  }
  return in;
}

// (u, v) in [-1, 1]^2 box-local coordinates, v pointing down.
inline bool inside_shape(const std::string& shape, double u, double v) {
  if (shape == "circle") return u * u + v * v <= 1.0;
  if (shape == "triangle") return std::abs(u) <= (v + 1.0) / 2.0;
  if (shape == "diamond") return std::abs(u) + std::abs(v) <= 1.0;
  if (shape == "cross") return std::abs(u) <= 0.36 || std::abs(v) <= 0.36;
  if (shape == "star") return inside_star(u, v);
  return true;  // square and anything unknown fill the box
}

}  // namespace detail

inline constexpr std::array<std::uint8_t, 3> kBackground{32, 32, 32};

/// Deterministic rasterization: objects painted in id order at pixel centers
/// inside their boxes.
inline ImageRaster render_scene(int width, int height, const std::vector<ObjectSpec>& objects) {
  require(width > 0 && height > 0, ErrorKind::kContract, "render: empty canvas");
  ImageRaster img{width, height, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3)};
  for (std::size_t p = 0; p < img.rgb.size(); p += 3) std::copy(kBackground.begin(), kBackground.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>(p));
  for (const ObjectSpec& o : objects) {
    const auto col = detail::palette(o.color);
    const double bw = o.box.width(), bh = o.box.height();
    if (!(bw > 0 && bh > 0)) continue;
    for (int y = 0; y < height; ++y) {
      const double cy = (y + 0.5) / height;
      if (cy < o.box.y0 || cy >= o.box.y1) continue;
      for (int x = 0; x < width; ++x) {
        const double cx = (x + 0.5) / width;
        if (cx < o.box.x0 || cx >= o.box.x1) continue;
        const double u = 2.0 * (cx - o.box.x0) / bw - 1.0, v = 2.0 * (cy - o.box.y0) / bh - 1.0;
        if (!detail::inside_shape(o.shape, u, v)) continue;
        bool dark = false;
        if (o.pattern == "striped") dark = (y / 2) % 2 == 1;
        else if (o.pattern == "dotted") dark = (x % 3 == 1) && (y % 3 == 1);
        std::uint8_t* px = &img.rgb[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3];
        for (int c = 0; c < 3; ++c) px[c] = dark ? static_cast<std::uint8_t>(col[static_cast<std::size_t>(c)] / 3) : col[static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

inline ImageRaster render_scene(const SceneSpec& s) { return render_scene(s.width, s.height, s.objects); }

// ---------------------------------------------------------------------------
// Captions

/// Templated caption mentioning 1..max_mentions objects. Each phrase is
/// "a [size] color [pattern] shape" or "the two color shapes".
inline GroundedCaption generate_caption(const SceneSpec& scene, std::uint64_t seed, const WorldConfig& cfg) {
  require(!scene.objects.empty(), ErrorKind::kContract, "caption: scene has no objects");
  Rng rng(seed);
  std::vector<int> order(scene.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  const int mentions = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min<int>(cfg.max_mentions, static_cast<int>(order.size())))));

  struct Mention {
    std::vector<int> objects;
  };
  std::vector<Mention> chosen;
  std::vector<bool> used(scene.objects.size(), false);
  for (int idx : order) {
    if (static_cast<int>(chosen.size()) == mentions) break;
    if (used[static_cast<std::size_t>(idx)]) continue;
    used[static_cast<std::size_t>(idx)] = true;
    Mention m{{idx}};
    const ObjectSpec& o = scene.objects[static_cast<std::size_t>(idx)];
    for (std::size_t j = 0; j < scene.objects.size(); ++j) {
      const ObjectSpec& t = scene.objects[j];
      if (!used[j] && t.shape == o.shape && t.color == o.color && rng.bernoulli(0.7)) {
        used[j] = true;
        m.objects.push_back(static_cast<int>(j));
        break;
      }
    }
    chosen.push_back(std::move(m));
  }

  GroundedCaption cap;
  auto emit = [&](const std::string& w) { cap.tokens.push_back(w); };
  auto emit_phrase = [&](const Mention& m) {
    Phrase p;
    p.start = static_cast<int>(cap.tokens.size());
    const ObjectSpec& o = scene.objects[static_cast<std::size_t>(m.objects.front())];
    if (m.objects.size() == 2) {
      emit("the");
      emit("two");
      p.roles = {Role::kOther, Role::kOther};
      emit(o.color);
      p.roles.push_back(Role::kAdj);
      emit(plural_of(o.shape));
      p.roles.push_back(Role::kNoun);
    } else {
      emit("a");
      p.roles = {Role::kOther};
      if (rng.bernoulli(0.5)) {
        emit(o.size);
        p.roles.push_back(Role::kAdj);
      }
      emit(o.color);
      p.roles.push_back(Role::kAdj);
      if (rng.bernoulli(0.5)) {
        emit(o.pattern);
        p.roles.push_back(Role::kAdj);
      }
      emit(o.shape);
      p.roles.push_back(Role::kNoun);
    }
    p.end = static_cast<int>(cap.tokens.size());
    for (int obj : m.objects) p.box_ids.push_back(scene.objects[static_cast<std::size_t>(obj)].id);
    cap.phrases.push_back(std::move(p));
  };

  if (chosen.size() == 1) {
    emit("there");
    emit("is");
    emit_phrase(chosen[0]);
  } else {
    emit_phrase(chosen[0]);
    const Box& a = scene.objects[static_cast<std::size_t>(chosen[0].objects.front())].box;
    const Box& b = scene.objects[static_cast<std::size_t>(chosen[1].objects.front())].box;
    const double dx = (b.x0 + b.x1) / 2 - (a.x0 + a.x1) / 2, dy = (b.y0 + b.y1) / 2 - (a.y0 + a.y1) / 2;
    if (std::abs(dx) >= std::abs(dy)) {
      emit(dx > 0 ? "left" : "right");
      emit("of");
    } else {
      emit(dy > 0 ? "above" : "below");
    }
    emit_phrase(chosen[1]);
    for (std::size_t k = 2; k < chosen.size(); ++k) {
      emit("and");
      emit_phrase(chosen[k]);
    }
  }
  return cap;
}

/// Checks the caption invariants against its scene; throws on violation.
inline void validate_caption(const GroundedCaption& cap, const std::vector<ObjectSpec>& objects) {
  const int n = static_cast<int>(cap.tokens.size());
  std::vector<int> cover(static_cast<std::size_t>(n), 0);
  for (const Phrase& p : cap.phrases) {
    require(0 <= p.start && p.start < p.end && p.end <= n, ErrorKind::kIntegrity, "phrase span out of range");
    require(static_cast<int>(p.roles.size()) == p.end - p.start, ErrorKind::kIntegrity, "phrase roles/span length mismatch");
    require(!p.box_ids.empty(), ErrorKind::kIntegrity, "phrase without box ids");
    for (int id : p.box_ids) {
      const bool found = std::any_of(objects.begin(), objects.end(), [&](const ObjectSpec& o) { return o.id == id; });
      require(found, ErrorKind::kIntegrity, "phrase box_id " + std::to_string(id) + " does not resolve to an object");
    }
    for (int i = p.start; i < p.end; ++i) ++cover[static_cast<std::size_t>(i)];
  }
  for (int c : cover) require(c <= 1, ErrorKind::kIntegrity, "overlapping phrase spans");
}

/// One instance per NOUN/ADJ token inside a groundable phrase.
inline std::vector<ClozeInstance> curate_cloze(const PairRecord& rec) {
  std::vector<ClozeInstance> out;
  for (const Phrase& p : rec.caption.phrases) {
    BoxSet gold;
    for (int id : p.box_ids) {
      const ObjectSpec* o = rec.object(id);
      require(o != nullptr, ErrorKind::kIntegrity, "record " + rec.id + ": dangling box_id " + std::to_string(id));
      gold.push_back(o->box);
    }
    for (int i = p.start; i < p.end; ++i) {
      const Role role = p.roles[static_cast<std::size_t>(i - p.start)];
      if (!groundable_role(role)) continue;
      ClozeInstance c;
      c.instance_id = rec.id + ":" + std::to_string(i);
      c.pair_id = rec.id;
      c.tokens = rec.caption.tokens;
      c.target_word = c.tokens[static_cast<std::size_t>(i)];
      c.tokens[static_cast<std::size_t>(i)] = std::string(kMaskToken);
      c.mask_position = i;
      c.word_role = role;
      c.gold_boxes = gold;
      c.gold_box_ids = p.box_ids;
      c.phrase_start = p.start;
      c.phrase_end = p.end;
      out.push_back(std::move(c));
    }
  }
  return out;
}

inline std::string pair_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%06zu", index);
  return buf;
}

/// Corpus of `n_pairs` records; a pure function of (cfg, master_seed).
inline Corpus generate_corpus(const WorldConfig& cfg, std::uint64_t master_seed, std::size_t n_pairs) {
  Corpus corpus;
  corpus.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const SceneSpec scene = generate_scene(derive_seed(master_seed, 1, i), cfg);
    PairRecord r;
    r.id = pair_id(i);
    r.width = scene.width;
    r.height = scene.height;
    r.objects = scene.objects;
    r.caption = generate_caption(scene, derive_seed(master_seed, 2, i), cfg);
    corpus.push_back(std::move(r));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Word-level closed vocabulary. Ids 0..3 are reserved.
class Vocabulary {
 public:
  static constexpr int kPad = 0, kMask = 1, kUnk = 2, kNoObj = 3;
  static constexpr int kNumReserved = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const char* r : {"[PAD]", "[MASK]", "[UNK]", "[NOOBJ]"}) add(r);
    std::vector<std::string> sorted = words;
    std::sort(sorted.begin(), sorted.end());
    for (const std::string& w : sorted) add(w);
  }

  /// Every token of every caption, plus any extra words.
  static Vocabulary from_corpus(const Corpus& corpus, const std::vector<std::string>& extra = {}) {
    std::set<std::string> s(extra.begin(), extra.end());
    for (const PairRecord& r : corpus) s.insert(r.caption.tokens.begin(), r.caption.tokens.end());
    for (const char* r : {"[PAD]", "[MASK]", "[UNK]", "[NOOBJ]"}) s.erase(r);
    return Vocabulary(std::vector<std::string>(s.begin(), s.end()));
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& w) const { return index_.count(w) > 0; }
  const std::vector<std::string>& words() const { return words_; }
  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }
  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) return;
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Splits

struct SplitConfig {
  std::vector<std::string> holdout_words{"star", "stars", "purple", "dotted"};
  std::vector<std::string> unseen_test_words{"star", "purple", "dotted"};
  // Empty: every seen groundable word with enough instances.
  std::vector<std::string> seen_test_words;
  int seen_per_word = 80;
  int unseen_per_word = 50;
  double seen_test_fraction = 0.15;
  std::uint64_t seed = 0;
};

struct Shortfall {
  std::string word;
  int available = 0, required = 0;
};

struct DatasetSplit {
  std::vector<std::string> pretrain;      // pair ids
  std::vector<std::string> unseen_train;  // pair ids
  std::vector<ClozeInstance> seen_test;
  std::vector<ClozeInstance> unseen_test;
  std::vector<Shortfall> dropped_seen_words;  // auto mode only
};

inline bool mentions_any(const PairRecord& r, const std::set<std::string>& words) {
  return std::any_of(r.caption.tokens.begin(), r.caption.tokens.end(), [&](const std::string& t) { return words.count(t) > 0; });
}

/// Pretrain captions containing any held-out word. Empty means sound.
inline std::vector<std::string> audit_holdout(const Corpus& corpus, const std::vector<std::string>& pretrain_ids,
                                              const std::vector<std::string>& holdout) {
  const std::set<std::string> ids(pretrain_ids.begin(), pretrain_ids.end());
  const std::set<std::string> words(holdout.begin(), holdout.end());
  std::vector<std::string> leaks;
  for (const PairRecord& r : corpus)
    if (ids.count(r.id) && mentions_any(r, words)) leaks.push_back(r.id);
  return leaks;
}

namespace detail {

inline std::string shortfall_message(const std::vector<Shortfall>& s) {
  std::string msg = "insufficient test instances:";
  for (const auto& x : s)
    msg += " " + x.word + " (" + std::to_string(x.available) + "/" + std::to_string(x.required) + ")";
  return msg;
}

// Picks exactly `n` instances per word (deterministically) from `pool`.
inline std::vector<ClozeInstance> balanced_sample(const std::vector<ClozeInstance>& pool, const std::vector<std::string>& words,
                                                  int n, Rng& rng, std::vector<Shortfall>& short_out) {
  std::vector<ClozeInstance> out;
  for (const std::string& w : words) {
    std::vector<const ClozeInstance*> cands;
    for (const auto& c : pool)
      if (c.target_word == w) cands.push_back(&c);
    if (static_cast<int>(cands.size()) < n) {
      short_out.push_back({w, static_cast<int>(cands.size()), n});
      continue;
    }
    rng.shuffle(cands);
    cands.resize(static_cast<std::size_t>(n));
    std::sort(cands.begin(), cands.end(), [](auto* a, auto* b) { return a->instance_id < b->instance_id; });
    for (auto* c : cands) out.push_back(*c);
  }
  return out;
}

}  // namespace detail

/// Pretrain / unseen-train / seen-test / unseen-test split. No pretrain
/// caption contains a held-out word; test splits hold exactly the configured
/// number of instances per test word; all four are disjoint by pair id.
inline DatasetSplit split_dataset(const Corpus& corpus, const SplitConfig& cfg) {
  const std::set<std::string> holdout(cfg.holdout_words.begin(), cfg.holdout_words.end());
  for (const auto& w : cfg.unseen_test_words)
    require(holdout.count(w) > 0, ErrorKind::kConfig, "unseen test word '" + w + "' is not held out");
  Rng rng(derive_seed(cfg.seed, 11, 0));

  std::vector<const PairRecord*> seen_pool, unseen_pool;
  for (const PairRecord& r : corpus) (mentions_any(r, holdout) ? unseen_pool : seen_pool).push_back(&r);
  rng.shuffle(seen_pool);
  rng.shuffle(unseen_pool);

  DatasetSplit out;
  const std::size_t n_seen_test = static_cast<std::size_t>(std::llround(cfg.seen_test_fraction * static_cast<double>(seen_pool.size())));
  std::vector<ClozeInstance> seen_candidates;
  std::map<std::string, int> seen_word_counts;
  for (std::size_t i = 0; i < seen_pool.size(); ++i) {
    if (i < n_seen_test) {
      for (auto& c : curate_cloze(*seen_pool[i])) seen_candidates.push_back(std::move(c));
    } else {
      out.pretrain.push_back(seen_pool[i]->id);
    }
  }

  // Unseen pool: a pair goes to test while some test word still needs instances.
  std::map<std::string, int> need;
  for (const auto& w : cfg.unseen_test_words) need[w] = cfg.unseen_per_word;
  std::vector<ClozeInstance> unseen_candidates;
  for (const PairRecord* r : unseen_pool) {
    auto inst = curate_cloze(*r);
    bool useful = false;
    for (const auto& c : inst)
      if (auto it = need.find(c.target_word); it != need.end() && it->second > 0) useful = true;
    if (useful) {
      for (const auto& c : inst)
        if (auto it = need.find(c.target_word); it != need.end()) --it->second;
      for (auto& c : inst) unseen_candidates.push_back(std::move(c));
    } else {
      out.unseen_train.push_back(r->id);
    }
  }

  std::vector<Shortfall> unseen_short;
  out.unseen_test = detail::balanced_sample(unseen_candidates, cfg.unseen_test_words, cfg.unseen_per_word, rng, unseen_short);

  std::vector<std::string> seen_words = cfg.seen_test_words;
  const bool auto_seen = seen_words.empty();
  if (auto_seen) {
    std::set<std::string> s;
    for (const auto& c : seen_candidates) s.insert(c.target_word);
    seen_words.assign(s.begin(), s.end());
  }
  std::vector<Shortfall> seen_short;
  out.seen_test = detail::balanced_sample(seen_candidates, seen_words, cfg.seen_per_word, rng, seen_short);
  if (auto_seen) out.dropped_seen_words = seen_short;

  std::vector<Shortfall> hard = unseen_short;
  if (!auto_seen) hard.insert(hard.end(), seen_short.begin(), seen_short.end());
  if (!hard.empty()) fail(ErrorKind::kShortfall, detail::shortfall_message(hard));

  std::sort(out.pretrain.begin(), out.pretrain.end());
  std::sort(out.unseen_train.begin(), out.unseen_train.end());
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::ordered_json to_json(const PairRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["canvas"] = {r.width, r.height};
  auto objs = nlohmann::ordered_json::array();
  for (const ObjectSpec& o : r.objects) {
    nlohmann::ordered_json jo;
    jo["id"] = o.id;
    jo["shape"] = o.shape;
    jo["color"] = o.color;
    jo["size"] = o.size;
    jo["pattern"] = o.pattern;
    jo["box"] = {o.box.x0, o.box.y0, o.box.x1, o.box.y1};
    objs.push_back(std::move(jo));
  }
  j["objects"] = std::move(objs);
  j["tokens"] = r.caption.tokens;
  auto phrases = nlohmann::ordered_json::array();
  for (const Phrase& p : r.caption.phrases) {
    nlohmann::ordered_json jp;
    jp["span"] = {p.start, p.end};
    auto roles = nlohmann::ordered_json::array();
    for (Role x : p.roles) roles.push_back(std::string(role_name(x)));
    jp["roles"] = std::move(roles);
    jp["box_ids"] = p.box_ids;
    phrases.push_back(std::move(jp));
  }
  j["phrases"] = std::move(phrases);
  if (r.image_path) j["image_path"] = *r.image_path;
  return j;
}

inline PairRecord record_from_json(const nlohmann::json& j) {
  auto field = [&](const char* k) -> const nlohmann::json& {
    if (!j.contains(k)) fail(ErrorKind::kParse, std::string("missing field '") + k + "'");
    return j.at(k);
  };
  PairRecord r;
  try {
    r.id = field("id").get<std::string>();
    const auto& canvas = field("canvas");
    require(canvas.is_array() && canvas.size() == 2, ErrorKind::kParse, "canvas must be [W,H]");
    r.width = canvas[0].get<int>();
    r.height = canvas[1].get<int>();
    for (const auto& jo : field("objects")) {
      ObjectSpec o;
      o.id = jo.at("id").get<int>();
      o.shape = jo.at("shape").get<std::string>();
      o.color = jo.at("color").get<std::string>();
      o.size = jo.at("size").get<std::string>();
      o.pattern = jo.at("pattern").get<std::string>();
      const auto& b = jo.at("box");
      require(b.is_array() && b.size() == 4, ErrorKind::kParse, "box must have 4 coordinates");
      o.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      require(is_valid(o.box), ErrorKind::kParse, "object box outside [0,1] or inverted");
      r.objects.push_back(std::move(o));
    }
    r.caption.tokens = field("tokens").get<std::vector<std::string>>();
    for (const auto& jp : field("phrases")) {
      Phrase p;
      const auto& span = jp.at("span");
      require(span.is_array() && span.size() == 2, ErrorKind::kParse, "span must be [start,end]");
      p.start = span[0].get<int>();
      p.end = span[1].get<int>();
      for (const auto& role : jp.at("roles")) p.roles.push_back(parse_role(role.get<std::string>()));
      p.box_ids = jp.at("box_ids").get<std::vector<int>>();
      r.caption.phrases.push_back(std::move(p));
    }
    if (j.contains("image_path") && !j.at("image_path").is_null()) r.image_path = j.at("image_path").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, e.what());
  }
  validate_caption(r.caption, r.objects);
  return r;
}

inline std::string corpus_to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const PairRecord& r : corpus) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

/// Parses dataset JSONL text; errors name the offending 1-based line.
inline Corpus corpus_from_jsonl(std::istream& in) {
  Corpus corpus;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      corpus.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kParse, "line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      fail(e.kind(), "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

/// Writes `contents` to `path` through a temporary file and rename, so a
/// failed write never leaves a partial file behind.
inline void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + tmp.string() + " for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(static_cast<bool>(f), ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_dataset(const Corpus& corpus, const std::filesystem::path& path) {
  atomic_write(path, corpus_to_jsonl(corpus));
}

inline Corpus load_external(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open " + path.string());
  return corpus_from_jsonl(f);
}

inline std::string encode_ppm(const ImageRaster& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

inline ImageRaster decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  require(magic == "P6" && w > 0 && h > 0 && maxval == 255, ErrorKind::kParse, "not an 8-bit P6 PPM");
  in.get();
  ImageRaster img{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3)};
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  require(in.gcount() == static_cast<std::streamsize>(img.rgb.size()), ErrorKind::kParse, "truncated PPM payload");
  return img;
}

/// Raster of a record: the external PPM when `image_path` is set (relative
/// to `base_dir`), otherwise the deterministic rendering of its objects.
inline ImageRaster record_raster(const PairRecord& r, const std::filesystem::path& base_dir = {}) {
  if (r.image_path) return decode_ppm(read_file(base_dir / *r.image_path));
  return render_scene(r.width, r.height, r.objects);
}

inline std::string ids_to_json(const std::vector<std::string>& ids) { return nlohmann::json(ids).dump(1) + "\n"; }

inline std::vector<std::string> instance_ids(const std::vector<ClozeInstance>& v) {
  std::vector<std::string> ids;
  for (const auto& c : v) ids.push_back(c.instance_id);
  return ids;
}

/// Split manifests: JSON lists of pair ids (train splits) or instance ids
/// ("<pair id>:<mask position>", test splits).
inline void write_split_manifests(const DatasetSplit& s, const std::filesystem::path& dir) {
  atomic_write(dir / "pretrain.json", ids_to_json(s.pretrain));
  atomic_write(dir / "unseen_train.json", ids_to_json(s.unseen_train));
  atomic_write(dir / "seen_test.json", ids_to_json(instance_ids(s.seen_test)));
  atomic_write(dir / "unseen_test.json", ids_to_json(instance_ids(s.unseen_test)));
}

inline std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path)).get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

/// Rebuilds cloze instances from instance ids against a corpus.
inline std::vector<ClozeInstance> resolve_instances(const Corpus& corpus, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const PairRecord*> by_id;
  for (const auto& r : corpus) by_id[r.id] = &r;
  std::vector<ClozeInstance> out;
  for (const std::string& iid : ids) {
    const auto colon = iid.rfind(':');
    require(colon != std::string::npos, ErrorKind::kParse, "bad instance id '" + iid + "'");
    auto it = by_id.find(iid.substr(0, colon));
    require(it != by_id.end(), ErrorKind::kIntegrity, "instance '" + iid + "' refers to an unknown pair");
    bool found = false;
    for (auto& c : curate_cloze(*it->second))
      if (c.instance_id == iid) {
        out.push_back(std::move(c));
        found = true;
        break;
      }
    require(found, ErrorKind::kIntegrity, "instance '" + iid + "' is not a groundable position");
  }
  return out;
}

}  // namespace gova
