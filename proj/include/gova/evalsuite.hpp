#pragma once

// Cloze scoring: prediction extraction with confidence / mask-mapping
// filters, perplexity, IoU under both protocols, grounded perplexity,
// hit rates, corpus aggregation, and dump/report I/O.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gova/dataworld.hpp"
#include "gova/geometry.hpp"
#include "gova/model.hpp"

namespace gova {

enum class Protocol { kAny, kAll };

inline std::string_view protocol_name(Protocol p) { return p == Protocol::kAny ? "any" : "all"; }

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct PredictionRecord {
  std::string instance_id;
  std::vector<std::pair<std::string, double>> topk;  // descending log-probability
  std::vector<double> gold_logprob_tokens;
  BoxSet pred_boxes;
  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

struct EvalRecord {
  std::string instance_id;
  std::string word;
  double log_ppl = 0.0;
  double iou_any = 0.0;
  double iou_all = 0.0;
  int hit_rank = 0;  // 1-based rank within topk; 0 when absent
  bool localized_any = false;
  bool localized_all = false;
  double g_ppl_any = kInf;
  double g_ppl_all = kInf;

  double iou(Protocol p) const { return p == Protocol::kAny ? iou_any : iou_all; }
  double g_ppl(Protocol p) const { return p == Protocol::kAny ? g_ppl_any : g_ppl_all; }
  bool localized(Protocol p) const { return p == Protocol::kAny ? localized_any : localized_all; }
};

struct ExtractOptions {
  double max_no_object = 0.3;  // keep when no_object_prob <= this
  double min_mask_mass = 0.1;  // keep when mapping mass > this
  int topk = 10;
};

/// Reads the answer of one forward pass on a cloze instance.
inline PredictionRecord extract_prediction(const ForwardOutput& out, const ClozeInstance& inst, const Vocabulary& vocab,
                                           const ExtractOptions& opt = {}) {
  std::vector<int> masked;
  for (std::size_t i = 0; i < inst.tokens.size(); ++i)
    if (inst.tokens[i] == kMaskToken) masked.push_back(static_cast<int>(i));
  require(!masked.empty(), ErrorKind::kContract, "instance " + inst.instance_id + " has no mask");
  require(out.mlm_logits.rows() == static_cast<Eigen::Index>(inst.tokens.size()), ErrorKind::kContract,
          "forward output length does not match instance");

  PredictionRecord rec;
  rec.instance_id = inst.instance_id;
  const int gold = vocab.id(inst.target_word);
  for (int pos : masked) {
    const auto row = out.mlm_logits.row(pos);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    rec.gold_logprob_tokens.push_back(row(gold) - lse);
  }
  {
    const auto row = out.mlm_logits.row(inst.mask_position);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    std::vector<std::pair<double, int>> cand;
    for (int id = Vocabulary::kNumReserved; id < static_cast<int>(row.size()); ++id) cand.emplace_back(row(id) - lse, id);
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(std::max(opt.topk, 0)), cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                      [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    for (std::size_t i = 0; i < k; ++i) rec.topk.emplace_back(vocab.word(cand[i].second), cand[i].first);
  }
  for (Eigen::Index q = 0; q < out.boxes.rows(); ++q) {
    if (out.no_object_prob(q) > opt.max_no_object) continue;
    if (out.has_alignment()) {
      double mass = 0.0;
      for (int pos : masked) mass += out.pos_align(q, pos);
      if (!(mass > opt.min_mask_mass)) continue;
    }
    rec.pred_boxes.push_back(to_corners({out.boxes(q, 0), out.boxes(q, 1), out.boxes(q, 2), out.boxes(q, 3)}));
  }
  return rec;
}

/// Negative mean per-token log-probability of the gold word.
inline double log_ppl(const PredictionRecord& r) {
  require(!r.gold_logprob_tokens.empty(), ErrorKind::kContract, "prediction has no gold log-probabilities");
  double s = 0.0;
  for (double lp : r.gold_logprob_tokens) s += lp;
  return -s / static_cast<double>(r.gold_logprob_tokens.size());
}

/// log PPL - log IoU; infinite when IoU is 0.
inline double g_ppl(double log_ppl_value, double iou_value) {
  return iou_value > 0.0 ? log_ppl_value - std::log(iou_value) : kInf;
}

inline EvalRecord score_prediction(const PredictionRecord& p, const ClozeInstance& inst) {
  require(p.instance_id == inst.instance_id, ErrorKind::kContract, "prediction/instance id mismatch");
  EvalRecord e;
  e.instance_id = inst.instance_id;
  e.word = inst.target_word;
  e.log_ppl = log_ppl(p);
  e.iou_any = iou_any(inst.gold_boxes, p.pred_boxes);
  e.iou_all = iou_all(inst.gold_boxes, p.pred_boxes);
  for (std::size_t i = 0; i < p.topk.size(); ++i)
    if (p.topk[i].first == inst.target_word) {
      e.hit_rank = static_cast<int>(i) + 1;
      break;
    }
  e.localized_any = e.iou_any > 0.5;
  e.localized_all = e.iou_all > 0.5;
  e.g_ppl_any = g_ppl(e.log_ppl, e.iou_any);
  e.g_ppl_all = g_ppl(e.log_ppl, e.iou_all);
  return e;
}

inline bool hit_at(const EvalRecord& r, int k) { return r.hit_rank >= 1 && r.hit_rank <= k; }

/// Fraction with the gold word in the top k and IoU strictly above 0.5.
inline double ghr_at_k(const std::vector<EvalRecord>& records, int k, Protocol p) {
  if (records.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& r : records) n += hit_at(r, k) && r.localized(p);
  return static_cast<double>(n) / static_cast<double>(records.size());
}

inline double hr_at_k(const std::vector<EvalRecord>& records, int k) {
  if (records.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& r : records) n += hit_at(r, k);
  return static_cast<double>(n) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Aggregation

inline constexpr std::string_view kOverall = "__overall__";

struct SliceReport {
  std::string word;
  Protocol protocol = Protocol::kAny;
  std::size_t n = 0;
  double ghr1 = 0.0;
  double log_gppl = kInf;       // mean log PPL - log(mean IoU)
  double log_gppl_inst = kInf;  // mean of finite per-instance values
  double hr1 = 0.0;
  double log_ppl = 0.0;
  double acc = 0.0;
  double mean_iou = 0.0;
  double failure_rate = 0.0;  // fraction with IoU = 0
  friend bool operator==(const SliceReport&, const SliceReport&) = default;
};

struct CorpusReport {
  std::vector<SliceReport> rows;  // words ascending, overall last; any before all
  friend bool operator==(const CorpusReport&, const CorpusReport&) = default;

  const SliceReport& get(std::string_view word, Protocol p) const {
    for (const auto& r : rows)
      if (r.word == word && r.protocol == p) return r;
    fail(ErrorKind::kContract, "no report row for '" + std::string(word) + "'");
  }
  const SliceReport& overall(Protocol p) const { return get(kOverall, p); }
};

inline SliceReport summarize(const std::vector<const EvalRecord*>& recs, const std::string& word, Protocol p) {
  SliceReport s;
  s.word = word;
  s.protocol = p;
  s.n = recs.size();
  if (recs.empty()) return s;
  const double n = static_cast<double>(recs.size());
  double inst_sum = 0.0;
  std::size_t finite = 0;
  for (const EvalRecord* r : recs) {
    s.ghr1 += hit_at(*r, 1) && r->localized(p);
    s.hr1 += hit_at(*r, 1);
    s.log_ppl += r->log_ppl;
    s.acc += r->localized(p);
    s.mean_iou += r->iou(p);
    s.failure_rate += r->iou(p) <= 0.0;
    if (std::isfinite(r->g_ppl(p))) {
      inst_sum += r->g_ppl(p);
      ++finite;
    }
  }
  s.ghr1 /= n;
  s.hr1 /= n;
  s.log_ppl /= n;
  s.acc /= n;
  s.mean_iou /= n;
  s.failure_rate /= n;
  s.log_gppl = g_ppl(s.log_ppl, s.mean_iou);
  s.log_gppl_inst = finite ? inst_sum / static_cast<double>(finite) : kInf;
  return s;
}

inline CorpusReport aggregate(const std::vector<EvalRecord>& records) {
  std::map<std::string, std::vector<const EvalRecord*>> by_word;
  std::vector<const EvalRecord*> all;
  for (const auto& r : records) {
    by_word[r.word].push_back(&r);
    all.push_back(&r);
  }
  CorpusReport rep;
  for (const auto& [w, recs] : by_word)
    for (Protocol p : {Protocol::kAny, Protocol::kAll}) rep.rows.push_back(summarize(recs, w, p));
  for (Protocol p : {Protocol::kAny, Protocol::kAll}) rep.rows.push_back(summarize(all, std::string(kOverall), p));
  return rep;
}

/// Scores predictions against instances matched by id.
inline std::vector<EvalRecord> score_all(const std::vector<PredictionRecord>& preds,
                                         const std::vector<ClozeInstance>& instances) {
  std::map<std::string, const ClozeInstance*> by_id;
  for (const auto& i : instances) by_id[i.instance_id] = &i;
  std::vector<EvalRecord> out;
  out.reserve(preds.size());
  for (const auto& p : preds) {
    auto it = by_id.find(p.instance_id);
    require(it != by_id.end(), ErrorKind::kIntegrity, "prediction for unknown instance '" + p.instance_id + "'");
    out.push_back(score_prediction(p, *it->second));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dump and report I/O

inline nlohmann::ordered_json to_json(const PredictionRecord& p) {
  nlohmann::ordered_json j;
  j["instance_id"] = p.instance_id;
  auto topk = nlohmann::ordered_json::array();
  for (const auto& [w, lp] : p.topk) topk.push_back({w, lp});
  j["topk"] = topk;
  j["gold_logprob_tokens"] = p.gold_logprob_tokens;
  auto boxes = nlohmann::ordered_json::array();
  for (const Box& b : p.pred_boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
  j["boxes"] = boxes;
  return j;
}

inline PredictionRecord prediction_from_json(const nlohmann::json& j) {
  PredictionRecord p;
  p.instance_id = j.at("instance_id").get<std::string>();
  for (const auto& e : j.at("topk")) {
    require(e.is_array() && e.size() == 2, ErrorKind::kParse, "topk entries must be [word, logprob]");
    p.topk.emplace_back(e[0].get<std::string>(), e[1].get<double>());
  }
  p.gold_logprob_tokens = j.at("gold_logprob_tokens").get<std::vector<double>>();
  for (const auto& b : j.at("boxes")) {
    require(b.is_array() && b.size() == 4, ErrorKind::kParse, "boxes must be [x0, y0, x1, y1]");
    Box box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    validate(box);
    p.pred_boxes.push_back(box);
  }
  return p;
}

inline std::string predictions_to_jsonl(const std::vector<PredictionRecord>& recs) {
  std::string out;
  for (const auto& r : recs) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<PredictionRecord> predictions_from_jsonl(std::istream& in) {
  std::vector<PredictionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(prediction_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      fail(ErrorKind::kParse, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void dump_predictions(const std::vector<PredictionRecord>& recs, const std::filesystem::path& path) {
  atomic_write(path, predictions_to_jsonl(recs));
}

inline std::vector<PredictionRecord> load_predictions(const std::filesystem::path& path) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::kIo, "cannot open " + path.string());
  return predictions_from_jsonl(f);
}

inline CorpusReport score_dump(const std::filesystem::path& path, const std::vector<ClozeInstance>& instances) {
  return aggregate(score_all(load_predictions(path), instances));
}

inline std::string format_real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

inline std::string report_csv(const CorpusReport& rep) {
  std::string out = "word,protocol,n,ghr1,log_gppl,log_gppl_inst,hr1,log_ppl,acc,mean_iou,failure_rate\n";
  for (const auto& r : rep.rows) {
    out += r.word + "," + std::string(protocol_name(r.protocol)) + "," + std::to_string(r.n);
    for (double v : {r.ghr1, r.log_gppl, r.log_gppl_inst, r.hr1, r.log_ppl, r.acc, r.mean_iou, r.failure_rate})
      out += "," + format_real(v);
    out += "\n";
  }
  return out;
}

}  // namespace gova
