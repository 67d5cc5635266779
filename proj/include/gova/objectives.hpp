#pragma once

// Pre-training losses: masked language modelling, Hungarian-matched box
// regression, position alignment against token spans, and contrastive
// object/token alignment.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gova/autograd.hpp"
#include "gova/geometry.hpp"
#include "gova/model.hpp"
#include "gova/rng.hpp"

namespace gova {

struct MaskingPolicy {
  double p_groundable = 0.4;
  double p_other = 0.1;
  double replace_mask = 0.8;
  double replace_random = 0.1;
  double keep = 0.1;

  void validate() const {
    for (double p : {p_groundable, p_other, replace_mask, replace_random, keep})
      require(p >= 0.0 && p <= 1.0, ErrorKind::kConfig, "masking probabilities must lie in [0, 1]");
    require(std::abs(replace_mask + replace_random + keep - 1.0) < 1e-12, ErrorKind::kConfig,
            "replacement probabilities must sum to 1");
  }
};

struct LossWeights {
  double mlm = 32.0;
  double pos = 1.0;
  double contrast = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double no_object_scale = 0.1;
};

enum class Corruption { kNone, kMask, kRandom, kKeep };

struct MaskedText {
  std::vector<int> ids;
  std::vector<std::pair<int, int>> targets;  // (position, original id)
  std::vector<Corruption> corruption;
};

/// Independently selects each token at a role-dependent rate and corrupts
/// the selection 80/10/10. Random replacements are drawn from `random_pool`
/// (all non-reserved ids when empty).
inline MaskedText apply_masking(const std::vector<int>& ids, const std::vector<bool>& groundable, Rng& rng,
                                const MaskingPolicy& policy, int vocab_size, const std::vector<int>& random_pool = {}) {
  require(ids.size() == groundable.size(), ErrorKind::kContract, "masking flags misaligned with tokens");
  MaskedText out;
  out.ids = ids;
  out.corruption.assign(ids.size(), Corruption::kNone);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!rng.bernoulli(groundable[i] ? policy.p_groundable : policy.p_other)) continue;
    out.targets.emplace_back(static_cast<int>(i), ids[i]);
    const double u = rng.uniform();
    if (u < policy.replace_mask) {
      out.ids[i] = Vocabulary::kMask;
      out.corruption[i] = Corruption::kMask;
    } else if (u < policy.replace_mask + policy.replace_random) {
      if (random_pool.empty()) {
        const int first = Vocabulary::kNumReserved;
        out.ids[i] = first + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size - first)));
      } else {
        out.ids[i] = random_pool[rng.below(random_pool.size())];
      }
      out.corruption[i] = Corruption::kRandom;
    } else {
      out.corruption[i] = Corruption::kKeep;
    }
  }
  return out;
}

/// Mean cross-entropy over target positions; a constant 0 when empty.
inline ad::Var mlm_loss(ad::Var logits, const std::vector<std::pair<int, int>>& targets) {
  ad::Tape& t = *logits.tape;
  if (targets.empty()) return t.constant(Mat::Zero(1, 1));
  Mat onehot = Mat::Zero(logits.rows(), logits.cols());
  Eigen::VectorXd w = Eigen::VectorXd::Zero(logits.rows());
  for (auto [pos, id] : targets) {
    require(pos >= 0 && pos < logits.rows() && id >= 0 && id < logits.cols(), ErrorKind::kContract,
            "mlm target out of range");
    onehot(pos, id) += 1.0;
    w(pos) = 1.0;
  }
  // Duplicate positions would double count; normalise per row.
  for (Eigen::Index r = 0; r < onehot.rows(); ++r)
    if (w(r) > 0) onehot.row(r) /= onehot.row(r).sum();
  w /= w.sum();
  return ad::cross_entropy_rows(logits, onehot, w);
}

// ---------------------------------------------------------------------------
// Matching

/// Gold objects of one training instance.
struct GroundingTargets {
  BoxSet boxes;                          // corner format
  std::vector<std::vector<int>> spans;   // token positions of each box's phrase
};

struct MatchResult {
  Assignment assignment;       // (gold index, query index)
  std::vector<int> unmatched;  // query indices
};

struct MatchOptions {
  bool alignment_cost = true;
};

namespace detail {

inline std::array<double, 4> corners_of(const Mat& boxes, Eigen::Index q) {
  const double cx = boxes(q, 0), cy = boxes(q, 1), w = boxes(q, 2), h = boxes(q, 3);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline double l1_center(const Mat& boxes, Eigen::Index q, const Box& g) {
  const CenterBox c = to_center(g);
  return std::abs(boxes(q, 0) - c.cx) + std::abs(boxes(q, 1) - c.cy) + std::abs(boxes(q, 2) - c.w) +
         std::abs(boxes(q, 3) - c.h);
}

}  // namespace detail

/// Hungarian matching of gold boxes to queries on L1 + GIoU (+ mean
/// negative log position-alignment over the box's phrase).
inline MatchResult match_queries(const Mat& boxes, const Mat* pos_log_probs, const GroundingTargets& gold,
                                 const LossWeights& w, const MatchOptions& opt = {}) {
  const auto n_gold = static_cast<Eigen::Index>(gold.boxes.size());
  const Eigen::Index n_q = boxes.rows();
  require(n_gold <= n_q, ErrorKind::kContract, "more gold boxes than queries");
  require(gold.spans.size() == gold.boxes.size(), ErrorKind::kContract, "gold spans misaligned with boxes");
  CostMatrix cost(n_gold, n_q);
  for (Eigen::Index g = 0; g < n_gold; ++g) {
    const Box& gb = gold.boxes[static_cast<std::size_t>(g)];
    for (Eigen::Index q = 0; q < n_q; ++q) {
      const double gi = giou_generic<double>(detail::corners_of(boxes, q), gb.as_array());
      double c = w.l1 * detail::l1_center(boxes, q, gb) + w.giou * (1.0 - gi);
      if (opt.alignment_cost && pos_log_probs) {
        const auto& span = gold.spans[static_cast<std::size_t>(g)];
        double lp = 0.0;
        for (int t : span) lp += (*pos_log_probs)(q, t);
        if (!span.empty()) c += w.pos * (-lp / static_cast<double>(span.size()));
      }
      cost(g, q) = c;
    }
  }
  MatchResult m;
  m.assignment = hungarian(cost);
  std::vector<bool> used(static_cast<std::size_t>(n_q), false);
  for (auto [g, q] : m.assignment.pairs) used[q] = true;
  for (Eigen::Index q = 0; q < n_q; ++q)
    if (!used[static_cast<std::size_t>(q)]) m.unmatched.push_back(static_cast<int>(q));
  return m;
}

// ---------------------------------------------------------------------------
// Loss terms

struct BoxTerms {
  ad::Var l1;    // mean over gold of summed |cxcywh difference|
  ad::Var giou;  // mean over gold of (1 - GIoU)
};

/// Unweighted L1 and GIoU terms over matched pairs, normalised by gold count.
inline BoxTerms box_terms(ad::Var boxes, const MatchResult& m, const GroundingTargets& gold) {
  ad::Tape& tape = *boxes.tape;
  const double n = static_cast<double>(std::max<std::size_t>(gold.boxes.size(), 1));
  const Mat& bv = boxes.value();
  Mat d_l1 = Mat::Zero(bv.rows(), 4), d_giou = Mat::Zero(bv.rows(), 4);
  double l1 = 0.0, gl = 0.0;
  for (auto [g, q] : m.assignment.pairs) {
    const Box& gb = gold.boxes[g];
    const CenterBox c = to_center(gb);
    const std::array<double, 4> tgt{c.cx, c.cy, c.w, c.h};
    const auto qi = static_cast<Eigen::Index>(q);
    for (int k = 0; k < 4; ++k) {
      const double diff = bv(qi, k) - tgt[static_cast<std::size_t>(k)];
      l1 += std::abs(diff);
      d_l1(qi, k) = (diff > 0) - (diff < 0);
    }
    std::array<ad::Dual4, 4> cxcywh;
    for (int k = 0; k < 4; ++k) {
      cxcywh[static_cast<std::size_t>(k)] = ad::Dual4(bv(qi, k));
      cxcywh[static_cast<std::size_t>(k)].d[static_cast<std::size_t>(k)] = 1.0;
    }
    const ad::Dual4 half(0.5);
    const std::array<ad::Dual4, 4> pc{cxcywh[0] - half * cxcywh[2], cxcywh[1] - half * cxcywh[3],
                                      cxcywh[0] + half * cxcywh[2], cxcywh[1] + half * cxcywh[3]};
    const auto ga = gb.as_array();
    const std::array<ad::Dual4, 4> gd{ga[0], ga[1], ga[2], ga[3]};
    const ad::Dual4 gi = giou_generic<ad::Dual4>(pc, gd);
    gl += 1.0 - gi.v;
    for (int k = 0; k < 4; ++k) d_giou(qi, k) = -gi.d[static_cast<std::size_t>(k)];
  }
  auto scalar_node = [&](double v, Mat d) {
    Mat out(1, 1);
    out(0, 0) = v / n;
    return tape.derived(std::move(out), {boxes}, [boxes, d = std::move(d), n](ad::Tape& t, int s) {
      ad::detail::accumulate(t, boxes, d * (t.grad(s)(0, 0) / n));
    });
  };
  return {scalar_node(l1, std::move(d_l1)), scalar_node(gl, std::move(d_giou))};
}

/// Weighted L1 + GIoU over matched pairs.
inline ad::Var localization_loss(ad::Var boxes, const MatchResult& m, const GroundingTargets& gold,
                                 const LossWeights& w) {
  BoxTerms b = box_terms(boxes, m, gold);
  return ad::add(ad::scale(b.l1, w.l1), ad::scale(b.giou, w.giou));
}

/// Cross-entropy of each query's position distribution against a uniform
/// target over its matched phrase (or the no-object slot when unmatched),
/// weighted mean over queries with unmatched queries down-weighted.
inline ad::Var positional_alignment_loss(ad::Var pos_logits, const MatchResult& m, const GroundingTargets& gold,
                                         const LossWeights& w) {
  const Eigen::Index n_q = pos_logits.rows(), slots = pos_logits.cols();
  Mat target = Mat::Zero(n_q, slots);
  Eigen::VectorXd weight = Eigen::VectorXd::Zero(n_q);
  for (auto [g, q] : m.assignment.pairs) {
    const auto& span = gold.spans[g];
    const auto qi = static_cast<Eigen::Index>(q);
    if (span.empty()) {
      target(qi, slots - 1) = 1.0;
    } else {
      for (int t : span) target(qi, t) += 1.0 / static_cast<double>(span.size());
    }
    weight(qi) = 1.0;
  }
  for (int q : m.unmatched) {
    target(q, slots - 1) = 1.0;
    weight(q) = w.no_object_scale;
  }
  const double total = weight.sum();
  if (total > 0) weight /= total;
  return ad::cross_entropy_rows(pos_logits, target, weight);
}

/// Symmetric InfoNCE between matched object embeddings and the tokens of
/// their phrases. Object->token ranks all tokens of the instance;
/// token->object ranks all matched objects.
inline ad::Var semantic_alignment_loss(ad::Var obj_embed, ad::Var tok_embed, const MatchResult& m,
                                       const GroundingTargets& gold, double temperature) {
  ad::Tape& tape = *obj_embed.tape;
  std::vector<int> queries;
  std::vector<const std::vector<int>*> spans;
  for (auto [g, q] : m.assignment.pairs) {
    if (gold.spans[g].empty()) continue;
    queries.push_back(static_cast<int>(q));
    spans.push_back(&gold.spans[g]);
  }
  if (queries.empty()) return tape.constant(Mat::Zero(1, 1));
  const auto n_obj = static_cast<Eigen::Index>(queries.size());
  const Eigen::Index n_tok = tok_embed.rows();

  ad::Var sim = ad::scale(ad::matmul(ad::gather_rows(obj_embed, queries), ad::transpose(tok_embed)), 1.0 / temperature);

  Mat o2t = Mat::Zero(n_obj, n_tok);
  Mat positive = Mat::Zero(n_obj, n_tok);
  for (Eigen::Index i = 0; i < n_obj; ++i) {
    const auto& span = *spans[static_cast<std::size_t>(i)];
    for (int t : span) {
      o2t(i, t) += 1.0 / static_cast<double>(span.size());
      positive(i, t) = 1.0;
    }
  }
  ad::Var obj_side = ad::cross_entropy_rows(sim, o2t, Eigen::VectorXd::Constant(n_obj, 1.0 / static_cast<double>(n_obj)));

  std::vector<int> tokens;
  for (Eigen::Index t = 0; t < n_tok; ++t)
    if (positive.col(t).sum() > 0) tokens.push_back(static_cast<int>(t));
  Mat t2o(static_cast<Eigen::Index>(tokens.size()), n_obj);
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto col = positive.col(tokens[k]);
    t2o.row(static_cast<Eigen::Index>(k)) = col.transpose() / col.sum();
  }
  const auto n_pos_tok = static_cast<Eigen::Index>(tokens.size());
  ad::Var tok_side = ad::cross_entropy_rows(ad::gather_rows(ad::transpose(sim), tokens), t2o,
                                            Eigen::VectorXd::Constant(n_pos_tok, 1.0 / static_cast<double>(n_pos_tok)));
  return ad::scale(ad::add(obj_side, tok_side), 0.5);
}

// ---------------------------------------------------------------------------
// Total

/// Everything the loss needs for one instance beyond the forward graph.
struct InstanceTargets {
  std::vector<std::pair<int, int>> mlm;
  GroundingTargets grounding;
};

struct LossResult {
  ad::Var total;
  double value = 0.0;  // total.scalar(), valid after the tape is gone
  std::map<std::string, double> breakdown;  // unweighted terms
  MatchResult match;
};

/// Weighted sum of the terms used by `variant`. Breakdown values are the
/// unweighted terms; total = sum of weight * term.
inline LossResult total_loss(const ModelConfig& cfg, const ForwardGraph& g, const InstanceTargets& tgt,
                             const LossWeights& w, const MatchOptions& opt = {}) {
  LossResult r;
  ad::Var mlm = mlm_loss(g.mlm_logits, tgt.mlm);
  r.breakdown["mlm"] = mlm.scalar();
  r.total = ad::scale(mlm, w.mlm);
  if (!has_object_decoder(cfg.variant) || tgt.grounding.boxes.empty()) {
    if (has_object_decoder(cfg.variant)) {
      r.breakdown["l1"] = r.breakdown["giou"] = 0.0;
      if (has_alignment(cfg.variant)) r.breakdown["pos"] = r.breakdown["contrast"] = 0.0;
    }
    r.value = r.total.scalar();
    return r;
  }
  const bool align = has_alignment(cfg.variant);
  Mat log_probs;
  if (align) {
    const Mat p = ad::detail::softmax_rows_value(g.pos_logits.value());
    log_probs = p.array().max(1e-300).log().matrix();
  }
  r.match = match_queries(g.boxes.value(), align ? &log_probs : nullptr, tgt.grounding, w, opt);
  BoxTerms b = box_terms(g.boxes, r.match, tgt.grounding);
  r.breakdown["l1"] = b.l1.scalar();
  r.breakdown["giou"] = b.giou.scalar();
  r.total = ad::add(r.total, ad::add(ad::scale(b.l1, w.l1), ad::scale(b.giou, w.giou)));
  if (align) {
    ad::Var pos = positional_alignment_loss(g.pos_logits, r.match, tgt.grounding, w);
    ad::Var con = semantic_alignment_loss(g.obj_embed, g.tok_embed, r.match, tgt.grounding, cfg.temperature);
    r.breakdown["pos"] = pos.scalar();
    r.breakdown["contrast"] = con.scalar();
    r.total = ad::add(r.total, ad::add(ad::scale(pos, w.pos), ad::scale(con, w.contrast)));
  }
  r.value = r.total.scalar();
  return r;
}

inline double recombine(const std::map<std::string, double>& breakdown, const LossWeights& w) {
  double s = 0.0;
  for (const auto& [k, v] : breakdown) {
    if (k == "mlm") s += w.mlm * v;
    else if (k == "pos") s += w.pos * v;
    else if (k == "contrast") s += w.contrast * v;
    else if (k == "l1") s += w.l1 * v;
    else if (k == "giou") s += w.giou * v;
  }
  return s;
}

}  // namespace gova
