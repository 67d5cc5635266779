#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gova/trainer.hpp"

namespace gova {

// ---------------------------------------------------------------------------
// Special functions

namespace detail {

// Regularized lower incomplete gamma P(a, x) by its power series; x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a, sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by modified Lentz; x >= a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Regularized upper incomplete gamma Q(a, x).
inline double gamma_q(double a, double x) {
  require(a > 0.0 && x >= 0.0, ErrorKind::kContract, "gamma_q: need a > 0, x >= 0");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_fraction(a, x);
}

/// Survival function of the chi-squared distribution.
inline double chi2_sf(double x, double df = 1.0) {
  require(df > 0.0, ErrorKind::kContract, "chi2_sf: df must be positive");
  if (x <= 0.0) return 1.0;
  return gamma_q(df / 2.0, x / 2.0);
}

// ---------------------------------------------------------------------------
// Regression

struct OlsFit {
  Eigen::VectorXd coef;  // intercept first
  double residual_variance = 0.0;  // MLE, RSS / n
  double log_likelihood = 0.0;
  Eigen::Index n = 0;
};

/// Ordinary least squares with an intercept. X is n x k (k may be 0).
inline OlsFit ols_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::Index n = y.size();
  require(X.rows() == n, ErrorKind::kContract, "ols_fit: X and y row counts differ");
  require(n > X.cols() + 1, ErrorKind::kNumeric, "ols_fit: too few observations");
  Eigen::MatrixXd A(n, X.cols() + 1);
  A.col(0).setOnes();
  A.rightCols(X.cols()) = X;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  require(qr.rank() == A.cols(), ErrorKind::kNumeric, "ols_fit: design matrix is rank deficient");
  OlsFit f;
  f.n = n;
  f.coef = qr.solve(y);
  const double rss = (y - A * f.coef).squaredNorm();
  const double scale = std::max(1.0, y.squaredNorm() / static_cast<double>(n));
  f.residual_variance = std::max(rss / static_cast<double>(n), scale * 1e-24);
  f.log_likelihood = -0.5 * static_cast<double>(n) * (std::log(2.0 * std::numbers::pi * f.residual_variance) + 1.0);
  return f;
}

struct LrtResult {
  double statistic = 0.0;
  double p = 1.0;
};

inline LrtResult likelihood_ratio_test(const OlsFit& full, const OlsFit& reduced, double df = 1.0) {
  require(full.n == reduced.n, ErrorKind::kContract, "likelihood_ratio_test: fits use different samples");
  LrtResult r;
  r.statistic = std::max(0.0, 2.0 * (full.log_likelihood - reduced.log_likelihood));
  r.p = chi2_sf(r.statistic, df);
  return r;
}

/// Zero mean, unit (population) variance. Constant columns are an error.
inline Eigen::VectorXd standardize(const Eigen::VectorXd& v) {
  const double mean = v.mean();
  const double sd = std::sqrt((v.array() - mean).square().mean());
  require(sd > 0.0, ErrorKind::kNumeric, "cannot standardize a constant column");
  return (v.array() - mean) / sd;
}

// ---------------------------------------------------------------------------
// Predictor table

inline const std::vector<std::string>& standard_predictors() {
  static const std::vector<std::string> names{"unigram_log_ppl", "lm_log_ppl", "co_occur_phrases", "co_occur_objects",
                                              "bbox_size"};
  return names;
}

inline const std::vector<std::string>& standard_outcomes() {
  static const std::vector<std::string> names{"log_g_ppl", "log_ppl", "iou_any"};
  return names;
}

struct PredictorTable {
  std::vector<std::string> words;
  std::vector<std::string> predictors;
  std::vector<std::string> outcomes;
  std::map<std::string, std::vector<double>> columns;

  const std::vector<double>& column(const std::string& name) const {
    auto it = columns.find(name);
    require(it != columns.end(), ErrorKind::kContract, "no column '" + name + "'");
    return it->second;
  }

  void set(const std::string& name, std::vector<double> values, bool predictor) {
    require(values.size() == words.size(), ErrorKind::kContract, "column '" + name + "' has the wrong length");
    auto& list = predictor ? predictors : outcomes;
    if (std::find(list.begin(), list.end(), name) == list.end()) list.push_back(name);
    columns[name] = std::move(values);
  }
};

/// Add-one smoothed unigram distribution over vocabulary words, counted on
/// the captions of `pair_ids`. Reserved ids get zero mass.
inline Eigen::VectorXd unigram_distribution(const Corpus& corpus, const std::vector<std::string>& pair_ids,
                                            const Vocabulary& vocab) {
  std::set<std::string> keep(pair_ids.begin(), pair_ids.end());
  Eigen::VectorXd counts = Eigen::VectorXd::Ones(vocab.size());
  for (int i = 0; i < Vocabulary::kNumReserved; ++i) counts[i] = 0.0;
  for (const auto& r : corpus) {
    if (!keep.count(r.id)) continue;
    for (int id : vocab.encode(r.caption.tokens))
      if (id >= Vocabulary::kNumReserved) counts[id] += 1.0;
  }
  return counts / counts.sum();
}

struct OccurrenceStats {
  double co_occur_phrases = 0.0;
  double co_occur_objects = 0.0;
  double bbox_size = 0.0;
  int occurrences = 0;
};

/// Per-occurrence averages over grounded mentions of `word` in `pair_ids`:
/// other phrases in the caption, objects in the image, and the fraction of
/// the image covered by the referents' boxes.
inline OccurrenceStats occurrence_stats(const Corpus& corpus, const std::vector<std::string>& pair_ids,
                                        const std::string& word) {
  std::set<std::string> keep(pair_ids.begin(), pair_ids.end());
  OccurrenceStats s;
  for (const auto& r : corpus) {
    if (!keep.count(r.id)) continue;
    const auto& phrases = r.caption.phrases;
    for (const Phrase& ph : phrases) {
      bool mentions = false;
      for (int t = ph.start; t < ph.end; ++t) mentions |= r.caption.tokens[static_cast<std::size_t>(t)] == word;
      if (!mentions) continue;
      BoxSet boxes;
      for (int b : ph.box_ids) boxes.push_back(r.object(b)->box);
      s.co_occur_phrases += static_cast<double>(phrases.size() - 1);
      s.co_occur_objects += static_cast<double>(r.objects.size());
      s.bbox_size += region_areas(boxes, {}).union_;
      ++s.occurrences;
    }
  }
  if (s.occurrences > 0) {
    const double n = s.occurrences;
    s.co_occur_phrases /= n;
    s.co_occur_objects /= n;
    s.bbox_size /= n;
  }
  return s;
}

/// Builds the per-word table. Words are the report's evaluated words;
/// perceptual statistics use pretrain occurrences, falling back to the
/// pairs of test items for words absent from pretraining.
inline PredictorTable compute_predictors(const Corpus& corpus, const DatasetSplit& split, const Vocabulary& vocab,
                                         const CorpusReport& model_report, const CorpusReport& text_only_report) {
  PredictorTable t;
  for (const auto& row : model_report.rows)
    if (row.protocol == Protocol::kAny && row.word != kOverall) t.words.push_back(row.word);
  const Eigen::VectorXd uni = unigram_distribution(corpus, split.pretrain, vocab);

  std::map<std::string, std::vector<std::string>> test_pairs;
  for (const auto* set : {&split.seen_test, &split.unseen_test})
    for (const auto& inst : *set) test_pairs[inst.target_word].push_back(inst.pair_id);

  std::vector<double> unigram, lm, phrases, objects, bbox, log_g_ppl, log_ppl_v, iou;
  for (const auto& w : t.words) {
    unigram.push_back(-std::log(uni[vocab.id(w)]));
    lm.push_back(text_only_report.get(w, Protocol::kAny).log_ppl);
    OccurrenceStats s = occurrence_stats(corpus, split.pretrain, w);
    if (s.occurrences == 0) s = occurrence_stats(corpus, test_pairs[w], w);
    require(s.occurrences > 0, ErrorKind::kContract, "word '" + w + "' has no grounded occurrences");
    phrases.push_back(s.co_occur_phrases);
    objects.push_back(s.co_occur_objects);
    bbox.push_back(s.bbox_size);
    const SliceReport& r = model_report.get(w, Protocol::kAny);
    log_g_ppl.push_back(r.log_gppl);
    log_ppl_v.push_back(r.log_ppl);
    iou.push_back(r.mean_iou);
  }
  t.set("unigram_log_ppl", std::move(unigram), true);
  t.set("lm_log_ppl", std::move(lm), true);
  t.set("co_occur_phrases", std::move(phrases), true);
  t.set("co_occur_objects", std::move(objects), true);
  t.set("bbox_size", std::move(bbox), true);
  t.set("log_g_ppl", std::move(log_g_ppl), false);
  t.set("log_ppl", std::move(log_ppl_v), false);
  t.set("iou_any", std::move(iou), false);
  return t;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  return out;
}

}  // namespace detail

/// Adds predictor columns from CSV text with header `word,<col>,...`.
/// Every table word must have a value in every ingested column.
inline void ingest_predictor_csv(PredictorTable& t, std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::kParse, "predictor CSV is empty");
  const auto header = detail::split_csv_line(line);
  require(header.size() >= 2 && header[0] == "word", ErrorKind::kParse, "predictor CSV header must start with 'word'");
  std::map<std::string, std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    require(cells.size() == header.size(), ErrorKind::kParse, "predictor CSV line " + std::to_string(lineno) + ": wrong cell count");
    std::vector<double> v;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(cells[i], &used));
        require(used == cells[i].size(), ErrorKind::kParse, "");
      } catch (const std::exception&) {
        fail(ErrorKind::kParse, "predictor CSV line " + std::to_string(lineno) + ": bad number '" + cells[i] + "'");
      }
    }
    rows[cells[0]] = std::move(v);
  }
  for (std::size_t c = 1; c < header.size(); ++c) {
    std::vector<double> col;
    for (const auto& w : t.words) {
      auto it = rows.find(w);
      require(it != rows.end(), ErrorKind::kParse, "predictor CSV has no row for '" + w + "'");
      col.push_back(it->second[c - 1]);
    }
    t.set(header[c], std::move(col), true);
  }
}

inline void ingest_predictor_csv(PredictorTable& t, const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  ingest_predictor_csv(t, in);
}

struct RegressionRow {
  std::string outcome, predictor;
  double beta = 0.0;
  double statistic = 0.0;
  double p = 1.0;
  double neg_log_p = 0.0;  // -log10 p
};

struct RegressionReport {
  std::string variant;
  std::vector<RegressionRow> rows;
  std::map<std::string, int> excluded;  // outcome -> words dropped for non-finite values
};

/// For every outcome and predictor: standardized beta in the full model and
/// an LRT against the model without that predictor.
inline RegressionReport regress(const PredictorTable& t, const std::string& variant) {
  RegressionReport rep;
  rep.variant = variant;
  for (const auto& outcome : t.outcomes) {
    const auto& yv = t.column(outcome);
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < yv.size(); ++i)
      if (std::isfinite(yv[i])) rows.push_back(static_cast<Eigen::Index>(i));
    rep.excluded[outcome] = static_cast<int>(yv.size() - rows.size());
    const auto n = static_cast<Eigen::Index>(rows.size());
    Eigen::VectorXd y(n);
    Eigen::MatrixXd X(n, static_cast<Eigen::Index>(t.predictors.size()));
    for (Eigen::Index r = 0; r < n; ++r) y[r] = yv[static_cast<std::size_t>(rows[r])];
    for (std::size_t c = 0; c < t.predictors.size(); ++c) {
      const auto& col = t.column(t.predictors[c]);
      Eigen::VectorXd v(n);
      for (Eigen::Index r = 0; r < n; ++r) v[r] = col[static_cast<std::size_t>(rows[r])];
      X.col(static_cast<Eigen::Index>(c)) = standardize(v);
    }
    y = standardize(y);
    const OlsFit full = ols_fit(X, y);
    for (std::size_t c = 0; c < t.predictors.size(); ++c) {
      Eigen::MatrixXd Xr(n, X.cols() - 1);
      for (Eigen::Index j = 0, k = 0; j < X.cols(); ++j)
        if (j != static_cast<Eigen::Index>(c)) Xr.col(k++) = X.col(j);
      const LrtResult lrt = likelihood_ratio_test(full, ols_fit(Xr, y));
      RegressionRow row;
      row.outcome = outcome;
      row.predictor = t.predictors[c];
      row.beta = full.coef[static_cast<Eigen::Index>(c) + 1];
      row.statistic = lrt.statistic;
      row.p = lrt.p;
      row.neg_log_p = -std::log10(std::max(lrt.p, std::numeric_limits<double>::min()));
      rep.rows.push_back(row);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// KL against the unigram distribution

/// KL(p || q) over entries where p > 0.
inline double kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  require(p.size() == q.size(), ErrorKind::kContract, "kl_divergence: size mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return kInf;
    kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return std::max(0.0, kl);
}

/// Model distribution over vocabulary words (reserved ids dropped and the
/// rest renormalised) from one row of MLM logits.
inline Eigen::VectorXd word_distribution(const Eigen::VectorXd& logits) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(logits.size());
  const double m = logits.tail(logits.size() - Vocabulary::kNumReserved).maxCoeff();
  for (Eigen::Index i = Vocabulary::kNumReserved; i < logits.size(); ++i) p[i] = std::exp(logits[i] - m);
  return p / p.sum();
}

struct KlPoint {
  std::int64_t step = 0;
  double kl = 0.0;
};

/// Mean over masked positions of KL(model || unigram), one point per
/// checkpoint.
inline std::vector<KlPoint> kl_vs_unigram(const ModelConfig& mcfg,
                                          const std::vector<std::pair<std::int64_t, Parameters>>& checkpoints,
                                          const std::vector<ClozeInstance>& instances, const Vocabulary& vocab,
                                          RasterCache& rasters, const Eigen::VectorXd& unigram) {
  require(!instances.empty(), ErrorKind::kContract, "kl_vs_unigram: no instances");
  std::vector<KlPoint> curve;
  for (const auto& [step, params] : checkpoints) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& inst : instances) {
      const ImageRaster* img = has_image(mcfg.variant) ? &rasters.get(inst.pair_id) : nullptr;
      const auto ids = vocab.encode(inst.tokens);
      const ForwardOutput out = forward(mcfg, params, ids, img);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] != Vocabulary::kMask) continue;
        sum += kl_divergence(word_distribution(out.mlm_logits.row(static_cast<Eigen::Index>(i)).transpose()), unigram);
        ++n;
      }
    }
    curve.push_back({step, sum / static_cast<double>(n)});
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Output

inline std::string analysis_csv(const std::vector<RegressionReport>& reports, bool significant_only) {
  std::ostringstream os;
  os.precision(10);
  os << "variant,outcome,predictor,beta,lrt,p,neg_log10_p,signed_neg_log10_p\n";
  for (const auto& rep : reports)
    for (const auto& r : rep.rows) {
      if (significant_only && r.p > 0.05) continue;
      const double sign = r.beta < 0 ? -1.0 : 1.0;
      os << rep.variant << ',' << r.outcome << ',' << r.predictor << ',' << r.beta << ',' << r.statistic << ','
         << r.p << ',' << r.neg_log_p << ',' << sign * r.neg_log_p << '\n';
    }
  return os.str();
}

inline std::string predictor_table_csv(const PredictorTable& t) {
  std::ostringstream os;
  os.precision(10);
  os << "word";
  for (const auto& c : t.predictors) os << ',' << c;
  for (const auto& c : t.outcomes) os << ',' << c;
  os << '\n';
  for (std::size_t i = 0; i < t.words.size(); ++i) {
    os << t.words[i];
    for (const auto* list : {&t.predictors, &t.outcomes})
      for (const auto& c : *list) os << ',' << format_real(t.column(c)[i]);
    os << '\n';
  }
  return os.str();
}

inline std::string kl_csv(const std::vector<KlPoint>& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "step,kl\n";
  for (const auto& p : curve) os << p.step << ',' << p.kl << '\n';
  return os.str();
}

/// Writes analysis_full.csv and analysis_significant.csv (p <= 0.05) to `dir`.
inline void emit_analysis(const std::vector<RegressionReport>& reports, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  atomic_write(dir / "analysis_full.csv", analysis_csv(reports, false));
  atomic_write(dir / "analysis_significant.csv", analysis_csv(reports, true));
}

}  // namespace gova
