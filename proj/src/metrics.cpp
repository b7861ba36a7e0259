#include "cultura/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "cultura/csv.hpp"
#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/text.hpp"

namespace cultura::metrics {

void KeywordLexicon::validate() const {
  if (latin_american_terms.empty()) throw InvalidArgument("Latin American keyword lexicon is empty");
  if (western_terms.empty()) throw InvalidArgument("Western keyword lexicon is empty");
  for (const auto& t : latin_american_terms) {
    if (western_terms.count(t)) throw InvalidArgument("term '" + t + "' appears in both lexicons");
  }
}

KeywordLexicon KeywordLexicon::load(const std::filesystem::path& latin_american, const std::filesystem::path& western) {
  KeywordLexicon lex;
  try {
    lex.latin_american_terms = text::parse_term_list(io::read_text(latin_american));
  } catch (const InvalidArgument& e) {
    throw ConfigError(latin_american.string() + ": " + e.what());
  }
  try {
    lex.western_terms = text::parse_term_list(io::read_text(western));
  } catch (const InvalidArgument& e) {
    throw ConfigError(western.string() + ": " + e.what());
  }
  lex.validate();
  return lex;
}

void CEWeights::validate() const {
  for (double a : {a1, a2, a3}) {
    if (!std::isfinite(a) || a < 0.0) throw InvalidArgument("CE weights must be finite and non-negative");
  }
  if (std::abs(a1 + a2 + a3 - 1.0) > 1e-9) throw InvalidArgument("CE weights must sum to 1");
}

// --- primitives ------------------------------------------------------------------------------

double keyword_proportion(std::string_view response, const std::set<std::string>& terms) {
  const auto toks = text::word_tokens(response);
  if (toks.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& t : toks) hits += terms.count(t);
  return static_cast<double>(hits) / static_cast<double>(toks.size());
}

double keyword_frequency(std::span<const std::string> responses, const std::set<std::string>& terms) {
  if (responses.empty()) throw InvalidArgument("keyword frequency needs at least one response");
  if (terms.empty()) throw InvalidArgument("keyword frequency needs a non-empty term set");
  double sum = 0.0;
  std::size_t empty = 0;
  for (const auto& r : responses) {
    if (text::word_tokens(r).empty()) ++empty;
    sum += keyword_proportion(r, terms);
  }
  if (empty) spdlog::debug("keyword frequency: {} response(s) with no tokens counted as 0", empty);
  return sum / static_cast<double>(responses.size());
}

double sentiment_diff(features::SentimentScore s_llm, features::SentimentScore s_user) {
  return std::abs(s_llm.value() - s_user.value());
}

double cosine_similarity(const features::EmbeddingVector& a, const features::EmbeddingVector& b) {
  if (a.dimension() != b.dimension()) throw InvalidArgument("cosine similarity of vectors with different dimensions");
  if (a.dimension() == 0 || a.is_zero() || b.is_zero()) throw InvalidArgument("cosine similarity with a zero vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.dimension(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (a.norm() * b.norm()), -1.0, 1.0);
}

double ttr(std::span<const std::string> responses) {
  std::unordered_set<std::string> types;
  std::size_t total = 0;
  for (const auto& r : responses) {
    for (auto& t : text::word_tokens(r)) {
      types.insert(std::move(t));
      ++total;
    }
  }
  if (total == 0) throw UndefinedMetric("type-token ratio of a token-free corpus");
  return static_cast<double>(types.size()) / static_cast<double>(total);
}

double avg_length(std::span<const std::string> responses) {
  if (responses.empty()) throw InvalidArgument("average length of an empty response list");
  std::size_t total = 0;
  for (const auto& r : responses) total += text::word_tokens(r).size();
  return static_cast<double>(total) / static_cast<double>(responses.size());
}

int cooccurring_sentences(std::string_view response, const KeywordLexicon& lexicon) {
  int count = 0;
  for (const auto& sentence : text::split_sentences(response)) {
    bool latam = false;
    bool western = false;
    for (const auto& t : text::word_tokens(sentence)) {
      latam = latam || lexicon.latin_american_terms.count(t);
      western = western || lexicon.western_terms.count(t);
    }
    if (latam && western) ++count;
  }
  return count;
}

double cooccurrence_rate(std::span<const std::string> responses, const KeywordLexicon& lexicon) {
  lexicon.validate();
  if (responses.empty()) throw InvalidArgument("co-occurrence rate of an empty response list");
  double total = 0.0;
  for (const auto& r : responses) total += cooccurring_sentences(r, lexicon);
  return total / static_cast<double>(responses.size());
}

double ce_score(double keyword_freq, double delta_s, double sem_sim_avg, const CEWeights& weights) {
  return weights.a1 * keyword_freq + weights.a2 * (1.0 - delta_s) + weights.a3 * sem_sim_avg;
}

namespace {

std::map<std::string, const aggregation::ReferencePair*> index_references(
    std::span<const aggregation::ReferencePair> references) {
  std::map<std::string, const aggregation::ReferencePair*> by_question;
  for (const auto& r : references) by_question.emplace(r.question, &r);
  return by_question;
}

const aggregation::ReferencePair& reference_for(const std::map<std::string, const aggregation::ReferencePair*>& idx,
                                                const std::string& question) {
  auto it = idx.find(question);
  if (it == idx.end()) throw InvalidArgument("no reference answers for question: " + question);
  return *it->second;
}

// Aggregates tolerate a token-free response (zero bag-of-words vector) by
// scoring it 0 instead of aborting the whole model.
double similarity_for_aggregate(const features::EmbeddingVector& a, const features::EmbeddingVector& b) {
  if (a.is_zero() || b.is_zero()) {
    spdlog::debug("zero embedding in similarity aggregate; scored as 0");
    return 0.0;
  }
  return cosine_similarity(a, b);
}

double mean(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

SimilarityResult semantic_similarity(const harness::ResponseSet& responses,
                                     std::span<const aggregation::ReferencePair> references,
                                     features::EmbeddingProvider& embedder) {
  const auto idx = index_references(references);
  SimilarityResult out;
  for (const auto& rec : responses.records) {
    if (!rec.present()) continue;
    const auto& ref = reference_for(idx, rec.question);
    const auto e = embedder.embed(*rec.response);
    out.per_question_v1.push_back(similarity_for_aggregate(e, embedder.embed(ref.v1)));
    out.per_question_v2.push_back(similarity_for_aggregate(e, embedder.embed(ref.v2)));
  }
  out.n_present = out.per_question_v1.size();
  if (out.n_present == 0) throw UndefinedMetric(responses.model_name + ": no present responses for similarity");
  out.sim_v1 = mean(out.per_question_v1);
  out.sim_v2 = mean(out.per_question_v2);
  return out;
}

// --- calibration ---------------------------------------------------------------------------

std::string_view to_string(Correlation c) noexcept { return c == Correlation::pearson ? "pearson" : "spearman"; }

double pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw UndefinedMetric("correlation needs two equal-length samples (n >= 2)");
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedMetric("correlation with a constant sample");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman_correlation(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson_correlation(rx, ry);
}

std::vector<CEWeights> weight_grid() {
  std::vector<CEWeights> grid;
  for (int i = 1; i <= 5; ++i) {
    for (int j = 1; j <= 5; ++j) {
      const int k = 10 - i - j;
      if (k >= 1 && k <= 5) grid.push_back({i / 10.0, j / 10.0, k / 10.0});
    }
  }
  return grid;
}

CalibrationResult calibrate_weights(std::span<const CalibrationItem> items, std::span<const double> annotations,
                                    Correlation method) {
  if (items.size() != annotations.size()) throw InvalidArgument("calibration items and annotations differ in length");
  if (items.size() < 3) throw InvalidArgument("calibration needs at least 3 annotated items");
  if (std::all_of(annotations.begin(), annotations.end(), [&](double a) { return a == annotations.front(); })) {
    throw UndefinedMetric("annotations are constant; correlation is undefined");
  }

  CalibrationResult result;
  result.method = method;
  const auto grid = weight_grid();
  std::optional<std::size_t> best;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    std::vector<double> ce;
    ce.reserve(items.size());
    for (const auto& it : items) ce.push_back(ce_score(it.keyword_freq, it.delta_s, it.sem_sim, grid[g]));
    std::optional<double> r;
    try {
      r = method == Correlation::pearson ? pearson_correlation(ce, annotations) : spearman_correlation(ce, annotations);
    } catch (const UndefinedMetric&) {
      r = std::nullopt;
    }
    result.grid_correlations.push_back(r);
    if (r && (!best || *r > *result.grid_correlations[*best] + 1e-12)) best = g;
  }
  if (!best) throw UndefinedMetric("CE is constant at every grid point; correlation is undefined");
  result.weights = grid[*best];
  result.correlation = *result.grid_correlations[*best];
  return result;
}

std::vector<Perturbation> perturbed_weights(const CEWeights& weights) {
  std::vector<Perturbation> out;
  const std::array<double, 3> base = {weights.a1, weights.a2, weights.a3};
  for (int i = 0; i < 3; ++i) {
    for (double delta : {-0.1, 0.1}) {
      std::array<double, 3> w = base;
      w[i] = std::clamp(base[i] + delta, 0.1, 0.5);
      const double others = 1.0 - base[i];
      const double remaining = 1.0 - w[i];
      for (int j = 0; j < 3; ++j) {
        if (j == i) continue;
        w[j] = others > 0.0 ? base[j] * remaining / others : remaining / 2.0;
      }
      out.push_back({i, delta, {w[0], w[1], w[2]}, 0.0, 0.0});
    }
  }
  return out;
}

SensitivityReport sensitivity_analysis(std::span<const CalibrationItem> items, const CEWeights& weights) {
  weights.validate();
  if (items.empty()) throw InvalidArgument("sensitivity analysis needs at least one input");
  SensitivityReport report;
  report.base = weights;
  for (const auto& item : items) {
    const double base_ce = ce_score(item.keyword_freq, item.delta_s, item.sem_sim, weights);
    if (base_ce == 0.0) throw UndefinedMetric("relative CE change undefined at zero base CE");
    for (auto p : perturbed_weights(weights)) {
      p.ce = ce_score(item.keyword_freq, item.delta_s, item.sem_sim, p.weights);
      p.relative_change = std::abs(p.ce - base_ce) / std::abs(base_ce);
      report.max_relative_change = std::max(report.max_relative_change, p.relative_change);
      report.perturbations.push_back(p);
    }
  }
  return report;
}

// --- evaluation ---------------------------------------------------------------------------------

ModelEvaluation evaluate_model(const harness::ResponseSet& responses,
                               std::span<const aggregation::ReferencePair> references, const EvaluationContext& ctx) {
  ctx.weights.validate();
  ctx.lexicon.validate();
  const auto idx = index_references(references);

  ModelEvaluation ev;
  ev.row.model_name = responses.model_name;
  std::vector<std::string> present;
  for (const auto& rec : responses.records) {
    const auto& ref = reference_for(idx, rec.question);
    if (!rec.present()) {
      ++ev.row.n_missing;
      continue;
    }
    const std::string& text = *rec.response;
    present.push_back(text);
    ev.present_questions.push_back(rec.question);

    const auto s_llm = ctx.sentiment.score(text);
    ev.llm_sentiments.push_back(s_llm.value());
    ev.user_sentiments.push_back(ref.s_user.value());
    ev.user_minus_llm.push_back(ref.s_user.value() - s_llm.value());
    ev.abs_sentiment_diffs.push_back(sentiment_diff(s_llm, ref.s_user));
    ev.keyword_proportions.push_back(keyword_proportion(text, ctx.lexicon.latin_american_terms));

    const auto e = ctx.embedder.embed(text);
    ev.sim_v1.push_back(similarity_for_aggregate(e, ctx.embedder.embed(ref.v1)));
    ev.sim_v2.push_back(similarity_for_aggregate(e, ctx.embedder.embed(ref.v2)));
  }
  ev.row.n_present = present.size();
  if (present.empty()) throw UndefinedMetric(responses.model_name + ": no present responses");

  auto& row = ev.row;
  row.keyword_freq = mean(ev.keyword_proportions);
  row.delta_s = mean(ev.abs_sentiment_diffs);
  row.sem_sim_v1 = mean(ev.sim_v1);
  row.sem_sim_v2 = mean(ev.sim_v2);
  row.ttr = ttr(present);
  row.avg_length_words = avg_length(present);
  row.cooccurrence_rate = cooccurrence_rate(present, ctx.lexicon);
  row.ce = ce_score(row.keyword_freq, row.delta_s, row.sem_sim_avg(), ctx.weights);
  return ev;
}

LexicalRow lexical_row(const std::string& entity, std::span<const std::string> texts, const KeywordLexicon& lexicon) {
  LexicalRow row;
  row.entity = entity;
  row.n = texts.size();
  row.keyword_freq = keyword_frequency(texts, lexicon.latin_american_terms);
  row.ttr = ttr(texts);
  row.avg_length_words = avg_length(texts);
  return row;
}

// --- before/after ---------------------------------------------------------------------------------

std::optional<double> percent_change(double before, double after) {
  if (before == 0.0) return std::nullopt;
  return (after - before) / std::abs(before) * 100.0;
}

std::vector<MetricChange> improvement_report(const MetricRow& before, const MetricRow& after) {
  auto change = [](std::string name, double b, double a) { return MetricChange{std::move(name), b, a, percent_change(b, a)}; };
  return {
      change("Keyword Freq.", before.keyword_freq, after.keyword_freq),
      change("Sentiment Diff.", before.delta_s, after.delta_s),
      change("Semantic Sim. (V1)", before.sem_sim_v1, after.sem_sim_v1),
      change("Semantic Sim. (V2)", before.sem_sim_v2, after.sem_sim_v2),
      change("CE Score", before.ce, after.ce),
  };
}

// --- files ------------------------------------------------------------------------------------------

const std::vector<std::string>& metrics_csv_header() {
  static const std::vector<std::string> header = {
      "Model",
      "Keyword Freq.",
      "Sentiment Diff.",
      "Semantic Sim. (V1)",
      "Semantic Sim. (V2)",
      "Lexical Diversity (TTR)",
      "Avg. Response Length (words)",
      "Co-occurrence Rate",
      "CE Score",
      "n_present",
      "n_missing",
  };
  return header;
}

namespace {

std::string fixed(double x, int decimals = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, x);
  return buf;
}

}  // namespace

void save_metrics_csv(std::span<const MetricRow> rows, const std::filesystem::path& path) {
  csv::Writer w(metrics_csv_header());
  for (const auto& r : rows) {
    w.add({r.model_name, fixed(r.keyword_freq), fixed(r.delta_s), fixed(r.sem_sim_v1), fixed(r.sem_sim_v2),
           fixed(r.ttr), fixed(r.avg_length_words), fixed(r.cooccurrence_rate), fixed(r.ce),
           std::to_string(r.n_present), std::to_string(r.n_missing)});
  }
  w.save(path);
}

std::vector<MetricRow> load_metrics_csv(const std::filesystem::path& path) {
  const auto table = csv::read_file_with_header(path, metrics_csv_header());
  std::vector<MetricRow> rows;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& c = table.rows[i];
    try {
      MetricRow r;
      r.model_name = c[0];
      r.keyword_freq = std::stod(c[1]);
      r.delta_s = std::stod(c[2]);
      r.sem_sim_v1 = std::stod(c[3]);
      r.sem_sim_v2 = std::stod(c[4]);
      r.ttr = std::stod(c[5]);
      r.avg_length_words = std::stod(c[6]);
      r.cooccurrence_rate = std::stod(c[7]);
      r.ce = std::stod(c[8]);
      r.n_present = std::stoul(c[9]);
      r.n_missing = std::stoul(c[10]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError(path.string(), table.row_lines[i], "non-numeric metric value");
    }
  }
  return rows;
}

}  // namespace cultura::metrics
