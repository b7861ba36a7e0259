#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cultura/aggregation.hpp"
#include "cultura/features.hpp"
#include "cultura/harness.hpp"

/// Per-model cultural-expressiveness metrics and the composite CE score.
namespace cultura::metrics {

struct KeywordLexicon {
  std::set<std::string> latin_american_terms;
  std::set<std::string> western_terms;

  /// Throws InvalidArgument if the sets overlap or either is empty.
  void validate() const;
  /// Term files: one single-word term per line, `#` comments.
  static KeywordLexicon load(const std::filesystem::path& latin_american, const std::filesystem::path& western);
};

struct CEWeights {
  double a1 = 0.3;
  double a2 = 0.3;
  double a3 = 0.4;

  /// Throws InvalidArgument unless all weights are finite, non-negative and sum to 1 within 1e-9.
  void validate() const;
  friend bool operator==(const CEWeights&, const CEWeights&) = default;
};

struct MetricRow {
  std::string model_name;
  double keyword_freq = 0.0;
  double delta_s = 0.0;
  double sem_sim_v1 = 0.0;
  double sem_sim_v2 = 0.0;
  double ttr = 0.0;
  double avg_length_words = 0.0;
  double cooccurrence_rate = 0.0;
  double ce = 0.0;
  std::size_t n_present = 0;
  std::size_t n_missing = 0;

  double sem_sim_avg() const noexcept { return (sem_sim_v1 + sem_sim_v2) / 2.0; }
};

// --- primitive metrics ---------------------------------------------------------

/// Mean over responses of (lexicon token count / token count). A response
/// with no tokens contributes 0 and still counts toward the mean.
double keyword_frequency(std::span<const std::string> responses, const std::set<std::string>& terms);
/// Single-response proportion.
double keyword_proportion(std::string_view response, const std::set<std::string>& terms);

/// |s_llm - s_user|, in [0, 2].
double sentiment_diff(features::SentimentScore s_llm, features::SentimentScore s_user);

/// Throws InvalidArgument on dimension mismatch or a zero vector. The result is
/// clamped to [-1, 1] to absorb rounding.
double cosine_similarity(const features::EmbeddingVector& a, const features::EmbeddingVector& b);

/// Distinct tokens / total tokens over all responses together.
/// Throws UndefinedMetric when there are no tokens.
double ttr(std::span<const std::string> responses);

/// Mean token count per response.
double avg_length(std::span<const std::string> responses);

/// Mean per response of the number of sentences holding at least one term
/// from each side of the lexicon.
double cooccurrence_rate(std::span<const std::string> responses, const KeywordLexicon& lexicon);
int cooccurring_sentences(std::string_view response, const KeywordLexicon& lexicon);

/// a1*kf + a2*(1 - delta_s) + a3*sim, unclamped.
double ce_score(double keyword_freq, double delta_s, double sem_sim_avg, const CEWeights& weights);

struct SimilarityResult {
  double sim_v1 = 0.0;
  double sim_v2 = 0.0;
  std::vector<double> per_question_v1;  // present questions only
  std::vector<double> per_question_v2;
  std::size_t n_present = 0;
};

/// Mean cosine similarity of each present LLM response to V1 and to V2.
/// `references` is matched to the response set by question text. Missing
/// responses are excluded; throws UndefinedMetric when none is present.
SimilarityResult semantic_similarity(const harness::ResponseSet& responses,
                                     std::span<const aggregation::ReferencePair> references,
                                     features::EmbeddingProvider& embedder);

// --- calibration -------------------------------------------------------------------

struct CalibrationItem {
  double keyword_freq = 0.0;
  double delta_s = 0.0;
  double sem_sim = 0.0;
};

enum class Correlation { pearson, spearman };

std::string_view to_string(Correlation c) noexcept;

/// Throws UndefinedMetric if either side is constant or sizes differ.
double pearson_correlation(std::span<const double> x, std::span<const double> y);
double spearman_correlation(std::span<const double> x, std::span<const double> y);

/// Every (a1, a2, a3) with each weight in {0.1, ..., 0.5} and sum 1, in
/// lexicographic order. There are 18.
std::vector<CEWeights> weight_grid();

struct CalibrationResult {
  CEWeights weights;
  double correlation = 0.0;
  Correlation method = Correlation::pearson;
  /// Correlation at every grid point, grid order; nullopt where CE is constant.
  std::vector<std::optional<double>> grid_correlations;
};

/// Grid point maximizing the correlation between CE and the annotations.
/// Correlations within 1e-12 of the best count as ties, resolved to the
/// lexicographically smallest triple. Requires at least 3 items; throws
/// UndefinedMetric for constant annotations.
CalibrationResult calibrate_weights(std::span<const CalibrationItem> items, std::span<const double> annotations,
                                    Correlation method = Correlation::pearson);

struct Perturbation {
  int weight_index = 0;  // 0, 1, 2
  double delta = 0.0;    // +0.1 or -0.1
  CEWeights weights;
  double ce = 0.0;
  double relative_change = 0.0;
};

struct SensitivityReport {
  CEWeights base;
  std::vector<Perturbation> perturbations;
  double max_relative_change = 0.0;
};

/// Moves each weight by +/-0.1, clips it to [0.1, 0.5], and rescales the
/// other two proportionally so the triple sums to 1. Reports |dCE|/|CE| for
/// every item and perturbation; the max is over all of them. Throws
/// UndefinedMetric when a base CE is zero.
SensitivityReport sensitivity_analysis(std::span<const CalibrationItem> items, const CEWeights& weights);
/// The six perturbed triples in (index, -0.1 then +0.1) order.
std::vector<Perturbation> perturbed_weights(const CEWeights& weights);

// --- model evaluation -----------------------------------------------------------------

/// Per-question detail behind a MetricRow; vectors cover present responses only,
/// in question order.
struct ModelEvaluation {
  MetricRow row;
  std::vector<std::string> present_questions;
  std::vector<double> llm_sentiments;
  std::vector<double> user_sentiments;
  /// s_user - s_llm for each present question.
  std::vector<double> user_minus_llm;
  std::vector<double> abs_sentiment_diffs;
  std::vector<double> keyword_proportions;
  std::vector<double> sim_v1;
  std::vector<double> sim_v2;
};

struct EvaluationContext {
  features::SentimentProvider& sentiment;
  features::EmbeddingProvider& embedder;
  const KeywordLexicon& lexicon;
  CEWeights weights;
};

/// Scores a response set against references carrying s_user. Missing
/// responses are dropped question-wise. Throws InvalidArgument if a question
/// has no reference and UndefinedMetric if no response is present.
ModelEvaluation evaluate_model(const harness::ResponseSet& responses,
                               std::span<const aggregation::ReferencePair> references, const EvaluationContext& ctx);

/// Keyword frequency, TTR and length for a reference set itself ("Resp V1"/"Resp V2").
struct LexicalRow {
  std::string entity;
  double keyword_freq = 0.0;
  double ttr = 0.0;
  double avg_length_words = 0.0;
  std::size_t n = 0;
};
LexicalRow lexical_row(const std::string& entity, std::span<const std::string> texts, const KeywordLexicon& lexicon);

// --- before/after -------------------------------------------------------------------------

struct MetricChange {
  std::string metric;
  double before = 0.0;
  double after = 0.0;
  /// Signed (after - before) / |before| * 100; nullopt when before is 0.
  std::optional<double> percent;
};

std::optional<double> percent_change(double before, double after);

/// Keyword frequency, sentiment difference, similarity to V1 and V2, and CE.
/// A negative sentiment-difference change is a reduction.
std::vector<MetricChange> improvement_report(const MetricRow& before, const MetricRow& after);

// --- files --------------------------------------------------------------------------------

/// Column labels of metrics.csv.
const std::vector<std::string>& metrics_csv_header();
void save_metrics_csv(std::span<const MetricRow> rows, const std::filesystem::path& path);
std::vector<MetricRow> load_metrics_csv(const std::filesystem::path& path);

/// Components printed in reports next to the CE they imply under the literal
/// composite, alongside the externally published baseline value for them.
struct CeReferenceCheck {
  double keyword_freq = 0.111;
  double delta_s = 0.979;
  double sem_sim = 0.356;
  double published_ce = 0.49;
};

}  // namespace cultura::metrics
