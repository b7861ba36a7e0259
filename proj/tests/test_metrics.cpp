#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cultura/error.hpp"
#include "cultura/metrics.hpp"

using namespace cultura;
using namespace cultura::metrics;
using features::EmbeddingVector;
using features::SentimentScore;

namespace {

constexpr double kTol = 1e-12;

KeywordLexicon lexicon() { return {{"inca", "quechua", "andes", "nahuatl"}, {"europe", "spain", "western"}}; }

class FixedSentiment final : public features::SentimentProvider {
 public:
  SentimentScore score(std::string_view text) override {
    return SentimentScore(text.find("sad") != std::string_view::npos ? -0.5 : 0.5);
  }
  std::string identity() const override { return "double:fixed"; }
};

}  // namespace

TEST_CASE("keyword frequency hand counts") {
  const std::set<std::string> terms = {"inca", "quechua"};
  const std::vector<std::string> one = {"The Inca spoke Quechua"};
  CHECK(std::abs(keyword_frequency(one, terms) - 0.5) < kTol);
  // 1/5 and 0/3 and an empty response counted as 0: (0.2 + 0 + 0) / 3.
  const std::vector<std::string> three = {"Quechua is still spoken widely.", "Nothing to see", "   "};
  CHECK(std::abs(keyword_frequency(three, terms) - 0.2 / 3.0) < kTol);
  const std::vector<std::string> all = {"Inca, QUECHUA! inca"};
  CHECK(keyword_frequency(all, terms) == 1.0);
  const std::vector<std::string> none = {"no match here"};
  CHECK(keyword_frequency(none, terms) == 0.0);
  CHECK_THROWS_AS(keyword_frequency(std::span<const std::string>{}, terms), InvalidArgument);
}

TEST_CASE("keyword frequency and ttr ignore response order") {
  std::vector<std::string> rs = {"the inca road", "quechua quechua", "andes and more andes", "x"};
  const std::set<std::string> terms = {"inca", "quechua", "andes"};
  const double kf = keyword_frequency(rs, terms);
  const double t = ttr(rs);
  std::mt19937 gen(1);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(rs.begin(), rs.end(), gen);
    CHECK(std::abs(keyword_frequency(rs, terms) - kf) < kTol);
    CHECK(ttr(rs) == t);
    CHECK(ttr(rs) <= 1.0);
  }
}

TEST_CASE("sentiment difference") {
  CHECK(sentiment_diff(SentimentScore(0.5), SentimentScore(0.5)) == 0.0);
  CHECK(sentiment_diff(SentimentScore(1), SentimentScore(-1)) == 2.0);
  CHECK(std::abs(sentiment_diff(SentimentScore(0.987), SentimentScore(0.008)) - 0.979) < kTol);
}

TEST_CASE("cosine similarity") {
  const EmbeddingVector v({0.3, -2.0, 5.0});
  CHECK(std::abs(cosine_similarity(v, v) - 1.0) < kTol);
  CHECK(cosine_similarity(EmbeddingVector({1, 0}), EmbeddingVector({0, 1})) == 0.0);
  CHECK(std::abs(cosine_similarity(EmbeddingVector({1, 0}), EmbeddingVector({1, 1})) - 0.70710678118654752) < kTol);
  CHECK(std::abs(cosine_similarity(EmbeddingVector({1, 0}), EmbeddingVector({1, 1})) - 0.70710678) < 1e-8);
  CHECK_THROWS_AS(cosine_similarity(EmbeddingVector({0, 0}), EmbeddingVector({1, 1})), InvalidArgument);
  CHECK_THROWS_AS(cosine_similarity(EmbeddingVector({1}), EmbeddingVector({1, 1})), InvalidArgument);
}

TEST_CASE("type-token ratio hand counts") {
  const std::vector<std::string> la = {"la la tierra"};
  CHECK(std::abs(ttr(la) - 2.0 / 3.0) < kTol);
  const std::vector<std::string> distinct = {"uno dos", "tres"};
  CHECK(ttr(distinct) == 1.0);
  const std::vector<std::string> rep = {"sí sí sí", "Sí"};
  CHECK(std::abs(ttr(rep) - 0.25) < kTol);
  const std::vector<std::string> blank = {"  ", "..."};
  CHECK_THROWS_AS(ttr(blank), UndefinedMetric);
}

TEST_CASE("average length hand counts") {
  const std::vector<std::string> ab = {"a b", "c d e"};
  CHECK(std::abs(avg_length(ab) - 2.5) < kTol);
  const std::vector<std::string> empty = {"   "};
  CHECK(avg_length(empty) == 0.0);
  const std::vector<std::string> mixed = {"One two three four.", "¿Cinco?", ""};
  CHECK(std::abs(avg_length(mixed) - 5.0 / 3.0) < kTol);
}

TEST_CASE("co-occurrence rate hand counts") {
  const auto lex = lexicon();
  const std::vector<std::string> one = {"Quechua arrived in Europe through scholars."};
  CHECK(cooccurrence_rate(one, lex) == 1.0);
  const std::vector<std::string> two = {"The Inca met Spain. The Andes are high.", "Nothing here."};
  CHECK(std::abs(cooccurrence_rate(two, lex) - 0.5) < kTol);
  const std::vector<std::string> split = {"The Inca ruled. Spain came later!"};
  CHECK(cooccurrence_rate(split, lex) == 0.0);
  const std::vector<std::string> multi = {"Inca and Spain? Andes and Europe! Nahuatl, western."};
  CHECK(cooccurrence_rate(multi, lex) == 3.0);
}

TEST_CASE("CE arithmetic") {
  const CEWeights w;
  CHECK(ce_score(0, 1, 0, w) == 0.0);
  CHECK(std::abs(ce_score(1, 0, 1, w) - 1.0) < kTol);
  const CeReferenceCheck ref;
  const double ce = ce_score(ref.keyword_freq, ref.delta_s, ref.sem_sim, w);
  // 0.3*0.111 + 0.3*0.021 + 0.4*0.356 = 0.0333 + 0.0063 + 0.1424
  CHECK(std::abs(ce - 0.1820) < 1e-12);
  CHECK(std::abs(ce - ref.published_ce) > 0.3);
  CHECK_THROWS_AS((CEWeights{0.5, 0.5, 0.5}.validate()), InvalidArgument);
}

TEST_CASE("weight grid has 18 ordered triples") {
  const auto grid = weight_grid();
  CHECK(grid.size() == 18);
  // Independent enumeration over integer tenths.
  std::size_t k = 0;
  for (int i = 1; i <= 5; ++i) {
    for (int j = 1; j <= 5; ++j) {
      const int l = 10 - i - j;
      if (l < 1 || l > 5) continue;
      REQUIRE(k < grid.size());
      CHECK(std::abs(grid[k].a1 - i / 10.0) < kTol);
      CHECK(std::abs(grid[k].a2 - j / 10.0) < kTol);
      CHECK(std::abs(grid[k].a3 - l / 10.0) < kTol);
      ++k;
    }
  }
  CHECK(k == 18);
}

TEST_CASE("planted weights are recovered") {
  std::mt19937 gen(17);
  std::uniform_real_distribution<double> u01(0, 1), u02(0, 2);
  for (const CEWeights planted : {CEWeights{0.3, 0.3, 0.4}, CEWeights{0.1, 0.4, 0.5}, CEWeights{0.5, 0.2, 0.3}}) {
    std::vector<CalibrationItem> items;
    std::vector<double> ann;
    for (int i = 0; i < 30; ++i) {
      items.push_back({u01(gen), u02(gen), u01(gen)});
      ann.push_back(ce_score(items.back().keyword_freq, items.back().delta_s, items.back().sem_sim, planted));
    }
    const auto result = calibrate_weights(items, ann);
    CHECK(std::abs(result.weights.a1 - planted.a1) < 1e-9);
    CHECK(std::abs(result.weights.a2 - planted.a2) < 1e-9);
    CHECK(std::abs(result.weights.a3 - planted.a3) < 1e-9);
    CHECK(result.correlation == doctest::Approx(1.0));
    CHECK(result.grid_correlations.size() == 18);
  }
}

TEST_CASE("calibration is invariant to positive affine maps of the annotations") {
  std::mt19937 gen(5);
  std::uniform_real_distribution<double> u01(0, 1), u02(0, 2);
  std::vector<CalibrationItem> items;
  std::vector<double> ann, mapped;
  for (int i = 0; i < 25; ++i) {
    items.push_back({u01(gen), u02(gen), u01(gen)});
    ann.push_back(u01(gen) * 5.0);
    mapped.push_back(3.5 * ann.back() - 7.0);
  }
  const auto a = calibrate_weights(items, ann);
  const auto b = calibrate_weights(items, mapped);
  CHECK(a.weights == b.weights);
  CHECK(std::abs(a.correlation - b.correlation) < 1e-12);
}

TEST_CASE("calibration errors and ties") {
  const std::vector<CalibrationItem> items = {{0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}, {0.7, 0.8, 0.9}};
  const std::vector<double> flat = {1, 1, 1};
  CHECK_THROWS_AS(calibrate_weights(items, flat), UndefinedMetric);
  const std::vector<double> two = {1, 2};
  CHECK_THROWS_AS(calibrate_weights(std::span(items).first(2), two), InvalidArgument);
  // kf = 1 - dS = sim on every item: CE is weight-independent, so every
  // triple ties and the lexicographically smallest wins.
  const std::vector<CalibrationItem> equal = {{0.2, 0.8, 0.2}, {0.5, 0.5, 0.5}, {0.9, 0.1, 0.9}};
  const std::vector<double> ann = {1, 2, 4};
  const auto r = calibrate_weights(equal, ann);
  CHECK(r.weights == CEWeights{0.1, 0.4, 0.5});
}

TEST_CASE("pearson and spearman") {
  const std::vector<double> x = {1, 2, 3, 4}, y = {2, 4, 6, 8.5};
  CHECK(spearman_correlation(x, y) == doctest::Approx(1.0));
  // Hand computation: x=(1,2,3), y=(1,3,2): r = 0.5
  const std::vector<double> a = {1, 2, 3}, b = {1, 3, 2};
  CHECK(std::abs(pearson_correlation(a, b) - 0.5) < kTol);
  const std::vector<double> c = {5, 5, 5};
  CHECK_THROWS_AS(pearson_correlation(a, c), UndefinedMetric);
}

TEST_CASE("sensitivity analysis") {
  const std::vector<CalibrationItem> maximal = {{1, 0, 1}};
  CHECK(sensitivity_analysis(maximal, CEWeights{}).max_relative_change < kTol);
  const std::vector<CalibrationItem> half = {{0.5, 0.5, 0.5}};
  CHECK(sensitivity_analysis(half, CEWeights{}).max_relative_change < kTol);
  const std::vector<CalibrationItem> zero = {{0, 1, 0}};
  CHECK_THROWS_AS(sensitivity_analysis(zero, CEWeights{}), UndefinedMetric);

  // Brute-force oracle: perturb one weight, clip to the grid range, and
  // rescale the other two so the triple sums to one.
  const CalibrationItem item{0.111, 0.979, 0.356};
  const std::vector<CalibrationItem> items = {item};
  const auto report = sensitivity_analysis(items, CEWeights{});
  REQUIRE(report.perturbations.size() == 6);
  const double base = 0.3 * 0.111 + 0.3 * (1 - 0.979) + 0.4 * 0.356;
  double worst = 0.0;
  const double w0[3] = {0.3, 0.3, 0.4};
  std::size_t k = 0;
  for (int i = 0; i < 3; ++i) {
    for (double d : {-0.1, 0.1}) {
      double w[3];
      const double target = std::min(0.5, std::max(0.1, w0[i] + d));
      for (int j = 0; j < 3; ++j) w[j] = j == i ? target : w0[j] * (1 - target) / (1 - w0[i]);
      const double ce = w[0] * 0.111 + w[1] * (1 - 0.979) + w[2] * 0.356;
      const double rel = std::abs(ce - base) / base;
      CHECK(std::abs(report.perturbations[k].ce - ce) < kTol);
      CHECK(std::abs(report.perturbations[k].relative_change - rel) < 1e-10);
      CHECK(std::abs(w[0] + w[1] + w[2] - 1.0) < kTol);
      worst = std::max(worst, rel);
      ++k;
    }
  }
  CHECK(std::abs(report.max_relative_change - worst) < 1e-10);
  CHECK(report.max_relative_change > 0.0);
}

TEST_CASE("percent change matches the reported improvements") {
  CHECK(*percent_change(0.111, 0.151) == doctest::Approx(36.036).epsilon(1e-4));
  CHECK(std::round(*percent_change(0.111, 0.151) * 10) / 10 == 36.0);
  CHECK(std::round(*percent_change(0.979, 0.412) * 10) / 10 == -57.9);
  CHECK(std::round(*percent_change(0.336, 0.400) * 10) / 10 == 19.0);
  CHECK(std::round(*percent_change(0.376, 0.429) * 10) / 10 == 14.1);
  CHECK(std::round(*percent_change(0.49, 0.70) * 10) / 10 == 42.9);
  CHECK(*percent_change(0.3, 0.3) == 0.0);
  CHECK_FALSE(percent_change(0.0, 1.0).has_value());
}

TEST_CASE("model evaluation uses pairwise deletion") {
  features::HashedBowEmbedder emb(32);
  FixedSentiment sent;
  const auto lex = lexicon();
  EvaluationContext ctx{sent, emb, lex, CEWeights{}};
  const std::vector<aggregation::ReferencePair> refs = {
      {"q1", "the inca road", "roads of the andes", SentimentScore(-0.5)},
      {"q2", "spain in europe", "europe and spain", SentimentScore(0.25)},
      {"q3", "quechua words", "nahuatl words", SentimentScore(-1.0)},
  };
  harness::ResponseSet set{"m",
                           {harness::ResponseRecord::ok("q1", "The Inca road crossed the Andes", "m"),
                            harness::ResponseRecord::ok("q2", "A sad story of Europe", "m")}};
  const auto base = evaluate_model(set, refs, ctx);
  CHECK(base.row.n_present == 2);
  CHECK(base.row.n_missing == 0);
  // |0.5 - (-0.5)| = 1 and |-0.5 - 0.25| = 0.75
  CHECK(std::abs(base.row.delta_s - 0.875) < kTol);

  auto with_missing = set;
  with_missing.records.push_back(harness::ResponseRecord::missing("q3", "m"));
  const auto after = evaluate_model(with_missing, refs, ctx);
  CHECK(after.row.n_missing == 1);
  CHECK(after.row.keyword_freq == base.row.keyword_freq);
  CHECK(after.row.delta_s == base.row.delta_s);
  CHECK(after.row.sem_sim_v1 == base.row.sem_sim_v1);
  CHECK(after.row.sem_sim_v2 == base.row.sem_sim_v2);
  CHECK(after.row.ttr == base.row.ttr);
  CHECK(after.row.avg_length_words == base.row.avg_length_words);
  CHECK(after.row.cooccurrence_rate == base.row.cooccurrence_rate);
  CHECK(after.row.ce == base.row.ce);

  harness::ResponseSet orphan{"m", {harness::ResponseRecord::ok("q9", "x", "m")}};
  CHECK_THROWS_AS(evaluate_model(orphan, refs, ctx), InvalidArgument);
  harness::ResponseSet none{"m", {harness::ResponseRecord::missing("q1", "m")}};
  CHECK_THROWS_AS(evaluate_model(none, refs, ctx), UndefinedMetric);
}

TEST_CASE("semantic similarity averages present questions") {
  features::HashedBowEmbedder emb(64);
  const std::vector<aggregation::ReferencePair> refs = {{"q1", "alpha beta", "gamma", SentimentScore()},
                                                        {"q2", "delta", "delta", SentimentScore()}};
  harness::ResponseSet set{"m", {harness::ResponseRecord::ok("q1", "alpha beta", "m"),
                                 harness::ResponseRecord::ok("q2", "delta", "m")}};
  const auto r = semantic_similarity(set, refs, emb);
  CHECK(std::abs(r.sim_v1 - 1.0) < kTol);
  CHECK(r.n_present == 2);
}

TEST_CASE("metrics CSV round-trip") {
  MetricRow row;
  row.model_name = "Zephyr-7B";
  row.keyword_freq = 0.123456;
  row.ce = -0.05;
  row.n_present = 45;
  row.n_missing = 9;
  const auto path = std::filesystem::temp_directory_path() / "cultura_metrics_test" / "metrics.csv";
  const std::vector<MetricRow> rows = {row};
  save_metrics_csv(rows, path);
  const auto back = load_metrics_csv(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].model_name == "Zephyr-7B");
  CHECK(back[0].keyword_freq == doctest::Approx(0.123456));
  CHECK(back[0].n_missing == 9);
  std::filesystem::remove_all(path.parent_path());
}
