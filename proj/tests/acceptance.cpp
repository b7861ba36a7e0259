// Acceptance runner: one PASS/FAIL/SKIP line per criterion, with the elapsed
// time against the criterion's budget. Exits 1 if any criterion fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <sys/wait.h>
#include <thread>
#include <vector>

#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "cultura/aggregation.hpp"
#include "cultura/error.hpp"
#include "cultura/features.hpp"
#include "cultura/finetune.hpp"
#include "cultura/harness.hpp"
#include "cultura/io.hpp"
#include "cultura/metrics.hpp"
#include "cultura/random.hpp"
#include "cultura/stats.hpp"
#include "cultura/tinylm.hpp"

using namespace cultura;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = CULTURA_SOURCE_DIR;
const fs::path kWork = fs::temp_directory_path() / "cultura_acceptance";

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict = Verdict::pass;
  std::vector<std::string> notes;

  void check(bool ok, std::string what) {
    if (!ok) {
      verdict = Verdict::fail;
      notes.push_back(std::move(what));
    }
  }
  static Outcome skipped(std::string why) {
    Outcome o;
    o.verdict = Verdict::skip;
    o.notes.push_back(std::move(why));
    return o;
  }
};

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<Outcome()> body;
};

bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

// --- composite score ----------------------------------------------------------------

// Components in thousandths and weights in tenths make the composite an exact
// integer ratio: CE = (w1*kf + w2*(1000 - ds) + w3*sim) / 10000.
struct IntCase {
  int kf, ds, sim;
  int w1, w2, w3;
};

Outcome composite_score(const fs::path& run_dir) {
  Outcome o;
  const std::vector<IntCase> cases = {
      {0, 0, 0, 3, 3, 4},          {0, 1000, 0, 3, 3, 4},      {1000, 0, 1000, 3, 3, 4},
      {0, 2000, -1000, 3, 3, 4},   {1000, 0, 1000, 1, 4, 5},   {0, 2000, -1000, 5, 4, 1},
      {111, 979, 356, 3, 3, 4},    {111, 979, 356, 1, 1, 8},   {500, 500, 500, 2, 3, 5},
      {250, 1250, 750, 5, 1, 4},   {37, 13, 999, 4, 4, 2},     {999, 1999, -999, 1, 5, 4},
      {123, 456, 789, 2, 4, 4},    {800, 200, 100, 5, 2, 3},   {1, 1, 1, 3, 2, 5},
      {0, 0, 1000, 4, 1, 5},       {1000, 2000, 0, 5, 5, 0},   {333, 667, 250, 1, 3, 6},
      {60, 1940, 420, 2, 2, 6},    {700, 300, -300, 3, 5, 2},
  };
  o.check(cases.size() == 20, "battery size");
  for (const auto& c : cases) {
    const long num = long(c.w1) * c.kf + long(c.w2) * (1000 - c.ds) + long(c.w3) * c.sim;
    const double expected = double(num) / 10000.0;
    const double got = metrics::ce_score(c.kf / 1000.0, c.ds / 1000.0, c.sim / 1000.0,
                                         {c.w1 / 10.0, c.w2 / 10.0, c.w3 / 10.0});
    o.check(close(got, expected, 1e-12),
            fmt::format("({},{},{}) w=({},{},{}): {:.15g} vs {:.15g}", c.kf, c.ds, c.sim, c.w1, c.w2, c.w3, got,
                        expected));
  }
  const double published_components = metrics::ce_score(0.111, 0.979, 0.356, {});
  o.check(close(published_components, 0.1818, 1e-4),
          fmt::format("components (0.111, 0.979, 0.356) under (0.3, 0.3, 0.4) give {:.4f}, expected 0.1818 +/- 1e-4",
                      published_components));

  const auto check_file = run_dir / "tables" / "ce_reference_check.csv";
  if (!fs::exists(check_file)) {
    o.check(false, "report table missing: " + check_file.string());
  } else {
    const auto text = io::read_text(check_file);
    o.check(text.find(fmt::format("{:.4f}", published_components)) != std::string::npos,
            "report does not show the recomputed CE");
    o.check(text.find("0.49") != std::string::npos, "report does not show the published CE 0.49");
  }
  return o;
}

// --- weight grid --------------------------------------------------------------------

Outcome weight_grid() {
  Outcome o;
  std::vector<std::array<int, 3>> expected;
  for (int a = 1; a <= 5; ++a)
    for (int b = 1; b <= 5; ++b)
      for (int c = 1; c <= 5; ++c)
        if (a + b + c == 10) expected.push_back({a, b, c});
  const auto grid = metrics::weight_grid();
  o.check(grid.size() == 18 && expected.size() == 18, fmt::format("grid has {} points", grid.size()));
  for (std::size_t i = 0; i < std::min(grid.size(), expected.size()); ++i) {
    o.check(close(grid[i].a1, expected[i][0] / 10.0, 1e-15) && close(grid[i].a2, expected[i][1] / 10.0, 1e-15) &&
                close(grid[i].a3, expected[i][2] / 10.0, 1e-15),
            fmt::format("grid point {} differs", i));
  }

  // Annotations generated by the composite under the planted weights.
  Rng rng(17);
  std::vector<metrics::CalibrationItem> items;
  std::vector<double> annotations;
  for (int i = 0; i < 40; ++i) {
    metrics::CalibrationItem it{rng.uniform01(), 2.0 * rng.uniform01(), 2.0 * rng.uniform01() - 1.0};
    items.push_back(it);
    annotations.push_back(metrics::ce_score(it.keyword_freq, it.delta_s, it.sem_sim, {0.3, 0.3, 0.4}));
  }
  for (auto method : {metrics::Correlation::pearson, metrics::Correlation::spearman}) {
    const auto r = metrics::calibrate_weights(items, annotations, method);
    o.check(r.weights == metrics::CEWeights{0.3, 0.3, 0.4},
            fmt::format("{} recovered ({}, {}, {})", metrics::to_string(method), r.weights.a1, r.weights.a2,
                        r.weights.a3));
  }
  return o;
}

// --- signed-rank test ---------------------------------------------------------------

struct BruteForce {
  double w_plus;
  double p;
};

// Average ranks by counting, then every one of the 2^n sign patterns.
BruteForce brute_wilcoxon(const std::vector<double>& d) {
  std::vector<double> nz;
  for (double x : d)
    if (x != 0.0) nz.push_back(x);
  const std::size_t n = nz.size();
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    int less = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::abs(nz[j]) < std::abs(nz[i])) ++less;
      if (std::abs(nz[j]) == std::abs(nz[i])) ++equal;
    }
    rank[i] = less + (equal + 1) / 2.0;
  }
  double w = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (nz[i] > 0) w += rank[i];
  std::size_t le = 0, ge = 0;
  const std::size_t total = std::size_t{1} << n;
  for (std::size_t mask = 0; mask < total; ++mask) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) s += rank[i];
    if (s <= w + 1e-9) ++le;
    if (s >= w - 1e-9) ++ge;
  }
  const double p = std::min(1.0, 2.0 * std::min(double(le), double(ge)) / double(total));
  return {w, p};
}

Outcome signed_rank() {
  Outcome o;
  Rng rng(99);
  int compared = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.uniform_index(10);
    std::vector<double> d(n);
    // Small integers force ties and zeros; every other sample is continuous.
    for (auto& x : d) {
      x = t % 2 == 0 ? double(int(rng.uniform_index(11)) - 5) : rng.normal() + 0.3;
    }
    if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) {
      bool threw = false;
      try {
        stats::wilcoxon_signed_rank(d);
      } catch (const DegenerateSample&) {
        threw = true;
      }
      o.check(threw, "all-zero sample accepted");
      continue;
    }
    const auto oracle = brute_wilcoxon(d);
    const auto got = stats::wilcoxon_signed_rank(d);
    ++compared;
    o.check(close(got.statistic, oracle.w_plus, 1e-12) && close(got.p_value, oracle.p, 1e-12),
            fmt::format("sample {} (n={}): W {} vs {}, p {:.15g} vs {:.15g}", t, n, got.statistic, oracle.w_plus,
                        got.p_value, oracle.p));
  }
  o.check(compared >= 150, "too few non-degenerate samples");
  const std::vector<double> three = {1, 2, 3};
  const auto r = stats::wilcoxon_signed_rank(three);
  o.check(close(r.p_value, 0.25, 1e-12), fmt::format("[1,2,3] gave p = {}", r.p_value));
  return o;
}

// --- bootstrap ----------------------------------------------------------------------

Outcome bootstrap() {
  Outcome o;
  const std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  const double mu = 0.35;
  int covered = 0;
  for (int t = 0; t < 500; ++t) {
    Rng rng(io::mix_seed(4242, t));
    std::vector<double> x(30);
    for (auto& v : x) v = mu + 0.2 * rng.normal();
    stats::BootstrapOptions opt;
    opt.seed = io::mix_seed(777, t);
    opt.threads = threads;
    const auto ci = stats::bootstrap_ci(x, opt);
    if (ci.lower <= mu && mu <= ci.upper) ++covered;
    if (t == 0) {
      const auto again = stats::bootstrap_ci(x, opt);
      opt.threads = 1;
      const auto serial = stats::bootstrap_ci(x, opt);
      o.check(again.lower == ci.lower && again.upper == ci.upper, "same seed gave a different interval");
      o.check(serial.lower == ci.lower && serial.upper == ci.upper, "thread count changed the interval");
    }
  }
  const double coverage = covered / 500.0;
  o.notes.push_back(fmt::format("coverage {:.1f}%", 100.0 * coverage));
  o.check(coverage >= 0.92 && coverage <= 0.98, "coverage outside [92%, 98%]");
  return o;
}

// --- metric oracles -----------------------------------------------------------------

Outcome metric_oracles() {
  Outcome o;
  const std::set<std::string> terms = {"inca", "quechua"};
  o.check(close(metrics::keyword_proportion("The Inca spoke Quechua", terms), 0.5, 1e-12),
          "keyword proportion of 'The Inca spoke Quechua'");
  const std::vector<std::string> two = {"The Inca spoke Quechua", "Tacos"};
  o.check(close(metrics::keyword_frequency(two, terms), 0.25, 1e-12), "keyword frequency mean");

  const features::EmbeddingVector e1({1.0, 0.0}), e11({1.0, 1.0}), neg({-2.0, 0.0});
  o.check(close(metrics::cosine_similarity(e1, e11), 0.70710678118654752, 1e-12), "cosine (1,0).(1,1)");
  o.check(close(metrics::cosine_similarity(e1, neg), -1.0, 1e-12), "cosine of opposite vectors");

  o.check(close(metrics::sentiment_diff(features::SentimentScore(0.5), features::SentimentScore(-0.25)), 0.75, 1e-12),
          "sentiment difference");
  // 6 tokens, 4 distinct.
  const std::vector<std::string> texts = {"a b a", "b c d"};
  o.check(close(metrics::ttr(texts), 4.0 / 6.0, 1e-12), "type-token ratio");
  o.check(close(metrics::avg_length(texts), 3.0, 1e-12), "average length");

  // Only the second sentence of the first response holds a term from each side.
  metrics::KeywordLexicon lexicon{terms, {"spanish", "english"}};
  const std::vector<std::string> mixed = {"The Inca spoke Quechua. Then Spanish reached the Inca. English came later.",
                                          "Tacos al pastor."};
  o.check(metrics::cooccurring_sentences(mixed[0], lexicon) == 1, "co-occurring sentence count");
  o.check(close(metrics::cooccurrence_rate(mixed, lexicon), 0.5, 1e-12), "co-occurrence rate");
  return o;
}

// --- harness ------------------------------------------------------------------------

Outcome harness_missing() {
  Outcome o;
  std::vector<corpus::QuestionRecord> questions;
  std::map<std::string, std::string> answers;
  for (int i = 0; i < 54; ++i) {
    corpus::QuestionRecord q;
    q.text = fmt::format("Question number {} about daily life?", i);
    q.source_url = fmt::format("fixture:{}", i);
    questions.push_back(q);
    // Every sixth question goes unanswered: 0, 6, ..., 48.
    if (i % 6 != 0) answers[q.text] = fmt::format("Answer {} mentions arepas and mate number {}", i, i * 7);
  }
  harness::CannedBackend backend(answers);
  const auto set = harness::collect_responses(backend, "stub", questions, {}, {});
  o.check(set.records.size() == 54, "one record per question");
  o.check(set.n_missing() == 9, fmt::format("{} missing", set.n_missing()));
  o.check(harness::format_percent(set.missing_percent()) == "16.67%",
          "missing reported as " + harness::format_percent(set.missing_percent()));

  // Pairwise deletion: the similarity mean runs over the 45 present answers only.
  std::vector<aggregation::ReferencePair> refs;
  for (const auto& q : questions) refs.push_back({q.text, "Arepas for breakfast", "Mate with friends", {}});
  features::HashedBowEmbedder emb(64);
  const auto sim = metrics::semantic_similarity(set, refs, emb);
  o.check(sim.n_present == 45 && sim.per_question_v1.size() == 45, "similarity counted missing answers");
  double sum = 0.0;
  for (const auto& r : set.records) {
    if (r.response) sum += metrics::cosine_similarity(emb.embed(*r.response), emb.embed("Arepas for breakfast"));
  }
  o.check(close(sim.sim_v1, sum / 45.0, 1e-12), "similarity mean is not over the present answers");
  return o;
}

// --- fine-tuning --------------------------------------------------------------------

Outcome finetuning() {
  Outcome o;
  const auto refs = aggregation::load_references(kSource / "fixtures" / "finetune20" / "references.csv");
  std::vector<corpus::QuestionRecord> questions;
  for (const auto& r : refs) questions.push_back({r.question, "fixture:finetune", "", corpus::Language::en});
  const auto pairs = finetune::format_pairs(questions, refs);
  o.check(pairs.size() == 20, fmt::format("{} pairs", pairs.size()));

  const auto model = tinylm::TinyModel::from_ref("tiny:0");
  const auto checksum = model.checksum();
  const finetune::TrainConfig cfg;  // defaults
  const auto result =
      finetune::train_adapter(model, "tiny:0", pairs, {}, finetune::LoraConfig{}, cfg, {kWork / "finetune"});
  o.check(result.completed && result.epochs.size() == 3, "training did not complete three epochs");
  if (result.epochs.size() == 3) {
    o.notes.push_back(fmt::format("epoch losses {:.4f} -> {:.4f}", result.epochs.front().train_loss,
                                  result.epochs.back().train_loss));
    o.check(result.epochs.back().train_loss < result.epochs.front().train_loss, "final epoch loss not below first");
  }
  o.check(result.base_checksum_before == checksum && result.base_checksum_after == checksum &&
              model.checksum() == checksum,
          "base weights changed");

  const auto zero = tinylm::Adapter::init(model.config(), finetune::LoraConfig{}.to_spec(), 5);
  const auto tokens = tinylm::encode(pairs.front().prompt_text, 512);
  const auto base = tinylm::forward_logits(model, nullptr, tokens);
  const auto with = tinylm::forward_logits(model, &zero, tokens);
  o.check((base - with).cwiseAbs().maxCoeff() <= 1e-4, "zero adapter changes the logits");
  return o;
}

// --- end-to-end determinism ---------------------------------------------------------

struct CliRun {
  int code = -1;
  fs::path dir;
};

CliRun run_cli(const fs::path& out) {
  const auto cfg = kSource / "fixtures" / "tiny10" / "fixture.cfg";
  const std::string cmd =
      fmt::format("\"{}\" run-all -q --config \"{}\" --out \"{}\" > /dev/null 2>&1", CULTURA_CLI, cfg.string(),
                  out.string());
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out / "fixture"};
}

std::vector<fs::path> compared_files(const fs::path& dir) {
  std::vector<fs::path> files = {"metrics.csv", "stats.json"};
  if (fs::exists(dir / "tables")) {
    for (const auto& e : fs::directory_iterator(dir / "tables"))
      if (e.path().extension() == ".csv") files.push_back(fs::relative(e.path(), dir));
  }
  std::sort(files.begin(), files.end());
  return files;
}

Outcome determinism(const CliRun& first) {
  Outcome o;
  const auto second = run_cli(kWork / "second");
  o.check(first.code == 0 && second.code == 0, fmt::format("exit codes {} and {}", first.code, second.code));
  const auto files = compared_files(first.dir);
  o.check(files.size() > 2, "no tables written");
  o.check(files == compared_files(second.dir), "the runs wrote different tables");
  for (const auto& f : files) {
    const bool same = fs::exists(first.dir / f) && fs::exists(second.dir / f) &&
                      io::sha256_file(first.dir / f) == io::sha256_file(second.dir / f);
    o.check(same, f.string() + " differs");
  }
  o.notes.push_back(fmt::format("{} files compared", files.size()));
  return o;
}

// --- released-data reproduction -----------------------------------------------------

Outcome reproduction() {
  const char* data = std::getenv("CULTURA_RELEASED_DATA");
  const char* endpoint = std::getenv("CULTURA_EMBED_ENDPOINT");
  if (!data || !endpoint) return Outcome::skipped("set CULTURA_RELEASED_DATA and CULTURA_EMBED_ENDPOINT to run");
  const fs::path dir = data;
  if (!fs::exists(dir / "references.csv")) return Outcome::skipped("no references.csv in " + dir.string());

  struct Published {
    const char* model;
    double v1, v2, length;
  };
  const std::vector<Published> published = {
      {"Mistral-7B", 0.336, 0.376, 164.19}, {"Zephyr-7B", 0.374, 0.413, 233.06}, {"BLOOM-7B", 0.221, 0.219, 475.53},
      {"Llama-2-7B", 0.333, 0.367, 318.00}, {"Grok", 0.312, 0.305, 21.70},       {"ChatGPT", 0.292, 0.334, 20.08},
  };

  Outcome o;
  const auto refs = aggregation::load_references(dir / "references.csv");
  std::vector<std::string> v1, v2;
  for (const auto& r : refs) {
    v1.push_back(r.v1);
    v2.push_back(r.v2);
  }
  const double len_v1 = metrics::avg_length(v1), len_v2 = metrics::avg_length(v2);
  o.check(close(len_v1, 26.91, 0.5), fmt::format("Resp V1 length {:.2f} vs 26.91", len_v1));
  o.check(close(len_v2, 45.33, 0.5), fmt::format("Resp V2 length {:.2f} vs 45.33", len_v2));

  features::HttpEmbedder embedder(endpoint);
  int models = 0;
  for (const auto& p : published) {
    const auto file = dir / harness::responses_file_name(p.model);
    if (!fs::exists(file)) continue;
    ++models;
    const auto set = harness::load_responses(file, p.model);
    const auto sim = metrics::semantic_similarity(set, refs, embedder);
    std::vector<std::string> texts;
    for (const auto& r : set.records)
      if (r.response) texts.push_back(*r.response);
    const double len = metrics::avg_length(texts);
    o.check(close(sim.sim_v1, p.v1, 0.02), fmt::format("{} V1 similarity {:.3f} vs {:.3f}", p.model, sim.sim_v1, p.v1));
    o.check(close(sim.sim_v2, p.v2, 0.02), fmt::format("{} V2 similarity {:.3f} vs {:.3f}", p.model, sim.sim_v2, p.v2));
    o.check(close(len, p.length, 0.5), fmt::format("{} length {:.2f} vs {:.2f}", p.model, len, p.length));
  }
  if (models == 0) return Outcome::skipped("no responses_<model>.csv files in " + dir.string());
  return o;
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::err);
  fs::remove_all(kWork);

  // The end-to-end run is shared: the composite-score criterion reads its
  // report table, and the determinism criterion compares it with a second run.
  const auto t0 = std::chrono::steady_clock::now();
  const auto first = run_cli(kWork / "first");
  const double first_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::vector<Criterion> criteria = {
      {"composite-score-arithmetic", 1, [&] { return composite_score(first.dir); }},
      {"weight-grid-and-recovery", 1, weight_grid},
      {"signed-rank-exact-p-values", 30, signed_rank},
      {"bootstrap-coverage-and-seeding", 60, bootstrap},
      {"metric-oracles", 1, metric_oracles},
      {"harness-missing-and-pairwise-deletion", 5, harness_missing},
      {"adapter-finetuning", 600, finetuning},
      {"end-to-end-determinism", 120, [&] { return determinism(first); }},
      {"released-data-reproduction", 0, reproduction},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.body();
    } catch (const std::exception& e) {
      out.verdict = Verdict::fail;
      out.notes.push_back(std::string("exception: ") + e.what());
    }
    double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.name == "end-to-end-determinism") seconds += first_seconds;
    if (c.budget_seconds > 0 && seconds > c.budget_seconds && out.verdict == Verdict::pass) {
      out.verdict = Verdict::fail;
      out.notes.push_back("over time budget");
    }
    const char* tag = out.verdict == Verdict::pass ? "PASS" : out.verdict == Verdict::fail ? "FAIL" : "SKIP";
    std::string budget = c.budget_seconds > 0 ? fmt::format(" / {:.0f}s", c.budget_seconds) : "";
    std::string notes;
    for (const auto& n : out.notes) notes += (notes.empty() ? " : " : "; ") + n;
    std::printf("%s %s (%.2fs%s)%s\n", tag, c.name.c_str(), seconds, budget.c_str(), notes.c_str());
    std::fflush(stdout);
    if (out.verdict == Verdict::fail) ++failures;
  }
  fs::remove_all(kWork);
  return failures == 0 ? 0 : 1;
}
