#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

#include <json.hpp>

#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/pipeline.hpp"

using namespace cultura;
using namespace cultura::pipeline;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = CULTURA_SOURCE_DIR;
const fs::path kFixture = kSource / "fixtures" / "tiny10";
const fs::path kTmp = fs::temp_directory_path() / "cultura_pipeline_test";

// Fixture config with fine-tuning off, written with absolute paths.
fs::path write_config(const std::string& name, const std::string& extra = "") {
  const auto lex = kSource / "data" / "lexicons";
  std::string cfg = "seed = 2024\n" + extra +
                    "sentiment_provider = double:lexicon\n"
                    "embedding_provider = double:hashed-bow\n"
                    "[providers]\n"
                    "positive_terms = " + (lex / "sentiment_positive.txt").string() + "\n" +
                    "negative_terms = " + (lex / "sentiment_negative.txt").string() + "\n" +
                    "[scrape]\nposts = " + (kFixture / "posts.jsonl").string() + "\n" +
                    "subreddits = AskLatinAmerica, Mexico, Peru, Brazil, Bolivia\nsubset_size = 10\n"
                    "[collect]\nbackends = " + (kFixture / "backends" / "alpha.cfg").string() + ", " +
                    (kFixture / "backends" / "beta.cfg").string() + ", " + (kFixture / "backends" / "echo.cfg").string() +
                    "\n[aggregate]\nuser_responses = " + (kFixture / "user_responses.csv").string() + "\n" +
                    "[metrics]\nlatin_american_terms = " + (lex / "latin_american_terms.txt").string() + "\n" +
                    "western_terms = " + (lex / "western_terms.txt").string() + "\n" +
                    "[stats]\nresamples = 500\n"
                    "[calibrate]\nannotations = " + (kFixture / "annotations.csv").string() + "\n" +
                    "[finetune]\nenabled = false\n"
                    "[report]\ntsne_iterations = 200\n";
  const fs::path path = kTmp / "configs" / name;
  io::write_text(path, cfg);
  return path;
}

Run open_run(const fs::path& config, const fs::path& out, std::optional<std::uint64_t> seed = {}) {
  return Run::open({config, seed, out});
}

// Every file except the manifest (timestamps) and the feature cache.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "manifest.json" || rel.starts_with("cache/")) continue;
    out[rel] = io::sha256_file(e.path());
  }
  return out;
}

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome cli(const std::string& args) {
  const std::string cmd = std::string(CULTURA_CLI) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) o.output += buf.data();
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

}  // namespace

TEST_CASE("sequential stages reproduce run-all byte for byte") {
  fs::remove_all(kTmp);
  const auto cfg = write_config("a.cfg", "run_id = same\n");
  auto all = open_run(cfg, kTmp / "all");
  all.run_all();
  auto staged = open_run(cfg, kTmp / "staged");
  for (const auto& s : Run::stage_names()) staged.run_stage(s);
  const auto a = snapshot(all.dir());
  CHECK(a == snapshot(staged.dir()));
  CHECK(a.count("metrics.csv") == 1);
  CHECK(a.count("stats.json") == 1);
  CHECK(a.count("tables/ce_scores.csv") == 1);
  CHECK(a.count("tables/lexical_diversity.csv") == 1);
  CHECK(a.count("tables/semantic_similarity.csv") == 1);
  CHECK(a.count("tables/ce_reference_check.csv") == 1);
  CHECK(a.count("figures/sentiment_violin.svg") == 1);
  CHECK(a.count("projections/all_responses_isomap.csv") == 1);
  CHECK(a.count("tables/finetune_improvement.csv") == 0);

  // Feature caches are disposable.
  fs::remove_all(all.dir() / "cache");
  all.evaluate();
  all.report();
  CHECK(snapshot(all.dir()) == a);
}

TEST_CASE("manifest records stages, inputs and artifacts") {
  const auto cfg = write_config("m.cfg", "run_id = manifest\n");
  auto run = open_run(cfg, kTmp / "m");
  run.run_all();
  const auto m = nlohmann::json::parse(io::read_text(run.dir() / "manifest.json"));
  CHECK(m["manifest_id"] == run.manifest_id());
  CHECK(m["stages"]["evaluate"]["status"] == "ok");
  CHECK(m["stages"]["finetune"]["status"] == "skipped");
  CHECK(m["stages"]["calibrate"]["status"] == "ok");
  CHECK(m["inputs"]["providers"]["sentiment"] == "double:lexicon");
  CHECK(m["inputs"]["files"].contains("metrics.latin_american_terms"));
  CHECK(m["artifacts"]["metrics.csv"] == io::sha256_file(run.dir() / "metrics.csv"));
  const auto stats = nlohmann::json::parse(io::read_text(run.dir() / "stats.json"));
  CHECK(stats["manifest_id"] == run.manifest_id());
  CHECK(stats["sentiment_tests"]["beta"]["n_effective"].get<int>() <= 8);
  for (const char* k : {"lower", "upper", "level", "resamples", "seed"}) {
    CHECK(stats["similarity_intervals"]["alpha"]["v1"].contains(k));
  }
  CHECK(io::read_text(run.dir() / "figures" / "keyword_frequency.svg").find(run.manifest_id()) != std::string::npos);
  // Beta has two unanswered questions.
  CHECK(io::read_text(run.dir() / "figures" / "sentiment_violin.svg").find("(n=8)") != std::string::npos);
}

TEST_CASE("seed changes the manifest and the default run id") {
  const auto cfg = write_config("s.cfg");
  const auto a = open_run(cfg, kTmp / "s", 1);
  const auto b = open_run(cfg, kTmp / "s", 2);
  CHECK(a.manifest_id() != b.manifest_id());
  CHECK(a.dir() != b.dir());
  CHECK(a.dir().filename().string().starts_with("run-"));
  CHECK(open_run(cfg, kTmp / "s", 1).manifest_id() == a.manifest_id());
}

TEST_CASE("missing stage input names the file") {
  const auto cfg = write_config("e.cfg", "run_id = empty\n");
  auto run = open_run(cfg, kTmp / "e");
  try {
    run.evaluate();
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("references.csv") != std::string::npos);
  }
  const auto m = nlohmann::json::parse(io::read_text(run.dir() / "manifest.json"));
  CHECK(m["stages"]["evaluate"]["status"] == "failed");
}

TEST_CASE("provider and backend factories") {
  Config c;
  c.set("sentiment_provider", "double:vader");
  CHECK_THROWS_AS(make_sentiment_provider(c), ConfigError);
  c.set("embedding_provider", "double:hashed-bow");
  c.set("providers.embedding_dimension", "16");
  CHECK(make_embedding_provider(c)->dimension() == 16);
  c.set("embedding_provider", "builtin:http");
  c.set("providers.embedding_endpoint", "http://127.0.0.1:9");
  CHECK(make_embedding_provider(c)->identity().find("127.0.0.1:9") != std::string::npos);

  const auto alpha = harness::BackendSpec::load(kFixture / "backends" / "alpha.cfg");
  CHECK(make_backend(alpha)->identity() == "canned:canned_alpha.csv");
  const auto tiny = harness::BackendSpec::load(kFixture / "backends" / "tiny.cfg");
  CHECK(make_backend(tiny)->identity() == "local:tiny:0");
  harness::BackendSpec bad;
  bad.name = "x";
  bad.kind = "http";
  CHECK_THROWS_AS(make_backend(bad), ConfigError);
}

TEST_CASE("command line exit codes") {
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("evaluate").code == 2);  // --config is required
  CHECK(cli("evaluate --config x.cfg --bogus").code == 2);
  CHECK(cli("--help").code == 0);

  const auto missing = cli("evaluate --config " + (kTmp / "nope.cfg").string());
  CHECK(missing.code == 1);
  CHECK(missing.output.find("nope.cfg") != std::string::npos);

  const auto cfg = write_config("cli.cfg", "run_id = cli\n");
  const std::string common = "--config " + cfg.string() + " --out " + (kTmp / "cli").string() + " -q";
  for (const char* stage : {"scrape", "collect", "aggregate", "evaluate"}) {
    CHECK(cli(std::string(stage) + " " + common).code == 0);
  }
  CHECK(fs::exists(kTmp / "cli" / "cli" / "metrics.csv"));
  fs::remove(kTmp / "cli" / "cli" / "references.csv");
  const auto broken = cli("evaluate " + common);
  CHECK(broken.code == 1);
  CHECK(broken.output.find("references.csv") != std::string::npos);
  fs::remove_all(kTmp);
}
