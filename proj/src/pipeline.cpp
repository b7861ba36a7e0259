#include "cultura/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <map>
#include <set>

#include <json.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/spdlog.h>

#include "cultura/aggregation.hpp"
#include "cultura/corpus.hpp"
#include "cultura/csv.hpp"
#include "cultura/error.hpp"
#include "cultura/finetune.hpp"
#include "cultura/io.hpp"
#include "cultura/metrics.hpp"
#include "cultura/random.hpp"
#include "cultura/report.hpp"
#include "cultura/stats.hpp"
#include "cultura/text.hpp"

namespace cultura::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Run-directory layout.
constexpr const char* kQuestions = "questions.csv";
constexpr const char* kRemainder = "questions_remainder.csv";
constexpr const char* kResponsesDir = "responses";
constexpr const char* kReferences = "references.csv";
constexpr const char* kMetrics = "metrics.csv";
constexpr const char* kStats = "stats.json";
constexpr const char* kEvaluationDir = "evaluation";
constexpr const char* kTablesDir = "tables";
constexpr const char* kFiguresDir = "figures";
constexpr const char* kProjectionsDir = "projections";
constexpr const char* kFinetuneDir = "finetune";
constexpr const char* kManifest = "manifest.json";
constexpr const char* kCacheDir = "cache";

const csv::Row kEvaluationHeader = {"Question",           "LLM Sentiment", "User Sentiment", "User Minus LLM",
                                    "Keyword Proportion", "Sim V1",        "Sim V2"};
const csv::Row kAnnotationHeader = {"Model", "Question", "Annotation"};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fixed(double v, int decimals) { return fmt::format("{:.{}f}", v, decimals); }
std::string exact(double v) { return fmt::format("{:.17g}", v); }

double parse_number(const std::string& cell, const fs::path& path, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::logic_error&) {
    throw ParseError(path.string(), line, "not a number: '" + cell + "'");
  }
}

fs::path resolve(const Config& cfg, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : cfg.base_dir() / path;
}

std::set<std::string> load_terms(const fs::path& path) { return text::parse_term_list(io::read_text(path)); }

std::string sentiment_identity(const Config& cfg) {
  const auto kind = cfg.get_string("sentiment_provider", "double:lexicon");
  if (kind == "double:lexicon") return kind;
  return make_sentiment_provider(cfg)->identity();
}

std::string embedding_identity(const Config& cfg) {
  const auto kind = cfg.get_string("embedding_provider", "double:hashed-bow");
  if (kind == "double:hashed-bow") {
    return features::HashedBowEmbedder(static_cast<std::size_t>(cfg.get_int("providers.embedding_dimension", 64)))
        .identity();
  }
  return make_embedding_provider(cfg)->identity();
}

metrics::CEWeights configured_weights(const Config& cfg) {
  if (!cfg.has("metrics.weights")) return {};
  const auto w = cfg.get_doubles("metrics.weights");
  if (w.size() != 3) throw ConfigError("metrics.weights needs three values");
  metrics::CEWeights weights{w[0], w[1], w[2]};
  weights.validate();
  return weights;
}

metrics::KeywordLexicon load_lexicon(const Config& cfg) {
  return metrics::KeywordLexicon::load(cfg.get_path("metrics.latin_american_terms"),
                                       cfg.get_path("metrics.western_terms"));
}

std::vector<fs::path> response_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "no responses collected");
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.starts_with("responses_") && name.ends_with(".csv")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError(dir.string(), "no responses_<model>.csv files");
  return out;
}

struct EvaluationFile {
  std::vector<std::string> questions;
  std::vector<double> llm_sentiment, user_sentiment, user_minus_llm, keyword_proportion, sim_v1, sim_v2;
};

void save_evaluation(const metrics::ModelEvaluation& ev, const fs::path& path) {
  csv::Writer w(kEvaluationHeader);
  for (std::size_t i = 0; i < ev.present_questions.size(); ++i) {
    w.add({ev.present_questions[i], exact(ev.llm_sentiments[i]), exact(ev.user_sentiments[i]),
           exact(ev.user_minus_llm[i]), exact(ev.keyword_proportions[i]), exact(ev.sim_v1[i]), exact(ev.sim_v2[i])});
  }
  w.save(path);
}

EvaluationFile load_evaluation(const fs::path& path) {
  const auto table = csv::read_file_with_header(path, kEvaluationHeader);
  EvaluationFile f;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    const auto line = table.row_lines[i];
    f.questions.push_back(r[0]);
    f.llm_sentiment.push_back(parse_number(r[1], path, line));
    f.user_sentiment.push_back(parse_number(r[2], path, line));
    f.user_minus_llm.push_back(parse_number(r[3], path, line));
    f.keyword_proportion.push_back(parse_number(r[4], path, line));
    f.sim_v1.push_back(parse_number(r[5], path, line));
    f.sim_v2.push_back(parse_number(r[6], path, line));
  }
  return f;
}

json interval_json(const stats::ConfidenceInterval& ci) {
  return {{"lower", ci.lower},         {"upper", ci.upper}, {"level", ci.level},
          {"resamples", ci.resamples}, {"seed", ci.seed},   {"estimate", ci.estimate}};
}

void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  const auto content = io::read_text(path);
  try {
    return json::parse(content);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

finetune::TrainConfig train_config(const Config& cfg, std::uint64_t seed) {
  finetune::TrainConfig t;
  t.epochs = static_cast<int>(cfg.get_int("finetune.epochs", t.epochs));
  t.batch_size = static_cast<int>(cfg.get_int("finetune.batch_size", t.batch_size));
  t.grad_accumulation = static_cast<int>(cfg.get_int("finetune.grad_accumulation", t.grad_accumulation));
  t.precision = cfg.get_string("finetune.precision", t.precision);
  t.learning_rate = cfg.get_double("finetune.learning_rate", t.learning_rate);
  t.weight_decay = cfg.get_double("finetune.weight_decay", t.weight_decay);
  t.warmup_steps = static_cast<int>(cfg.get_int("finetune.warmup_steps", t.warmup_steps));
  t.max_sequence_tokens = static_cast<int>(cfg.get_int("finetune.max_sequence_tokens", t.max_sequence_tokens));
  t.train_fraction = cfg.get_double("finetune.train_fraction", t.train_fraction);
  t.answer_only_loss = cfg.get_bool("finetune.answer_only_loss", t.answer_only_loss);
  t.seed = io::mix_seed(seed, 7);
  t.validate();
  return t;
}

finetune::LoraConfig lora_config(const Config& cfg) {
  finetune::LoraConfig l;
  l.rank = static_cast<int>(cfg.get_int("finetune.lora_rank", l.rank));
  l.scaling = cfg.get_double("finetune.lora_scaling", l.scaling);
  if (cfg.has("finetune.lora_targets")) l.target_projections = cfg.get_list("finetune.lora_targets");
  l.to_spec();  // validates
  return l;
}

std::string manifest_tag(const std::string& id) { return "manifest " + id; }

}  // namespace

// --- factories --------------------------------------------------------------------------

std::shared_ptr<features::SentimentProvider> make_sentiment_provider(const Config& cfg) {
  const auto kind = cfg.get_string("sentiment_provider", "double:lexicon");
  if (kind == "double:lexicon") {
    return std::make_shared<features::LexiconSentiment>(load_terms(cfg.get_path("providers.positive_terms")),
                                                        load_terms(cfg.get_path("providers.negative_terms")));
  }
  if (kind == "builtin:http") {
    return std::make_shared<features::HttpSentiment>(cfg.get_string("providers.sentiment_endpoint"),
                                                     cfg.get_string("providers.sentiment_model", ""));
  }
  throw ConfigError("unknown sentiment_provider '" + kind + "' (expected double:lexicon or builtin:http)");
}

std::shared_ptr<features::EmbeddingProvider> make_embedding_provider(const Config& cfg) {
  const auto kind = cfg.get_string("embedding_provider", "double:hashed-bow");
  if (kind == "double:hashed-bow") {
    return std::make_shared<features::HashedBowEmbedder>(
        static_cast<std::size_t>(cfg.get_int("providers.embedding_dimension", 64)));
  }
  if (kind == "builtin:http") {
    return std::make_shared<features::HttpEmbedder>(cfg.get_string("providers.embedding_endpoint"),
                                                    cfg.get_string("providers.embedding_model", ""));
  }
  throw ConfigError("unknown embedding_provider '" + kind + "' (expected double:hashed-bow or builtin:http)");
}

std::unique_ptr<harness::ModelBackend> make_backend(const harness::BackendSpec& spec) {
  if (spec.kind == "echo") return std::make_unique<harness::EchoBackend>();
  if (spec.kind == "canned") {
    if (spec.canned_path.empty()) throw ConfigError("canned backend '" + spec.name + "' needs `path`");
    return std::make_unique<harness::CannedBackend>(harness::CannedBackend::from_csv(spec.canned_path));
  }
  if (spec.kind == "http") {
    harness::HttpJsonBackend::Options o;
    o.endpoint = spec.endpoint;
    o.auth_env = spec.auth_env;
    if (o.endpoint.empty()) throw ConfigError("http backend '" + spec.name + "' needs `endpoint`");
    return std::make_unique<harness::HttpJsonBackend>(o);
  }
  if (spec.kind == "local") {
    if (spec.model_path_or_ref.empty()) throw ConfigError("local backend '" + spec.name + "' needs `model_path`");
    return std::make_unique<finetune::LocalModelBackend>(
        finetune::LocalModelBackend::open(spec.model_path_or_ref.string()));
  }
  throw ConfigError("unknown backend kind '" + spec.kind + "'");
}

// --- run ------------------------------------------------------------------------------------

struct Run::Providers {
  std::shared_ptr<features::FeatureCache> cache = std::make_shared<features::FeatureCache>();
  fs::path cache_path;
  std::shared_ptr<features::SentimentProvider> sentiment;
  std::shared_ptr<features::EmbeddingProvider> embedder;

  void save() const { cache->save(cache_path); }
};

Run::Providers& Run::providers() {
  if (!providers_) {
    auto p = std::make_shared<Providers>();
    p->cache_path = cfg_.has("feature_cache") ? cfg_.get_path("feature_cache") : dir_ / kCacheDir / "features.tsv";
    p->cache->load(p->cache_path);
    p->sentiment = std::make_shared<features::CachedSentiment>(make_sentiment_provider(cfg_), p->cache);
    p->embedder = std::make_shared<features::CachedEmbedder>(make_embedding_provider(cfg_), p->cache);
    providers_ = std::move(p);
  }
  return *providers_;
}

Run Run::open(const RunOptions& options) {
  Run run;
  run.config_path_ = options.config_path;
  run.cfg_ = Config::load(options.config_path);
  const auto& cfg = run.cfg_;
  run.seed_ = options.seed ? *options.seed : static_cast<std::uint64_t>(cfg.get_int("seed", 0));

  // Deterministic inputs only: no timestamps, no absolute paths.
  json inputs;
  inputs["config_sha256"] = io::sha256_hex(cfg.canonical());
  inputs["seed"] = run.seed_;
  inputs["providers"] = {{"sentiment", sentiment_identity(cfg)}, {"embedding", embedding_identity(cfg)}};
  json files = json::object();
  auto hash_file = [&](const std::string& key, const fs::path& path) {
    files[key] = fs::exists(path) ? io::sha256_file(path) : std::string("absent");
  };
  for (const char* key : {"scrape.posts", "scrape.include", "aggregate.user_responses", "calibrate.annotations",
                          "providers.positive_terms", "providers.negative_terms", "metrics.latin_american_terms",
                          "metrics.western_terms"}) {
    if (cfg.has(key)) hash_file(key, cfg.get_path(key));
  }
  if (cfg.has("collect.backends")) {
    for (const auto& b : cfg.get_list("collect.backends")) {
      const fs::path path = resolve(cfg, b);
      hash_file("backend:" + path.filename().string(), path);
      if (fs::exists(path)) {
        const Config bc = Config::load(path);
        if (bc.has("path")) hash_file("backend-data:" + path.filename().string(), bc.get_path("path"));
      }
    }
  }
  inputs["files"] = files;
  run.manifest_inputs_ = inputs.dump();
  run.manifest_id_ = io::sha256_hex(run.manifest_inputs_);

  const fs::path out_root = options.out_root ? *options.out_root
                            : cfg.has("out")  ? cfg.get_path("out")
                                              : fs::path("out");
  const std::string run_id = cfg.get_string("run_id", "run-" + run.manifest_id_.substr(0, 12));
  if (run_id.empty() || run_id.find_first_of("/\\") != std::string::npos) {
    throw ConfigError("run_id must be a plain directory name");
  }
  run.dir_ = out_root / run_id;
  return run;
}

const std::vector<std::string>& Run::stage_names() {
  static const std::vector<std::string> names = {"scrape",   "collect",  "aggregate", "evaluate",
                                                 "calibrate", "finetune", "report"};
  return names;
}

void Run::run_stage(const std::string& name) {
  if (name == "scrape") return scrape();
  if (name == "collect") return collect();
  if (name == "aggregate") return aggregate();
  if (name == "evaluate") return evaluate();
  if (name == "calibrate") return calibrate();
  if (name == "finetune") return finetune();
  if (name == "report") return report();
  if (name == "run-all") return run_all();
  throw InvalidArgument("unknown stage '" + name + "'");
}

void Run::run_all() {
  for (const auto& s : stage_names()) run_stage(s);
}

template <typename F>
void Run::stage(const std::string& name, F&& body) {
  const std::string started = utc_now();
  spdlog::info("[{}] starting in {}", name, dir_.string());
  fs::create_directories(dir_);
  try {
    const std::optional<std::string> skipped = body();
    if (providers_) providers_->save();
    write_manifest(name, skipped ? "skipped" : "ok", started, skipped.value_or(""));
    spdlog::info("[{}] {}", name, skipped ? "skipped: " + *skipped : std::string("done"));
  } catch (const std::exception& e) {
    write_manifest(name, "failed", started, e.what());
    throw;
  }
}

void Run::write_manifest(const std::string& stage, const std::string& status, const std::string& started,
                         const std::string& note) {
  const fs::path path = dir_ / kManifest;
  json m;
  if (fs::exists(path)) {
    try {
      m = json::parse(io::read_text(path));
    } catch (const std::exception&) {
      m = json::object();
    }
  }
  if (!m.is_object() || m.value("manifest_id", "") != manifest_id_) {
    m = json::object();
    m["stages"] = json::object();
  }
  m["manifest_id"] = manifest_id_;
  m["run_id"] = dir_.filename().string();
  m["seed"] = seed_;
  m["inputs"] = json::parse(manifest_inputs_);
  m["config"] = {{"source", config_path_.string()}, {"entries", cfg_.entries()}};
  m["seeds"] = {{"run", seed_},
                {"sampling", io::mix_seed(seed_, 1)},
                {"finetune", io::mix_seed(seed_, 7)},
                {"finetune_test_split", io::mix_seed(seed_, 8)},
                {"projection", io::mix_seed(seed_, 9)}};
  m["settings"] = {
      {"correlation", cfg_.get_string("calibrate.correlation", "pearson")},
      {"significance_test", "wilcoxon signed-rank, two-sided, exact up to n=25"},
      {"confidence_interval", "percentile bootstrap"},
      {"ce_weights", [&] {
         const auto w = configured_weights(cfg_);
         return std::vector<double>{w.a1, w.a2, w.a3};
       }()},
      {"loss_masking", cfg_.get_bool("finetune.answer_only_loss", false) ? "answer tokens" : "all tokens"},
      {"precision", cfg_.get_string("finetune.precision", "mixed-16-bit") + " (recorded; computed in float64)"},
  };
  m["stages"][stage] = {{"status", status}, {"started_at", started}, {"finished_at", utc_now()}, {"note", note}};

  json artifacts = json::object();
  for (const auto& e : fs::recursive_directory_iterator(dir_)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir_).generic_string();
    if (rel == kManifest || rel.starts_with(std::string(kCacheDir) + "/") || rel.find(".tmp") != std::string::npos) {
      continue;
    }
    artifacts[rel] = io::sha256_file(e.path());
  }
  m["artifacts"] = artifacts;
  write_json(path, m);
}

// --- stages ---------------------------------------------------------------------------------

void Run::scrape() {
  stage("scrape", [&]() -> std::optional<std::string> {
    const auto source = cfg_.get_string("scrape.source", "jsonl");
    std::unique_ptr<corpus::ForumClient> client;
    if (source == "jsonl") {
      client = std::make_unique<corpus::JsonlFixtureClient>(cfg_.get_path("scrape.posts"));
    } else if (source == "reddit") {
      corpus::RedditClient::Options o;
      o.base_url = cfg_.get_string("scrape.base_url", o.base_url);
      o.search_query = cfg_.get_string("scrape.search_query", "");
      o.limit = static_cast<int>(cfg_.get_int("scrape.limit", o.limit));
      client = std::make_unique<corpus::RedditClient>(o);
    } else {
      throw ConfigError("scrape.source must be jsonl or reddit, got '" + source + "'");
    }
    const auto subreddits =
        cfg_.has("scrape.subreddits") ? cfg_.get_list("scrape.subreddits") : corpus::default_subreddits();
    corpus::IngestOptions io_opts;
    io_opts.parallelism = static_cast<std::size_t>(cfg_.get_int("scrape.parallelism", 4));
    const auto ingest = corpus::ingest_source(*client, subreddits, corpus::FilterConfig::defaults(), io_opts);
    const auto unique = corpus::dedupe(ingest.records);
    const auto n = static_cast<std::size_t>(cfg_.get_int("scrape.subset_size", 54));
    std::vector<std::string> includes;
    if (cfg_.has("scrape.include")) includes = corpus::load_include_list(cfg_.get_path("scrape.include"));
    const auto split = corpus::sample_with_includes(unique, includes, n, io::mix_seed(seed_, 1));
    corpus::save_questions(split.subset, dir_ / kQuestions);
    corpus::save_questions(split.remainder, dir_ / kRemainder);
    write_json(dir_ / "scrape_report.json", {{"manifest_id", manifest_id_},
                                             {"source", client->identity()},
                                             {"fetched", ingest.report.fetched},
                                             {"accepted", ingest.report.accepted},
                                             {"rejected", ingest.report.rejected},
                                             {"malformed", ingest.report.malformed},
                                             {"malformed_notes", ingest.report.malformed_notes},
                                             {"unique", unique.size()},
                                             {"subset", split.subset.size()},
                                             {"remainder", split.remainder.size()}});
    return std::nullopt;
  });
}

void Run::collect() {
  stage("collect", [&]() -> std::optional<std::string> {
    const auto questions = corpus::load_questions(dir_ / kQuestions);
    const auto backends = cfg_.get_list("collect.backends");
    if (backends.empty()) throw ConfigError("collect.backends lists no backend files");
    const int retries = static_cast<int>(cfg_.get_int("collect.retries", 1));
    // Stale files from an earlier backend list would leak into evaluation.
    fs::remove_all(dir_ / kResponsesDir);
    fs::create_directories(dir_ / kResponsesDir);
    json report = json::object();
    std::set<std::string> names;
    for (const auto& b : backends) {
      const auto spec = harness::BackendSpec::load(resolve(cfg_, b));
      if (!names.insert(spec.name).second) throw ConfigError("backend name '" + spec.name + "' used twice");
      auto backend = make_backend(spec);
      auto params = spec.params;
      params.seed = io::mix_seed(seed_ ^ spec.params.seed, io::fnv1a64(spec.name));
      const auto set = harness::collect_responses(*backend, spec.name, questions, params,
                                                  {spec.parallelism, retries});
      harness::save_responses(set, dir_ / kResponsesDir / harness::responses_file_name(spec.name));
      spdlog::info("[collect] {}: {} of {} missing ({})", spec.name, set.n_missing(), set.records.size(),
                   harness::format_percent(set.missing_percent()));
      report[spec.name] = {{"identity", backend->identity()},
                           {"kind", spec.kind},
                           {"missing", set.n_missing()},
                           {"missing_percent", harness::format_percent(set.missing_percent())},
                           {"max_new_tokens", params.max_new_tokens},
                           {"temperature", params.temperature},
                           {"seed", params.seed}};
    }
    write_json(dir_ / "collect_report.json", report);
    return std::nullopt;
  });
}

void Run::aggregate() {
  stage("aggregate", [&]() -> std::optional<std::string> {
    const auto questions = corpus::load_questions(dir_ / kQuestions);
    const auto pools = aggregation::load_user_responses(cfg_.get_path("aggregate.user_responses"));
    std::map<std::string, const aggregation::UserResponsePool*> by_question;
    for (const auto& p : pools) by_question.emplace(p.question, &p);
    auto& prov = providers();
    std::vector<aggregation::ReferencePair> refs;
    for (const auto& q : questions) {
      auto it = by_question.find(q.text);
      if (it == by_question.end()) {
        spdlog::warn("[aggregate] no user responses for question: {}", q.text);
        continue;
      }
      refs.push_back(aggregation::select_representatives(*it->second, *prov.embedder, *prov.sentiment));
    }
    if (refs.empty()) throw InvalidArgument("no question in " + std::string(kQuestions) + " has user responses");
    aggregation::save_references(refs, dir_ / kReferences);
    return std::nullopt;
  });
}

void Run::evaluate() {
  stage("evaluate", [&]() -> std::optional<std::string> {
    auto& prov = providers();
    auto refs = aggregation::load_references(dir_ / kReferences);
    for (auto& r : refs) r.s_user = aggregation::averaged_user_sentiment(r, *prov.sentiment);
    const auto lexicon = load_lexicon(cfg_);
    const metrics::EvaluationContext ctx{*prov.sentiment, *prov.embedder, lexicon, configured_weights(cfg_)};

    stats::BootstrapOptions boot;
    boot.level = cfg_.get_double("stats.level", 0.95);
    boot.resamples = static_cast<std::size_t>(cfg_.get_int("stats.resamples", 10000));
    boot.threads = static_cast<std::size_t>(cfg_.get_int("stats.threads", 4));

    fs::remove_all(dir_ / kEvaluationDir);
    fs::create_directories(dir_ / kEvaluationDir);
    std::vector<metrics::MetricRow> rows;
    json tests = json::object(), intervals = json::object();
    for (const auto& file : response_files(dir_ / kResponsesDir)) {
      const auto set = harness::load_responses(file);
      metrics::ModelEvaluation ev;
      try {
        ev = metrics::evaluate_model(set, refs, ctx);
      } catch (const UndefinedMetric& e) {
        spdlog::warn("[evaluate] {} skipped: {}", set.model_name, e.what());
        continue;
      }
      rows.push_back(ev.row);
      save_evaluation(ev, dir_ / kEvaluationDir / (set.model_name + ".csv"));
      try {
        const auto t = stats::wilcoxon_signed_rank(ev.user_minus_llm);
        tests[set.model_name] = {{"W", t.statistic},
                                 {"p", t.p_value},
                                 {"n_effective", t.n_effective},
                                 {"method", std::string(stats::to_string(t.method))},
                                 {"z", t.z}};
      } catch (const DegenerateSample& e) {
        tests[set.model_name] = {{"error", e.what()}, {"n_effective", 0}};
      }
      json sims;
      for (const auto& [key, values] : {std::pair{std::string("v1"), &ev.sim_v1}, std::pair{std::string("v2"), &ev.sim_v2}}) {
        boot.seed = io::mix_seed(seed_, io::fnv1a64("bootstrap/" + set.model_name + "/" + key));
        sims[key] = interval_json(stats::bootstrap_ci(*values, boot));
      }
      intervals[set.model_name] = sims;
    }
    if (rows.empty()) throw UndefinedMetric("no model has a present response");
    metrics::save_metrics_csv(rows, dir_ / kMetrics);
    write_json(dir_ / kStats, {{"manifest_id", manifest_id_},
                               {"sentiment_tests", tests},
                               {"similarity_intervals", intervals},
                               {"differences", "user_minus_llm"},
                               {"interval_method", "percentile"}});
    return std::nullopt;
  });
}

void Run::calibrate() {
  stage("calibrate", [&]() -> std::optional<std::string> {
    const auto annotations = cfg_.find_path("calibrate.annotations");
    if (!annotations) return "no calibrate.annotations configured";
    const auto method_name = cfg_.get_string("calibrate.correlation", "pearson");
    metrics::Correlation method;
    if (method_name == "pearson") {
      method = metrics::Correlation::pearson;
    } else if (method_name == "spearman") {
      method = metrics::Correlation::spearman;
    } else {
      throw ConfigError("calibrate.correlation must be pearson or spearman");
    }
    const auto table = csv::read_file_with_header(*annotations, kAnnotationHeader);
    std::map<std::string, EvaluationFile> evals;
    std::vector<metrics::CalibrationItem> items;
    std::vector<double> scores;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      const auto& r = table.rows[i];
      auto it = evals.find(r[0]);
      if (it == evals.end()) {
        it = evals.emplace(r[0], load_evaluation(dir_ / kEvaluationDir / (r[0] + ".csv"))).first;
      }
      const auto& ev = it->second;
      const auto pos = std::find(ev.questions.begin(), ev.questions.end(), r[1]);
      if (pos == ev.questions.end()) {
        spdlog::warn("[calibrate] {}:{}: no present response from {}; row ignored", annotations->string(),
                     table.row_lines[i], r[0]);
        continue;
      }
      const auto k = static_cast<std::size_t>(pos - ev.questions.begin());
      items.push_back({ev.keyword_proportion[k], std::abs(ev.user_minus_llm[k]), (ev.sim_v1[k] + ev.sim_v2[k]) / 2.0});
      scores.push_back(parse_number(r[2], *annotations, table.row_lines[i]));
    }
    const auto result = metrics::calibrate_weights(items, scores, method);
    fs::create_directories(dir_ / kTablesDir);
    csv::Writer grid({"a1", "a2", "a3", "Correlation"});
    const auto triples = metrics::weight_grid();
    for (std::size_t g = 0; g < triples.size(); ++g) {
      const auto& c = result.grid_correlations[g];
      grid.add({fixed(triples[g].a1, 1), fixed(triples[g].a2, 1), fixed(triples[g].a3, 1),
                c ? fixed(*c, 6) : std::string("undefined")});
    }
    grid.save(dir_ / kTablesDir / "calibration_grid.csv");

    json sensitivity;
    try {
      const auto s = metrics::sensitivity_analysis(items, configured_weights(cfg_));
      csv::Writer w({"Weight", "Delta", "a1", "a2", "a3", "Max Relative Change"});
      // Per-perturbation maxima over the items.
      std::vector<double> worst(s.perturbations.size() / std::max<std::size_t>(items.size(), 1), 0.0);
      for (std::size_t p = 0; p < s.perturbations.size(); ++p) {
        auto& slot = worst[p % worst.size()];
        slot = std::max(slot, s.perturbations[p].relative_change);
      }
      const auto perturbed = metrics::perturbed_weights(configured_weights(cfg_));
      for (std::size_t p = 0; p < perturbed.size(); ++p) {
        const auto& pw = perturbed[p];
        w.add({"a" + std::to_string(pw.weight_index + 1), fmt::format("{:+.1f}", pw.delta), fixed(pw.weights.a1, 4),
               fixed(pw.weights.a2, 4), fixed(pw.weights.a3, 4), fixed(worst[p], 6)});
      }
      w.save(dir_ / kTablesDir / "sensitivity.csv");
      sensitivity = {{"max_relative_change", s.max_relative_change}};
    } catch (const UndefinedMetric& e) {
      sensitivity = {{"error", e.what()}};
    }
    write_json(dir_ / "calibration.json",
               {{"manifest_id", manifest_id_},
                {"weights", {result.weights.a1, result.weights.a2, result.weights.a3}},
                {"correlation", result.correlation},
                {"method", std::string(metrics::to_string(result.method))},
                {"items", items.size()},
                {"sensitivity", sensitivity}});
    return std::nullopt;
  });
}

void Run::finetune() {
  stage("finetune", [&]() -> std::optional<std::string> {
    if (!cfg_.get_bool("finetune.enabled", true)) return "finetune.enabled is false";
    auto& prov = providers();
    const auto questions = corpus::load_questions(dir_ / kQuestions);
    auto refs = aggregation::load_references(dir_ / kReferences);
    for (auto& r : refs) r.s_user = aggregation::averaged_user_sentiment(r, *prov.sentiment);
    std::set<std::string> with_refs;
    for (const auto& r : refs) with_refs.insert(r.question);
    std::vector<corpus::QuestionRecord> eligible;
    for (const auto& q : questions) {
      if (with_refs.count(q.text)) eligible.push_back(q);
    }
    const auto test_n = static_cast<std::size_t>(
        cfg_.get_int("finetune.test_questions", static_cast<long long>(std::max<std::size_t>(1, eligible.size() / 10))));
    if (test_n < 1 || test_n >= eligible.size()) {
      throw ConfigError("finetune.test_questions must be between 1 and " + std::to_string(eligible.size() - 1));
    }
    std::vector<std::size_t> order(eligible.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(io::mix_seed(seed_, 8));
    rng.shuffle(std::span(order));
    std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_n));
    std::sort(test_idx.begin(), test_idx.end());
    std::vector<corpus::QuestionRecord> test, train;
    std::vector<std::string> train_texts;
    for (std::size_t i = 0; i < eligible.size(); ++i) {
      if (std::binary_search(test_idx.begin(), test_idx.end(), i)) {
        test.push_back(eligible[i]);
      } else {
        train.push_back(eligible[i]);
        train_texts.push_back(eligible[i].text);
      }
    }

    const auto tc = train_config(cfg_, seed_);
    const auto lora = lora_config(cfg_);
    const auto pairs = finetune::format_pairs(train, refs);
    const auto split = finetune::split_dataset(pairs, tc.train_fraction, tc.seed);
    const std::string model_ref = cfg_.get_string("finetune.model", "tiny:0");
    auto model = std::make_shared<const tinylm::TinyModel>(tinylm::TinyModel::from_ref(model_ref));
    const fs::path ft = dir_ / kFinetuneDir;
    finetune::TrainOptions opts{ft / "adapter", cfg_.get_bool("finetune.resume", false), 0};
    const auto result = finetune::train_adapter(*model, model_ref, split.train, split.validation, lora, tc, opts);

    const std::string base_name = cfg_.get_string("finetune.name", "tiny");
    finetune::LocalModelBackend base(model, model_ref);
    finetune::LocalModelBackend adapted(model, model_ref, std::make_shared<const tinylm::Adapter>(result.adapter),
                                        io::sha256_file(ft / "adapter" / "adapter.bin").substr(0, 16));
    const auto lexicon = load_lexicon(cfg_);
    const metrics::EvaluationContext ctx{*prov.sentiment, *prov.embedder, lexicon, configured_weights(cfg_)};
    harness::GenerationParams params;
    params.max_new_tokens = static_cast<int>(cfg_.get_int("finetune.max_new_tokens", 64));
    params.temperature = cfg_.get_double("finetune.temperature", 0.7);
    params.seed = io::mix_seed(seed_, 10);
    const auto ba = finetune::evaluate_before_after(base, base_name, adapted, base_name + "-finetuned", test,
                                                    train_texts, refs, ctx, params);
    fs::remove_all(ft / kResponsesDir);
    harness::save_responses(ba.base_responses, ft / kResponsesDir / harness::responses_file_name(base_name));
    harness::save_responses(ba.adapted_responses,
                            ft / kResponsesDir / harness::responses_file_name(base_name + "-finetuned"));
    const std::vector<metrics::MetricRow> rows = {ba.before, ba.after};
    metrics::save_metrics_csv(rows, ft / kMetrics);
    std::vector<std::string> test_texts;
    for (const auto& q : test) test_texts.push_back(q.text);
    write_json(ft / "split.json", {{"manifest_id", manifest_id_},
                                   {"base_model", base.identity()},
                                   {"adapted_model", adapted.identity()},
                                   {"test_questions", test_texts},
                                   {"train_questions", train_texts},
                                   {"train_pairs", split.train.size()},
                                   {"validation_pairs", split.validation.size()},
                                   {"first_epoch_loss", result.epochs.front().train_loss},
                                   {"final_epoch_loss", result.epochs.back().train_loss}});
    return std::nullopt;
  });
}

void Run::report() {
  stage("report", [&]() -> std::optional<std::string> {
    auto& prov = providers();
    const auto rows = metrics::load_metrics_csv(dir_ / kMetrics);
    if (rows.empty()) throw InvalidArgument(dir_.string() + "/" + kMetrics + " has no model rows");
    const json stats_doc = read_json(dir_ / kStats);
    const auto refs = aggregation::load_references(dir_ / kReferences);
    const auto lexicon = load_lexicon(cfg_);
    const auto weights = configured_weights(cfg_);
    const std::string tag = manifest_tag(manifest_id_);
    const fs::path tables = dir_ / kTablesDir, figures = dir_ / kFiguresDir, projections = dir_ / kProjectionsDir;
    fs::create_directories(tables);
    fs::remove_all(figures);
    fs::remove_all(projections);
    fs::create_directories(figures);
    fs::create_directories(projections);

    std::map<std::string, EvaluationFile> evals;
    for (const auto& r : rows) evals[r.model_name] = load_evaluation(dir_ / kEvaluationDir / (r.model_name + ".csv"));
    std::vector<std::string> v1_texts, v2_texts;
    for (const auto& r : refs) {
      v1_texts.push_back(r.v1);
      v2_texts.push_back(r.v2);
    }
    const auto lex_v1 = metrics::lexical_row("Resp V1", v1_texts, lexicon);
    const auto lex_v2 = metrics::lexical_row("Resp V2", v2_texts, lexicon);

    std::optional<std::vector<metrics::MetricRow>> ft_rows;
    if (fs::exists(dir_ / kFinetuneDir / kMetrics)) ft_rows = metrics::load_metrics_csv(dir_ / kFinetuneDir / kMetrics);

    // Tables.
    {
      csv::Writer w({"Model", "CE Score"});
      for (const auto& r : rows) w.add({r.model_name, fixed(r.ce, 3)});
      // Before/after rows cover only the held-out questions, so both are listed.
      if (ft_rows && ft_rows->size() == 2) {
        w.add({(*ft_rows)[0].model_name + " (held-out questions)", fixed((*ft_rows)[0].ce, 3)});
        w.add({(*ft_rows)[0].model_name + " (Fine-tuned, held-out questions)", fixed((*ft_rows)[1].ce, 3)});
      }
      w.save(tables / "ce_scores.csv");
    }
    {
      csv::Writer w({"Entity", "Lexical Diversity (TTR)", "Avg. Response Length (words)"});
      for (const auto* l : {&lex_v1, &lex_v2}) w.add({l->entity, fixed(l->ttr, 3), fixed(l->avg_length_words, 2)});
      for (const auto& r : rows) w.add({r.model_name, fixed(r.ttr, 3), fixed(r.avg_length_words, 2)});
      w.save(tables / "lexical_diversity.csv");
    }
    {
      csv::Writer w({"LLM", "Resp_V1", "Resp_V2"});
      csv::Writer ci({"LLM", "Resp_V1", "Resp_V1 Lower", "Resp_V1 Upper", "Resp_V2", "Resp_V2 Lower", "Resp_V2 Upper",
                      "Level", "Resamples"});
      for (const auto& r : rows) {
        w.add({r.model_name, fixed(r.sem_sim_v1, 3), fixed(r.sem_sim_v2, 3)});
        const auto& iv = stats_doc.at("similarity_intervals").at(r.model_name);
        ci.add({r.model_name, fixed(r.sem_sim_v1, 3), fixed(iv.at("v1").at("lower").get<double>(), 3),
                fixed(iv.at("v1").at("upper").get<double>(), 3), fixed(r.sem_sim_v2, 3),
                fixed(iv.at("v2").at("lower").get<double>(), 3), fixed(iv.at("v2").at("upper").get<double>(), 3),
                fixed(iv.at("v1").at("level").get<double>(), 2), std::to_string(iv.at("v1").at("resamples").get<std::size_t>())});
      }
      w.save(tables / "semantic_similarity.csv");
      ci.save(tables / "semantic_similarity_ci.csv");
    }
    {
      csv::Writer w({"Entity", "Keyword Freq."});
      for (const auto* l : {&lex_v1, &lex_v2}) w.add({l->entity, fixed(l->keyword_freq, 3)});
      for (const auto& r : rows) w.add({r.model_name, fixed(r.keyword_freq, 3)});
      w.save(tables / "keyword_frequency.csv");
    }
    {
      csv::Writer w({"Model", "Present", "Missing", "Missing (%)"});
      for (const auto& r : rows) {
        const double total = static_cast<double>(r.n_present + r.n_missing);
        w.add({r.model_name, std::to_string(r.n_present), std::to_string(r.n_missing),
               harness::format_percent(total > 0 ? 100.0 * static_cast<double>(r.n_missing) / total : 0.0)});
      }
      w.save(tables / "missing_responses.csv");
    }
    {
      csv::Writer w({"Model", "W", "p", "n_effective", "Method"});
      for (const auto& r : rows) {
        const auto& t = stats_doc.at("sentiment_tests").at(r.model_name);
        if (t.contains("error")) {
          w.add({r.model_name, "", "", "0", "undefined"});
        } else {
          w.add({r.model_name, fmt::format("{:g}", t.at("W").get<double>()), fmt::format("{:.6g}", t.at("p").get<double>()),
                 std::to_string(t.at("n_effective").get<std::size_t>()), t.at("method").get<std::string>()});
        }
      }
      w.save(tables / "sentiment_tests.csv");
    }
    if (ft_rows && ft_rows->size() == 2) {
      csv::Writer w({"Metric", "Before", "After", "% Impr."});
      for (const auto& c : metrics::improvement_report((*ft_rows)[0], (*ft_rows)[1])) {
        w.add({c.metric, fixed(c.before, 3), fixed(c.after, 3), c.percent ? fmt::format("{:+.1f}", *c.percent) : "n/a"});
      }
      w.save(tables / "finetune_improvement.csv");
    }
    {
      // The published baseline components, run through the composite as written.
      const metrics::CeReferenceCheck ref;
      const double ce = metrics::ce_score(ref.keyword_freq, ref.delta_s, ref.sem_sim, weights);
      csv::Writer w({"Quantity", "Value"});
      w.add({"Keyword Freq.", fixed(ref.keyword_freq, 3)});
      w.add({"Sentiment Diff.", fixed(ref.delta_s, 3)});
      w.add({"Semantic Sim. (mean of V1, V2)", fixed(ref.sem_sim, 3)});
      w.add({"Weights (a1 a2 a3)", fmt::format("{:.2f} {:.2f} {:.2f}", weights.a1, weights.a2, weights.a3)});
      w.add({"CE from components", fixed(ce, 4)});
      w.add({"CE as published", fixed(ref.published_ce, 2)});
      w.add({"Difference", fixed(ce - ref.published_ce, 4)});
      w.save(tables / "ce_reference_check.csv");
      spdlog::warn("[report] published baseline CE {:.2f} does not follow from its components: the composite gives {:.4f}",
                   ref.published_ce, ce);
    }

    // Figures.
    {
      std::vector<report::Series> bars = {{"Resp V1", {lex_v1.keyword_freq}}, {"Resp V2", {lex_v2.keyword_freq}}};
      for (const auto& r : rows) bars.push_back({r.model_name, {r.keyword_freq}});
      io::write_text(figures / "keyword_frequency.svg",
                     report::svg_bar_chart("Latin American keyword frequency", "keyword frequency", bars, tag));
    }
    {
      std::vector<report::Series> groups(2);
      groups[0].name = "Resp V1";
      groups[1].name = "Resp V2";
      for (const auto& r : refs) {
        groups[0].values.push_back(prov.sentiment->score(r.v1).value());
        groups[1].values.push_back(prov.sentiment->score(r.v2).value());
      }
      std::vector<report::Series> diffs;
      for (const auto& r : rows) {
        groups.push_back({r.model_name, evals[r.model_name].llm_sentiment});
        diffs.push_back({r.model_name, evals[r.model_name].user_minus_llm});
      }
      io::write_text(figures / "sentiment_violin.svg",
                     report::svg_violin_plot("Sentiment scores", "sentiment", groups, tag));
      io::write_text(figures / "sentiment_difference.svg",
                     report::svg_density_plot("Sentiment differences (user minus LLM)", "user - LLM sentiment", diffs, tag));
    }

    // Projections. Each set is named after the response sets it contains.
    report::ProjectionOptions popts;
    popts.tsne_iterations = static_cast<int>(cfg_.get_int("report.tsne_iterations", 1000));
    if (cfg_.has("report.tsne_perplexity")) popts.perplexity = cfg_.get_double("report.tsne_perplexity");
    if (cfg_.has("report.isomap_neighbors")) popts.neighbors = static_cast<int>(cfg_.get_int("report.isomap_neighbors"));
    auto project = [&](const std::string& set_name, const std::vector<std::string>& texts,
                       const std::vector<std::string>& labels) {
      if (texts.size() < 3) {
        spdlog::warn("[report] projection {} skipped: fewer than 3 responses", set_name);
        return;
      }
      std::vector<features::EmbeddingVector> emb;
      for (const auto& t : texts) emb.push_back(prov.embedder->embed(t));
      for (const auto method : {report::ProjectionMethod::isomap, report::ProjectionMethod::tsne}) {
        const auto p = report::project_embeddings(emb, labels, method, io::mix_seed(seed_, 9), popts);
        const std::string stem = set_name + "_" + std::string(report::to_string(method));
        report::save_projection_csv(p, projections / (stem + ".csv"));
        io::write_text(figures / ("projection_" + stem + ".svg"),
                       report::svg_scatter_plot(fmt::format("{} ({})", set_name, report::to_string(method)), p, tag));
      }
    };
    auto add_refs = [&](std::vector<std::string>& texts, std::vector<std::string>& labels,
                        const std::set<std::string>* only) {
      for (const auto& r : refs) {
        if (only && !only->count(r.question)) continue;
        texts.push_back(r.v1);
        labels.push_back("Resp V1");
        texts.push_back(r.v2);
        labels.push_back("Resp V2");
      }
    };
    auto add_set = [](std::vector<std::string>& texts, std::vector<std::string>& labels, const harness::ResponseSet& s) {
      for (const auto& rec : s.records) {
        if (!rec.present()) continue;
        texts.push_back(*rec.response);
        labels.push_back(s.model_name);
      }
    };
    {
      std::vector<std::string> texts, labels;
      add_refs(texts, labels, nullptr);
      for (const auto& r : rows) {
        add_set(texts, labels,
                harness::load_responses(dir_ / kResponsesDir / harness::responses_file_name(r.model_name), r.model_name));
      }
      project("all_responses", texts, labels);
    }
    if (ft_rows && ft_rows->size() == 2) {
      for (std::size_t k = 0; k < 2; ++k) {
        const auto& name = (*ft_rows)[k].model_name;
        const auto set = harness::load_responses(dir_ / kFinetuneDir / kResponsesDir / harness::responses_file_name(name), name);
        std::set<std::string> qs;
        for (const auto& rec : set.records) qs.insert(rec.question);
        std::vector<std::string> texts, labels;
        add_refs(texts, labels, &qs);
        add_set(texts, labels, set);
        project(name + (k == 0 ? "_before_finetune" : "_after_finetune"), texts, labels);
      }
    }
    return std::nullopt;
  });
}

}  // namespace cultura::pipeline
