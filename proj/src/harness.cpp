#include "cultura/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "cultura/config.hpp"
#include "cultura/csv.hpp"
#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/text.hpp"

namespace cultura::harness {

using nlohmann::json;

void GenerationParams::validate() const {
  if (max_new_tokens < 1) throw InvalidArgument("max_new_tokens must be positive");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("temperature must be a finite non-negative number");
  }
}

ResponseRecord ResponseRecord::ok(std::string question, std::string response, std::string model) {
  if (text::trim(response).empty()) return missing(std::move(question), std::move(model), "empty response");
  return {std::move(question), std::move(response), std::move(model), ResponseStatus::ok, std::nullopt};
}

ResponseRecord ResponseRecord::missing(std::string question, std::string model, std::optional<std::string> note) {
  return {std::move(question), std::nullopt, std::move(model), ResponseStatus::missing, std::move(note)};
}

std::size_t ResponseSet::n_present() const noexcept {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.present(); }));
}

std::size_t ResponseSet::n_missing() const noexcept { return records.size() - n_present(); }

double ResponseSet::missing_percent() const noexcept {
  if (records.empty()) return 0.0;
  return 100.0 * static_cast<double>(n_missing()) / static_cast<double>(records.size());
}

std::string format_percent(double percent, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f%%", decimals, percent);
  return buf;
}

// --- canned ---------------------------------------------------------------------

CannedBackend::CannedBackend(std::map<std::string, std::string> answers, std::string source)
    : answers_(std::move(answers)), source_(std::move(source)) {}

CannedBackend CannedBackend::from_csv(const std::filesystem::path& path) {
  const auto table = csv::read_file_with_header(path, {"Question", "Response"});
  std::map<std::string, std::string> answers;
  for (const auto& row : table.rows) answers.emplace(row[0], row[1]);
  return CannedBackend(std::move(answers), path.filename().string());
}

std::string CannedBackend::generate(std::string_view prompt, const GenerationParams&) {
  auto it = answers_.find(std::string(prompt));
  if (it == answers_.end() || text::trim(it->second).empty()) {
    throw ProviderError("no recorded answer");
  }
  return it->second;
}

// --- http -------------------------------------------------------------------------

HttpJsonBackend::HttpJsonBackend(Options options) : options_(std::move(options)) {
  if (options_.endpoint.empty()) throw ConfigError("http backend needs an endpoint");
}

namespace {

httplib::Headers auth_headers(const std::string& env_name) {
  httplib::Headers headers;
  if (!env_name.empty()) {
    if (const char* token = std::getenv(env_name.c_str()); token && *token) {
      headers.emplace("Authorization", std::string("Bearer ") + token);
    }
  }
  return headers;
}

}  // namespace

void HttpJsonBackend::check_available() {
  httplib::Client cli(options_.endpoint);
  cli.set_connection_timeout(5);
  auto res = cli.Get(options_.health_path, auth_headers(options_.auth_env));
  if (!res) throw TransportError(options_.endpoint, "unreachable: " + httplib::to_string(res.error()));
}

std::string HttpJsonBackend::generate(std::string_view prompt, const GenerationParams& params) {
  httplib::Client cli(options_.endpoint);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(options_.timeout_seconds);
  json body = {{"prompt", std::string(prompt)},
               {"max_new_tokens", params.max_new_tokens},
               {"temperature", params.temperature},
               {"seed", params.seed}};
  auto res = cli.Post(options_.generate_path, auth_headers(options_.auth_env), body.dump(), "application/json");
  if (!res) throw TransportError(options_.endpoint, httplib::to_string(res.error()));
  if (res->status != 200) throw ProviderError("HTTP " + std::to_string(res->status));
  json reply;
  try {
    reply = json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw ProviderError(std::string("unparseable reply: ") + e.what());
  }
  if (!reply.is_object() || !reply.contains("text") || !reply["text"].is_string()) {
    throw ProviderError("reply has no string field 'text'");
  }
  return reply["text"].get<std::string>();
}

// --- collection -----------------------------------------------------------------------

ResponseSet collect_responses(ModelBackend& backend, const std::string& model_name,
                              std::span<const corpus::QuestionRecord> questions, const GenerationParams& params,
                              CollectOptions options) {
  if (questions.empty()) throw InvalidArgument("no questions to collect responses for");
  params.validate();
  backend.check_available();

  ResponseSet set;
  set.model_name = model_name;
  set.records.resize(questions.size());

  auto run_one = [&](std::size_t i) {
    const std::string& q = questions[i].text;
    GenerationParams p = params;
    p.seed = io::mix_seed(params.seed, i);
    std::string note;
    for (int attempt = 0; attempt <= std::max(0, options.retries); ++attempt) {
      try {
        std::string out = backend.generate(q, p);
        if (!text::trim(out).empty()) {
          set.records[i] = ResponseRecord::ok(q, std::move(out), model_name);
          return;
        }
        note = "empty response";
      } catch (const std::exception& e) {
        note = e.what();
      }
    }
    spdlog::warn("{}: question {} marked missing: {}", model_name, i + 1, note);
    set.records[i] = ResponseRecord::missing(q, model_name, note);
  };

  const std::size_t workers =
      backend.thread_safe() ? std::clamp<std::size_t>(options.parallelism, 1, questions.size()) : 1;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < questions.size(); i = next++) run_one(i);
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }

  if (set.n_missing() > 0) {
    spdlog::info("{}: {} of {} responses missing ({})", model_name, set.n_missing(), set.records.size(),
                 format_percent(set.missing_percent()));
  }
  return set;
}

// --- files --------------------------------------------------------------------------------

std::string responses_file_name(std::string_view model_name) {
  return "responses_" + std::string(model_name) + ".csv";
}

void save_responses(const ResponseSet& set, const std::filesystem::path& path) {
  csv::Writer w({"Question", "Response"});
  for (const auto& r : set.records) w.add({r.question, r.present() ? *r.response : std::string{}});
  w.save(path);
}

ResponseSet load_responses(const std::filesystem::path& path, std::string model_name) {
  const auto table = csv::read_file_with_header(path, {"Question", "Response"});
  ResponseSet set;
  set.model_name = std::move(model_name);
  for (const auto& row : table.rows) {
    if (text::trim(row[1]).empty()) {
      set.records.push_back(ResponseRecord::missing(row[0], set.model_name));
    } else {
      set.records.push_back(ResponseRecord::ok(row[0], row[1], set.model_name));
    }
  }
  return set;
}

ResponseSet load_responses(const std::filesystem::path& path) {
  std::string stem = path.stem().string();
  constexpr std::string_view prefix = "responses_";
  if (stem.starts_with(prefix)) stem = stem.substr(prefix.size());
  return load_responses(path, stem);
}

BackendSpec BackendSpec::load(const std::filesystem::path& path) {
  const Config cfg = Config::load(path);
  BackendSpec spec;
  spec.name = cfg.get_string("name");
  spec.kind = cfg.get_string("kind");
  spec.endpoint = cfg.get_string("endpoint", "");
  spec.auth_env = cfg.get_string("auth_env", "");
  if (auto ref = cfg.find("model_path")) {
    // `tiny:<seed>` references are not paths.
    spec.model_path_or_ref = ref->starts_with("tiny:") ? std::filesystem::path(*ref) : cfg.get_path("model_path");
  }
  if (cfg.has("path")) spec.canned_path = cfg.get_path("path");
  spec.params.max_new_tokens = static_cast<int>(cfg.get_int("max_new_tokens", spec.params.max_new_tokens));
  spec.params.temperature = cfg.get_double("temperature", spec.params.temperature);
  spec.params.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  spec.parallelism = static_cast<std::size_t>(cfg.get_int("parallelism", 1));
  spec.params.validate();
  static const std::vector<std::string> kinds = {"local", "http", "echo", "canned"};
  if (std::find(kinds.begin(), kinds.end(), spec.kind) == kinds.end()) {
    throw ConfigError(path.string() + ": unknown backend kind '" + spec.kind + "'");
  }
  if (spec.name.empty() || spec.name.find_first_of("/\\ ") != std::string::npos) {
    throw ConfigError(path.string() + ": backend name must be non-empty without spaces or slashes");
  }
  return spec;
}

}  // namespace cultura::harness
