#include "cultura/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <httplib.h>
#include <json.hpp>

#include "cultura/csv.hpp"
#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/random.hpp"
#include "cultura/text.hpp"

namespace cultura::corpus {

using nlohmann::json;

std::string_view to_string(Language lang) noexcept {
  switch (lang) {
    case Language::en:
      return "en";
    case Language::es:
      return "es";
    case Language::pt:
      return "pt";
    case Language::unknown:
      break;
  }
  return "unknown";
}

Language parse_language(std::string_view s) {
  if (s == "en") return Language::en;
  if (s == "es") return Language::es;
  if (s == "pt") return Language::pt;
  if (s == "unknown" || s.empty()) return Language::unknown;
  throw InvalidArgument("unknown language tag: " + std::string(s));
}

FilterConfig FilterConfig::defaults() {
  return FilterConfig{{
      {Language::en, {"Why", "How", "What", "When", "Where"}},
      {Language::es, {"¿", "Por qué", "Cómo", "Qué", "Dónde", "Cual"}},
      {Language::pt, {"Quem"}},
  }};
}

void FilterConfig::validate() const {
  if (interrogative_keywords.empty()) throw InvalidArgument("filter config has no keyword lists");
  for (const auto& [lang, words] : interrogative_keywords) {
    if (words.empty()) {
      throw InvalidArgument("empty keyword list for language " + std::string(to_string(lang)));
    }
    for (const auto& w : words) {
      if (text::trim(w).empty()) throw InvalidArgument("blank keyword in filter config");
    }
  }
}

namespace {

std::string match_key(std::string_view s) { return text::casefold(text::normalize_nfc(s)); }

}  // namespace

std::optional<Language> match_question_language(std::string_view title, const FilterConfig& config) {
  const std::string folded = match_key(text::trim(title));
  if (folded.empty()) return std::nullopt;
  for (const auto& [lang, words] : config.interrogative_keywords) {
    for (const auto& w : words) {
      const std::string key = match_key(w);
      if (!key.empty() && folded.starts_with(key)) return lang;
    }
  }
  return std::nullopt;
}

bool is_question_title(std::string_view title, const FilterConfig& config) {
  return match_question_language(title, config).has_value();
}

std::string dedupe_key(std::string_view text) {
  return text::collapse_whitespace(match_key(text));
}

std::vector<QuestionRecord> dedupe(std::span<const QuestionRecord> records) {
  std::vector<QuestionRecord> out;
  std::unordered_set<std::string> seen;
  for (const auto& r : records) {
    if (seen.insert(dedupe_key(r.text)).second) out.push_back(r);
  }
  return out;
}

namespace {

Split partition(std::span<const QuestionRecord> records, const std::vector<bool>& chosen) {
  Split split;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (chosen[i] ? split.subset : split.remainder).push_back(records[i]);
  }
  return split;
}

}  // namespace

Split sample_subset(std::span<const QuestionRecord> records, std::size_t n, std::uint64_t seed) {
  return sample_with_includes(records, {}, n, seed);
}

Split sample_with_includes(std::span<const QuestionRecord> records, std::span<const std::string> include_texts,
                           std::size_t n, std::uint64_t seed) {
  if (n > records.size()) {
    throw InvalidArgument("cannot sample " + std::to_string(n) + " of " + std::to_string(records.size()) +
                          " records");
  }
  std::unordered_set<std::string> wanted;
  for (const auto& t : include_texts) wanted.insert(dedupe_key(t));

  std::vector<bool> chosen(records.size(), false);
  std::size_t taken = 0;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!wanted.empty() && wanted.count(dedupe_key(records[i].text)) && taken < n) {
      chosen[i] = true;
      ++taken;
    } else {
      pool.push_back(i);
    }
  }
  Rng rng(seed);
  // Partial Fisher-Yates: the first (n - taken) slots become the draw.
  const std::size_t need = n - taken;
  for (std::size_t i = 0; i < need; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(pool.size() - i));
    std::swap(pool[i], pool[j]);
    chosen[pool[i]] = true;
  }
  return partition(records, chosen);
}

// --- fixture client --------------------------------------------------------

JsonlFixtureClient::JsonlFixtureClient(const std::filesystem::path& path) : name_(path.string()) {
  load(io::read_text(path));
}

JsonlFixtureClient JsonlFixtureClient::from_string(std::string_view content, std::string name) {
  JsonlFixtureClient client;
  client.name_ = std::move(name);
  client.load(content);
  return client;
}

void JsonlFixtureClient::load(std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(name_, line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(name_, line_no, "expected a JSON object");

    RawPost post;
    post.id = obj.contains("id") && obj["id"].is_string() ? obj["id"].get<std::string>() : std::to_string(line_no);
    if (obj.contains("subreddit") && obj["subreddit"].is_string()) post.subreddit = obj["subreddit"];
    auto str_field = [&](const char* key, std::string& dest) {
      if (!obj.contains(key) || !obj[key].is_string()) {
        post.problem += std::string(post.problem.empty() ? "" : "; ") + "missing " + key;
        return;
      }
      dest = obj[key].get<std::string>();
    };
    str_field("title", post.title);
    str_field("url", post.url);
    if (post.subreddit.empty()) {
      throw ParseError(name_, line_no, "post has no subreddit");
    }
    posts_.push_back(std::move(post));
  }
}

std::vector<RawPost> JsonlFixtureClient::fetch(const std::string& subreddit) {
  std::vector<RawPost> out;
  for (const auto& p : posts_) {
    if (p.subreddit == subreddit) out.push_back(p);
  }
  return out;
}

// --- reddit client -----------------------------------------------------------

RedditClient::RedditClient(Options options) : options_(std::move(options)) {}

std::vector<RawPost> RedditClient::fetch(const std::string& subreddit) {
  httplib::Client cli(options_.base_url);
  cli.set_follow_location(true);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(30);
  httplib::Headers headers{{"User-Agent", options_.user_agent}};
  if (const char* token = std::getenv(options_.token_env.c_str()); token && *token) {
    headers.emplace("Authorization", std::string("bearer ") + token);
  }

  std::string path = "/r/" + subreddit;
  if (options_.search_query.empty()) {
    path += "/top.json?t=all&limit=" + std::to_string(options_.limit);
  } else {
    path += "/search.json?restrict_sr=1&limit=" + std::to_string(options_.limit) +
            "&q=" + httplib::detail::encode_query_param(options_.search_query);
  }

  std::string last_error;
  for (int attempt = 0; attempt < std::max(1, options_.max_attempts); ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(options_.backoff_ms << (attempt - 1)));
    }
    auto res = cli.Get(path, headers);
    if (!res) {
      last_error = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw TransportError(subreddit, "HTTP " + std::to_string(res->status));

    json body;
    try {
      body = json::parse(res->body);
    } catch (const json::parse_error& e) {
      throw TransportError(subreddit, std::string("unparseable listing: ") + e.what());
    }
    std::vector<RawPost> posts;
    const json& children = body.contains("data") ? body["data"].value("children", json::array()) : json::array();
    for (const auto& child : children) {
      const json& d = child.value("data", json::object());
      RawPost post;
      post.subreddit = subreddit;
      post.id = d.value("id", std::string{});
      post.title = d.value("title", std::string{});
      const std::string permalink = d.value("permalink", std::string{});
      post.url = permalink.empty() ? d.value("url", std::string{}) : "https://www.reddit.com" + permalink;
      if (post.title.empty()) post.problem = "missing title";
      if (post.url.empty()) post.problem += std::string(post.problem.empty() ? "" : "; ") + "missing url";
      posts.push_back(std::move(post));
    }
    return posts;
  }
  throw TransportError(subreddit, "unreachable after " + std::to_string(options_.max_attempts) +
                                      " attempts: " + last_error);
}

const std::vector<std::string>& default_subreddits() {
  static const std::vector<std::string> subs = {
      "AskLatinAmerica", "LatinAmerica", "Mexico",    "Brazil",  "Ecuador", "Colombia", "Peru",
      "Venezuela",       "Chile",        "Argentina", "Uruguay", "Bolivia", "Paraguay",
  };
  return subs;
}

// --- ingest ------------------------------------------------------------------

namespace {

bool id_less(const std::string& a, const std::string& b) {
  // Shorter first gives numeric order for decimal and base-36 ids.
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

}  // namespace

IngestResult ingest_source(ForumClient& client, std::span<const std::string> subreddits,
                           const FilterConfig& config, IngestOptions options) {
  config.validate();
  std::vector<std::vector<RawPost>> fetched(subreddits.size());
  std::vector<std::exception_ptr> errors(subreddits.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < subreddits.size(); i = next++) {
      try {
        fetched[i] = client.fetch(subreddits[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::clamp<std::size_t>(options.parallelism, 1, std::max<std::size_t>(1, subreddits.size()));
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  IngestResult result;
  for (std::size_t i = 0; i < subreddits.size(); ++i) {
    auto& posts = fetched[i];
    std::stable_sort(posts.begin(), posts.end(), [](const RawPost& a, const RawPost& b) { return id_less(a.id, b.id); });
    for (const auto& post : posts) {
      ++result.report.fetched;
      if (!post.problem.empty()) {
        ++result.report.malformed;
        result.report.malformed_notes.push_back(subreddits[i] + "/" + post.id + ": " + post.problem);
        continue;
      }
      auto lang = match_question_language(post.title, config);
      if (!lang) {
        ++result.report.rejected;
        continue;
      }
      ++result.report.accepted;
      result.records.push_back({text::trim(post.title), post.url, subreddits[i], *lang});
    }
  }
  return result;
}

// --- files ---------------------------------------------------------------------

void save_questions(std::span<const QuestionRecord> records, const std::filesystem::path& path) {
  csv::Writer w({"Question", "URL", "Subreddit", "Language"});
  for (const auto& r : records) w.add({r.text, r.source_url, r.subreddit, std::string(to_string(r.language_hint))});
  w.save(path);
}

std::vector<QuestionRecord> load_questions(const std::filesystem::path& path) {
  const auto table = csv::read_file_with_header(path, {"Question", "URL", "Subreddit", "Language"});
  std::vector<QuestionRecord> out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    if (text::trim(row[0]).empty()) throw ParseError(path.string(), table.row_lines[i], "empty question text");
    try {
      out.push_back({row[0], row[1], row[2], parse_language(row[3])});
    } catch (const InvalidArgument& e) {
      throw ParseError(path.string(), table.row_lines[i], e.what());
    }
  }
  return out;
}

std::vector<std::string> load_include_list(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::string t = text::trim(line);
    if (t.empty() || t[0] == '#') continue;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace cultura::corpus
