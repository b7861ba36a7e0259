#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

/// Question corpus acquisition: title filtering, deduplication, seeded
/// sampling, and pluggable forum sources.
namespace cultura::corpus {

enum class Language { en, es, pt, unknown };

std::string_view to_string(Language lang) noexcept;
/// Accepts "en", "es", "pt", "unknown"; throws InvalidArgument otherwise.
Language parse_language(std::string_view s);

/// Origin used for records that did not come from a live source.
inline constexpr std::string_view kFixtureOrigin = "fixture:";

struct QuestionRecord {
  std::string text;
  std::string source_url;
  std::string subreddit;
  Language language_hint = Language::unknown;

  friend bool operator==(const QuestionRecord&, const QuestionRecord&) = default;
};

struct FilterConfig {
  /// Ordered by tie-break priority: the first language whose list matches wins.
  std::vector<std::pair<Language, std::vector<std::string>>> interrogative_keywords;

  /// English, Spanish and Portuguese interrogative openers used for the
  /// original scrape.
  static FilterConfig defaults();

  /// Throws InvalidArgument if any keyword list is empty or a keyword is blank.
  void validate() const;
};

/// Language whose keyword list prefixes the trimmed title (case-insensitive),
/// or nullopt if none does.
std::optional<Language> match_question_language(std::string_view title, const FilterConfig& config);

bool is_question_title(std::string_view title, const FilterConfig& config);

/// Casefolded, whitespace-collapsed, trimmed text used as the dedup identity.
std::string dedupe_key(std::string_view text);

/// Keeps the first record for each dedup key, preserving input order.
std::vector<QuestionRecord> dedupe(std::span<const QuestionRecord> records);

struct Split {
  std::vector<QuestionRecord> subset;
  std::vector<QuestionRecord> remainder;
};

/// Draws `n` records without replacement. Both halves keep input order.
/// Throws InvalidArgument when n exceeds the record count.
Split sample_subset(std::span<const QuestionRecord> records, std::size_t n, std::uint64_t seed);

/// Like sample_subset, but every record whose dedup key appears in
/// `include_texts` is taken first; the rest of the subset is drawn at random.
Split sample_with_includes(std::span<const QuestionRecord> records, std::span<const std::string> include_texts,
                           std::size_t n, std::uint64_t seed);

// --- sources -----------------------------------------------------------

/// One post as returned by a forum source. `problem` is non-empty when the
/// post is malformed (missing title or URL); such posts are skipped by ingest.
struct RawPost {
  std::string id;
  std::string subreddit;
  std::string title;
  std::string url;
  std::string problem;
};

class ForumClient {
 public:
  virtual ~ForumClient() = default;
  /// Throws TransportError (carrying the subreddit) when the source is unreachable.
  virtual std::vector<RawPost> fetch(const std::string& subreddit) = 0;
  virtual std::string identity() const = 0;
};

/// Reads posts from a JSON-lines file: one object per line with string
/// fields `title`, `url`, `subreddit` and optional `id`. Lines that are not
/// JSON objects raise ParseError at load; objects missing fields are
/// returned as malformed posts.
class JsonlFixtureClient final : public ForumClient {
 public:
  explicit JsonlFixtureClient(const std::filesystem::path& path);
  static JsonlFixtureClient from_string(std::string_view content, std::string name = "<memory>");

  std::vector<RawPost> fetch(const std::string& subreddit) override;
  std::string identity() const override { return "jsonl:" + name_; }

 private:
  JsonlFixtureClient() = default;
  void load(std::string_view content);

  std::string name_;
  std::vector<RawPost> posts_;
};

/// Reddit listing client (`/r/<sub>/top.json`, optionally `/search.json`).
/// A bearer token is read from the environment variable named by
/// `token_env` (default CULTURA_FORUM_TOKEN) and is never persisted.
class RedditClient final : public ForumClient {
 public:
  struct Options {
    std::string base_url = "https://www.reddit.com";
    std::string token_env = "CULTURA_FORUM_TOKEN";
    std::string search_query;
    int limit = 100;
    int max_attempts = 3;
    int backoff_ms = 500;
    std::string user_agent = "cultura-scraper/0.1";
  };

  RedditClient() : RedditClient(Options{}) {}
  explicit RedditClient(Options options);
  std::vector<RawPost> fetch(const std::string& subreddit) override;
  std::string identity() const override { return "reddit:" + options_.base_url; }

 private:
  Options options_;
};

/// The 13 Latin American subreddits of the original scrape (bare names, no `r/`).
const std::vector<std::string>& default_subreddits();

struct IngestReport {
  std::size_t fetched = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t malformed = 0;
  std::vector<std::string> malformed_notes;
};

struct IngestOptions {
  std::size_t parallelism = 4;
};

struct IngestResult {
  std::vector<QuestionRecord> records;
  IngestReport report;
};

/// Fetches each subreddit (up to `parallelism` at a time), keeps posts whose
/// title passes the filter, and orders the result by (subreddit list
/// position, post id). Duplicates are retained.
IngestResult ingest_source(ForumClient& client, std::span<const std::string> subreddits,
                           const FilterConfig& config, IngestOptions options = {});

// --- questions CSV -------------------------------------------------------

/// Header `Question,URL,Subreddit,Language`.
void save_questions(std::span<const QuestionRecord> records, const std::filesystem::path& path);
std::vector<QuestionRecord> load_questions(const std::filesystem::path& path);

/// One question per line, `#` comments; used as a manual include list.
std::vector<std::string> load_include_list(const std::filesystem::path& path);

}  // namespace cultura::corpus
