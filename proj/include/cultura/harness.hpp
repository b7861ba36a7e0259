#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cultura/corpus.hpp"

/// Response collection from pluggable model backends.
namespace cultura::harness {

struct GenerationParams {
  int max_new_tokens = 512;
  /// 0 selects greedy decoding.
  double temperature = 0.7;
  /// Base seed; collection derives a per-question seed from it.
  std::uint64_t seed = 0;

  void validate() const;
};

enum class ResponseStatus { ok, missing };

struct ResponseRecord {
  std::string question;
  std::optional<std::string> response;
  std::string model_name;
  ResponseStatus status = ResponseStatus::missing;
  std::optional<std::string> failure_note;

  static ResponseRecord ok(std::string question, std::string response, std::string model);
  static ResponseRecord missing(std::string question, std::string model, std::optional<std::string> note = {});

  bool present() const noexcept { return status == ResponseStatus::ok; }
};

struct ResponseSet {
  std::string model_name;
  std::vector<ResponseRecord> records;

  std::size_t n_present() const noexcept;
  std::size_t n_missing() const noexcept;
  /// Missing responses as a percentage of all records (0 for an empty set).
  double missing_percent() const noexcept;
};

/// "16.67%" style rendering used in logs and reports.
std::string format_percent(double percent, int decimals = 2);

/// Anything that turns a prompt into text.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  /// Throws on failure; collection treats any exception as a per-question failure.
  virtual std::string generate(std::string_view prompt, const GenerationParams& params) = 0;

  /// Called once before collection. Throws TransportError when the backend is
  /// wholly unreachable, which aborts collection before any record exists.
  virtual void check_available() {}

  virtual std::string identity() const = 0;

  /// True when generate() may be called concurrently.
  virtual bool thread_safe() const { return false; }
};

/// Returns the prompt unchanged.
class EchoBackend final : public ModelBackend {
 public:
  std::string generate(std::string_view prompt, const GenerationParams&) override { return std::string(prompt); }
  std::string identity() const override { return "double:echo"; }
  bool thread_safe() const override { return true; }
};

/// Replays answers from a `Question,Response` table; questions without a
/// non-empty answer fail, which collection records as missing.
class CannedBackend final : public ModelBackend {
 public:
  explicit CannedBackend(std::map<std::string, std::string> answers, std::string source = "<memory>");
  static CannedBackend from_csv(const std::filesystem::path& path);

  std::string generate(std::string_view prompt, const GenerationParams&) override;
  std::string identity() const override { return "canned:" + source_; }
  bool thread_safe() const override { return true; }

 private:
  std::map<std::string, std::string> answers_;
  std::string source_;
};

/// POSTs `{"prompt", "max_new_tokens", "temperature", "seed"}` as JSON and
/// reads the `text` field of the JSON reply. An optional bearer token is
/// taken from the environment variable named in `auth_env`.
class HttpJsonBackend final : public ModelBackend {
 public:
  struct Options {
    std::string endpoint;  // scheme://host[:port]
    std::string generate_path = "/generate";
    std::string health_path = "/health";
    std::string auth_env;
    int timeout_seconds = 120;
  };

  explicit HttpJsonBackend(Options options);

  std::string generate(std::string_view prompt, const GenerationParams& params) override;
  void check_available() override;
  std::string identity() const override { return "http:" + options_.endpoint + options_.generate_path; }
  bool thread_safe() const override { return true; }

 private:
  Options options_;
};

struct CollectOptions {
  /// Concurrent questions; clamped to 1 for backends that are not thread-safe.
  std::size_t parallelism = 1;
  /// Extra attempts after the first failure of a question.
  int retries = 1;
};

/// One record per question, in question order. Per-question failures (after
/// retries) become missing records with a note; they never abort the run.
/// Throws InvalidArgument for an empty question list.
ResponseSet collect_responses(ModelBackend& backend, const std::string& model_name,
                              std::span<const corpus::QuestionRecord> questions, const GenerationParams& params,
                              CollectOptions options = {});

/// Header `Question,Response`; missing responses are empty cells.
void save_responses(const ResponseSet& set, const std::filesystem::path& path);
ResponseSet load_responses(const std::filesystem::path& path, std::string model_name);
/// Model name taken from a `responses_<model>.csv` file name.
ResponseSet load_responses(const std::filesystem::path& path);

std::string responses_file_name(std::string_view model_name);

/// Provider config file (key-value, see Config):
///
///     name = mistral
///     kind = local | http | echo | canned
///     model_path = tiny:7            # local
///     endpoint = http://host:8080    # http
///     auth_env = MY_TOKEN            # http, optional
///     path = answers.csv             # canned
///     max_new_tokens = 512
///     temperature = 0.7
///     parallelism = 1
struct BackendSpec {
  std::string name;
  std::string kind;
  std::string endpoint;
  std::string auth_env;
  std::filesystem::path model_path_or_ref;
  std::filesystem::path canned_path;
  GenerationParams params;
  std::size_t parallelism = 1;

  static BackendSpec load(const std::filesystem::path& path);
};

}  // namespace cultura::harness
