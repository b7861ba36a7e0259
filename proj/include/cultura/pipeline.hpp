#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cultura/config.hpp"
#include "cultura/features.hpp"
#include "cultura/harness.hpp"

/// Stage orchestration. Each stage reads the config plus files written by
/// earlier stages into the run directory, writes its own files there, and
/// records its status in manifest.json. See README.md for the config keys
/// and the output tree.
namespace cultura::pipeline {

struct RunOptions {
  std::filesystem::path config_path;
  std::optional<std::uint64_t> seed;
  /// Output root; the run directory is <out>/<run-id>.
  std::optional<std::filesystem::path> out_root;
};

/// Builds a sentiment provider from `sentiment_provider` (`double:lexicon`
/// or `builtin:http`) and its [providers] keys.
std::shared_ptr<features::SentimentProvider> make_sentiment_provider(const Config& cfg);
/// `embedding_provider`: `double:hashed-bow` or `builtin:http`.
std::shared_ptr<features::EmbeddingProvider> make_embedding_provider(const Config& cfg);
/// Backend for a provider spec file (kind local, http, echo or canned).
std::unique_ptr<harness::ModelBackend> make_backend(const harness::BackendSpec& spec);

class Run {
 public:
  /// Loads the config and computes the manifest id. Throws IoError or
  /// ConfigError; nothing is written yet.
  static Run open(const RunOptions& options);

  const Config& config() const noexcept { return cfg_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const std::filesystem::path& dir() const noexcept { return dir_; }
  /// Hash of the deterministic inputs: config, seed, provider identities,
  /// lexicon and input file contents.
  const std::string& manifest_id() const noexcept { return manifest_id_; }

  void scrape();
  void collect();
  void aggregate();
  void evaluate();
  void calibrate();
  void finetune();
  void report();
  /// Every stage above, in order.
  void run_all();

  /// Runs one stage by name ("scrape", ..., "report", "run-all").
  void run_stage(const std::string& name);
  static const std::vector<std::string>& stage_names();

 private:
  Run() = default;

  template <typename F>
  void stage(const std::string& name, F&& body);
  void write_manifest(const std::string& stage, const std::string& status, const std::string& started,
                      const std::string& note);

  struct Providers;
  Providers& providers();

  Config cfg_;
  std::filesystem::path config_path_;
  std::uint64_t seed_ = 0;
  std::filesystem::path dir_;
  std::string manifest_id_;
  std::string manifest_inputs_;  // JSON text of the hashed inputs
  std::shared_ptr<Providers> providers_;
};

}  // namespace cultura::pipeline
