#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cultura {

/// Key-value configuration.
///
///     # comment
///     seed = 7
///     [metrics]
///     weights = 0.3, 0.3, 0.4
///
/// A `[section]` header prefixes the keys that follow it with `section.`.
/// Values run to end of line and are trimmed; there is no quoting. Relative
/// paths are resolved against the directory of the file they came from.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& content, const std::string& source_name = "<memory>",
                      std::filesystem::path base_dir = {});
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated list; empty items dropped.
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::filesystem::path get_path(const std::string& key) const;
  std::optional<std::filesystem::path> find_path(const std::string& key) const;

  void set(const std::string& key, const std::string& value);

  const std::map<std::string, std::string>& entries() const noexcept { return values_; }
  const std::filesystem::path& base_dir() const noexcept { return base_dir_; }
  const std::string& source_name() const noexcept { return source_; }

  /// Canonical `key=value\n` lines in key order; hashed into the run manifest.
  std::string canonical() const;

 private:
  std::map<std::string, std::string> values_;
  std::filesystem::path base_dir_;
  std::string source_ = "<memory>";
};

}  // namespace cultura
