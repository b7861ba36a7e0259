#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cultura {

/// Base class for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A network or source endpoint could not be reached.
class TransportError : public Error {
 public:
  TransportError(std::string source, const std::string& what)
      : Error(source + ": " + what), source_(std::move(source)) {}

  const std::string& source() const noexcept { return source_; }

 private:
  std::string source_;
};

/// Malformed input file. `line()` is 1-based; 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(std::string path, std::size_t line, const std::string& what)
      : Error(path + ":" + std::to_string(line) + ": " + what),
        path_(std::move(path)),
        line_(line) {}

  const std::string& path() const noexcept { return path_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string path_;
  std::size_t line_;
};

/// Well-formed file whose header or layout does not match the expected schema.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A metric has no defined value for its input (no tokens, no present responses, ...).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// Statistical test input with no information (all paired differences zero).
class DegenerateSample : public Error {
 public:
  using Error::Error;
};

/// Sentiment or embedding backend failure.
class ProviderError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Fine-tuning stopped. `checkpoint()` names a directory to resume or inspect; empty if none was written.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::string checkpoint)
      : Error(what), checkpoint_(std::move(checkpoint)) {}

  const std::string& checkpoint() const noexcept { return checkpoint_; }

 private:
  std::string checkpoint_;
};

class IoError : public Error {
 public:
  IoError(std::string path, const std::string& what)
      : Error(path + ": " + what), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace cultura
