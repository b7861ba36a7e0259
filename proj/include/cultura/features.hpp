#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

/// The two learned features every metric consumes: a signed sentiment score
/// and a fixed-dimension sentence embedding, each behind a provider interface.
namespace cultura::features {

/// Sentiment in [-1, 1]. Construction outside the range throws InvalidArgument.
class SentimentScore {
 public:
  SentimentScore() = default;
  explicit SentimentScore(double value);

  double value() const noexcept { return value_; }
  friend bool operator==(const SentimentScore&, const SentimentScore&) = default;

 private:
  double value_ = 0.0;
};

/// Finite real vector. Non-finite components throw InvalidArgument.
class EmbeddingVector {
 public:
  EmbeddingVector() = default;
  explicit EmbeddingVector(std::vector<double> components);

  std::size_t dimension() const noexcept { return components_.size(); }
  std::span<const double> components() const noexcept { return components_; }
  double operator[](std::size_t i) const { return components_[i]; }
  bool is_zero() const noexcept;
  double norm() const noexcept;

  friend bool operator==(const EmbeddingVector&, const EmbeddingVector&) = default;

 private:
  std::vector<double> components_;
};

/// Maps a binary classifier's (label, confidence) to [-1, 1]: positive labels
/// give +confidence, negative labels -confidence, anything else 0.
SentimentScore signed_confidence(std::string_view label, double confidence);

class SentimentProvider {
 public:
  virtual ~SentimentProvider() = default;
  /// Throws InvalidArgument on empty text, ProviderError on backend failure.
  virtual SentimentScore score(std::string_view text) = 0;
  virtual std::string identity() const = 0;
  virtual bool thread_safe() const { return false; }
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  /// Throws InvalidArgument on empty text, ProviderError on backend failure.
  virtual EmbeddingVector embed(std::string_view text) = 0;
  virtual std::size_t dimension() const = 0;
  virtual std::string identity() const = 0;
  virtual bool thread_safe() const { return false; }
};

/// Lexicon scorer: (pos - neg) / (pos + neg) over word tokens, 0 with no hits.
class LexiconSentiment final : public SentimentProvider {
 public:
  LexiconSentiment(std::set<std::string> positive, std::set<std::string> negative);

  SentimentScore score(std::string_view text) override;
  std::string identity() const override { return "double:lexicon"; }
  bool thread_safe() const override { return true; }

 private:
  std::set<std::string> positive_;
  std::set<std::string> negative_;
};

/// Hashed bag of words: each word token adds 1 to component fnv1a64(token) % dim.
class HashedBowEmbedder final : public EmbeddingProvider {
 public:
  static constexpr std::size_t kDefaultDimension = 64;

  explicit HashedBowEmbedder(std::size_t dimension = kDefaultDimension);

  static std::size_t bucket(std::string_view token, std::size_t dimension) noexcept;

  EmbeddingVector embed(std::string_view text) override;
  std::size_t dimension() const override { return dimension_; }
  std::string identity() const override { return "double:hashed-bow-" + std::to_string(dimension_); }
  bool thread_safe() const override { return true; }

 private:
  std::size_t dimension_;
};

/// Sentiment from an HTTP service: POST `{"text"}` to `<endpoint>/sentiment`,
/// reply `{"label": str, "score": real}`.
class HttpSentiment final : public SentimentProvider {
 public:
  explicit HttpSentiment(std::string endpoint, std::string model_name = "");

  SentimentScore score(std::string_view text) override;
  std::string identity() const override;
  bool thread_safe() const override { return true; }

 private:
  std::string endpoint_;
  std::string model_name_;
};

/// Embeddings from an HTTP service: POST `{"text"}` to `<endpoint>/embed`,
/// reply `{"embedding": [real, ...]}`. The dimension is fixed by the first reply.
class HttpEmbedder final : public EmbeddingProvider {
 public:
  explicit HttpEmbedder(std::string endpoint, std::string model_name = "");

  EmbeddingVector embed(std::string_view text) override;
  std::size_t dimension() const override;
  std::string identity() const override;
  bool thread_safe() const override { return true; }

 private:
  std::string endpoint_;
  std::string model_name_;
  mutable std::mutex mu_;
  std::size_t dimension_ = 0;
};

/// Content-hash keyed store of provider outputs.
///
/// On-disk layout, one entry per line:
///
///     <kind>\t<sha256-hex>\t<v1> <v2> ...\n
///
/// `kind` is `s` (sentiment) or `e` (embedding); the key is SHA-256 of
/// `provider identity + "\0" + text`; values are `%.17g` so they round-trip
/// exactly. The file is a pure cache: deleting it only costs recomputation.
class FeatureCache {
 public:
  FeatureCache() = default;

  static std::string key(std::string_view provider_identity, std::string_view text);

  bool lookup(char kind, const std::string& key, std::vector<double>& out) const;
  void store(char kind, const std::string& key, std::vector<double> values);
  std::size_t size() const;

  /// Missing file is an empty cache; malformed lines are ignored.
  void load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, std::vector<double>> entries_;
};

/// Memoizing wrappers. Safe for concurrent use when the inner provider is,
/// otherwise calls into the inner provider are serialized.
class CachedSentiment final : public SentimentProvider {
 public:
  CachedSentiment(std::shared_ptr<SentimentProvider> inner, std::shared_ptr<FeatureCache> cache);

  SentimentScore score(std::string_view text) override;
  std::string identity() const override { return inner_->identity(); }
  bool thread_safe() const override { return true; }

 private:
  std::shared_ptr<SentimentProvider> inner_;
  std::shared_ptr<FeatureCache> cache_;
  std::mutex inner_mu_;
};

class CachedEmbedder final : public EmbeddingProvider {
 public:
  CachedEmbedder(std::shared_ptr<EmbeddingProvider> inner, std::shared_ptr<FeatureCache> cache);

  EmbeddingVector embed(std::string_view text) override;
  std::size_t dimension() const override { return inner_->dimension(); }
  std::string identity() const override { return inner_->identity(); }
  bool thread_safe() const override { return true; }

 private:
  std::shared_ptr<EmbeddingProvider> inner_;
  std::shared_ptr<FeatureCache> cache_;
  std::mutex inner_mu_;
};

/// Componentwise mean. Throws InvalidArgument on an empty list or mixed dimensions.
EmbeddingVector average_embedding(std::span<const EmbeddingVector> vectors);

}  // namespace cultura::features
