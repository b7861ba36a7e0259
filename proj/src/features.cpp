#include "cultura/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/text.hpp"

namespace cultura::features {

using nlohmann::json;

SentimentScore::SentimentScore(double value) : value_(value) {
  if (!(value >= -1.0 && value <= 1.0)) {
    throw InvalidArgument("sentiment score outside [-1, 1]: " + std::to_string(value));
  }
}

EmbeddingVector::EmbeddingVector(std::vector<double> components) : components_(std::move(components)) {
  for (double c : components_) {
    if (!std::isfinite(c)) throw InvalidArgument("embedding has a non-finite component");
  }
}

bool EmbeddingVector::is_zero() const noexcept {
  return std::all_of(components_.begin(), components_.end(), [](double c) { return c == 0.0; });
}

double EmbeddingVector::norm() const noexcept {
  double s = 0.0;
  for (double c : components_) s += c * c;
  return std::sqrt(s);
}

SentimentScore signed_confidence(std::string_view label, double confidence) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw ProviderError("classifier confidence outside [0, 1]: " + std::to_string(confidence));
  }
  const std::string l = text::casefold(label);
  if (l == "positive" || l == "pos" || l == "label_1") return SentimentScore(confidence);
  if (l == "negative" || l == "neg" || l == "label_0") return SentimentScore(-confidence);
  return SentimentScore(0.0);
}

namespace {

void require_text(std::string_view text) {
  if (text::trim(text).empty()) throw InvalidArgument("feature input text is empty");
}

}  // namespace

// --- lexicon sentiment --------------------------------------------------------

LexiconSentiment::LexiconSentiment(std::set<std::string> positive, std::set<std::string> negative)
    : positive_(std::move(positive)), negative_(std::move(negative)) {}

SentimentScore LexiconSentiment::score(std::string_view text) {
  require_text(text);
  int pos = 0;
  int neg = 0;
  for (const auto& tok : text::word_tokens(text)) {
    pos += positive_.count(tok) ? 1 : 0;
    neg += negative_.count(tok) ? 1 : 0;
  }
  if (pos + neg == 0) return SentimentScore(0.0);
  return SentimentScore(static_cast<double>(pos - neg) / static_cast<double>(pos + neg));
}

// --- hashed bag of words ---------------------------------------------------------

HashedBowEmbedder::HashedBowEmbedder(std::size_t dimension) : dimension_(dimension) {
  if (dimension_ == 0) throw InvalidArgument("embedding dimension must be positive");
}

std::size_t HashedBowEmbedder::bucket(std::string_view token, std::size_t dimension) noexcept {
  return static_cast<std::size_t>(io::fnv1a64(token) % dimension);
}

EmbeddingVector HashedBowEmbedder::embed(std::string_view text) {
  require_text(text);
  std::vector<double> v(dimension_, 0.0);
  for (const auto& tok : text::word_tokens(text)) v[bucket(tok, dimension_)] += 1.0;
  return EmbeddingVector(std::move(v));
}

// --- http providers ------------------------------------------------------------------

namespace {

json post_json(const std::string& endpoint, const std::string& path, const json& body) {
  httplib::Client cli(endpoint);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(120);
  auto res = cli.Post(path, body.dump(), "application/json");
  if (!res) throw TransportError(endpoint + path, httplib::to_string(res.error()));
  if (res->status != 200) throw ProviderError(endpoint + path + ": HTTP " + std::to_string(res->status));
  try {
    return json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw ProviderError(endpoint + path + ": unparseable reply: " + e.what());
  }
}

}  // namespace

HttpSentiment::HttpSentiment(std::string endpoint, std::string model_name)
    : endpoint_(std::move(endpoint)), model_name_(std::move(model_name)) {}

std::string HttpSentiment::identity() const {
  return "builtin:http-sentiment@" + endpoint_ + (model_name_.empty() ? "" : "/" + model_name_);
}

SentimentScore HttpSentiment::score(std::string_view text) {
  require_text(text);
  json reply = post_json(endpoint_, "/sentiment", {{"text", std::string(text)}});
  if (!reply.contains("label") || !reply["label"].is_string() || !reply.contains("score") ||
      !reply["score"].is_number()) {
    throw ProviderError("sentiment reply needs string 'label' and numeric 'score'");
  }
  return signed_confidence(reply["label"].get<std::string>(), reply["score"].get<double>());
}

HttpEmbedder::HttpEmbedder(std::string endpoint, std::string model_name)
    : endpoint_(std::move(endpoint)), model_name_(std::move(model_name)) {}

std::string HttpEmbedder::identity() const {
  return "builtin:http-embed@" + endpoint_ + (model_name_.empty() ? "" : "/" + model_name_);
}

std::size_t HttpEmbedder::dimension() const {
  std::lock_guard lock(mu_);
  return dimension_;
}

EmbeddingVector HttpEmbedder::embed(std::string_view text) {
  require_text(text);
  json reply = post_json(endpoint_, "/embed", {{"text", std::string(text)}});
  if (!reply.contains("embedding") || !reply["embedding"].is_array()) {
    throw ProviderError("embedding reply needs array 'embedding'");
  }
  std::vector<double> v;
  for (const auto& x : reply["embedding"]) {
    if (!x.is_number()) throw ProviderError("embedding has a non-numeric component");
    v.push_back(x.get<double>());
  }
  std::lock_guard lock(mu_);
  if (dimension_ == 0) dimension_ = v.size();
  if (v.size() != dimension_) {
    throw ProviderError("embedding dimension changed from " + std::to_string(dimension_) + " to " +
                        std::to_string(v.size()));
  }
  return EmbeddingVector(std::move(v));
}

// --- cache ------------------------------------------------------------------------------

std::string FeatureCache::key(std::string_view provider_identity, std::string_view text) {
  std::string material(provider_identity);
  material.push_back('\0');
  material.append(text);
  return io::sha256_hex(material);
}

bool FeatureCache::lookup(char kind, const std::string& key, std::vector<double>& out) const {
  std::shared_lock lock(mu_);
  auto it = entries_.find(std::string(1, kind) + key);
  if (it == entries_.end()) return false;
  out = it->second;
  return true;
}

void FeatureCache::store(char kind, const std::string& key, std::vector<double> values) {
  std::unique_lock lock(mu_);
  entries_[std::string(1, kind) + key] = std::move(values);
}

std::size_t FeatureCache::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

void FeatureCache::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return;
  std::string line;
  std::unique_lock lock(mu_);
  while (std::getline(in, line)) {
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t1 != 1 || t2 == std::string::npos || (line[0] != 's' && line[0] != 'e')) continue;
    std::vector<double> values;
    std::istringstream vs(line.substr(t2 + 1));
    double x;
    while (vs >> x) values.push_back(x);
    entries_[line.substr(0, 1) + line.substr(t1 + 1, t2 - t1 - 1)] = std::move(values);
  }
}

void FeatureCache::save(const std::filesystem::path& path) const {
  std::shared_lock lock(mu_);
  std::vector<const std::pair<const std::string, std::vector<double>>*> sorted;
  for (const auto& e : entries_) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->first < b->first; });
  std::string out;
  char buf[32];
  for (const auto* e : sorted) {
    out.push_back(e->first[0]);
    out.push_back('\t');
    out.append(e->first, 1);
    out.push_back('\t');
    for (std::size_t i = 0; i < e->second.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", e->second[i]);
      if (i) out.push_back(' ');
      out.append(buf);
    }
    out.push_back('\n');
  }
  io::write_text(path, out);
}

CachedSentiment::CachedSentiment(std::shared_ptr<SentimentProvider> inner, std::shared_ptr<FeatureCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

SentimentScore CachedSentiment::score(std::string_view text) {
  const std::string key = FeatureCache::key(inner_->identity(), text);
  std::vector<double> hit;
  if (cache_->lookup('s', key, hit) && hit.size() == 1) return SentimentScore(hit[0]);
  SentimentScore s;
  if (inner_->thread_safe()) {
    s = inner_->score(text);
  } else {
    std::lock_guard lock(inner_mu_);
    s = inner_->score(text);
  }
  cache_->store('s', key, {s.value()});
  return s;
}

CachedEmbedder::CachedEmbedder(std::shared_ptr<EmbeddingProvider> inner, std::shared_ptr<FeatureCache> cache)
    : inner_(std::move(inner)), cache_(std::move(cache)) {}

EmbeddingVector CachedEmbedder::embed(std::string_view text) {
  const std::string key = FeatureCache::key(inner_->identity(), text);
  std::vector<double> hit;
  if (cache_->lookup('e', key, hit) && !hit.empty()) return EmbeddingVector(std::move(hit));
  EmbeddingVector v;
  if (inner_->thread_safe()) {
    v = inner_->embed(text);
  } else {
    std::lock_guard lock(inner_mu_);
    v = inner_->embed(text);
  }
  cache_->store('e', key, std::vector<double>(v.components().begin(), v.components().end()));
  return v;
}

EmbeddingVector average_embedding(std::span<const EmbeddingVector> vectors) {
  if (vectors.empty()) throw InvalidArgument("cannot average an empty list of embeddings");
  const std::size_t d = vectors.front().dimension();
  std::vector<double> sum(d, 0.0);
  for (const auto& v : vectors) {
    if (v.dimension() != d) throw InvalidArgument("embedding dimension mismatch in average");
    for (std::size_t i = 0; i < d; ++i) sum[i] += v[i];
  }
  for (double& x : sum) x /= static_cast<double>(vectors.size());
  return EmbeddingVector(std::move(sum));
}

}  // namespace cultura::features
