#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cultura/features.hpp"

/// Reduction of per-question human response pools to two reference answers.
namespace cultura::aggregation {

struct UserResponse {
  std::string respondent_id;
  std::string text;
};

struct UserResponsePool {
  std::string question;
  std::vector<UserResponse> responses;

  /// Throws InvalidArgument for an empty pool, blank text, or repeated respondent id.
  void validate() const;
};

struct ReferencePair {
  std::string question;
  std::string v1;
  std::string v2;
  features::SentimentScore s_user;
};

struct RankedResponse {
  std::string respondent_id;
  std::string text;
  double centrality = 0.0;
};

/// Pool ordered by descending centrality (mean cosine similarity to every
/// other response; 1 for a singleton), ties by ascending respondent id.
/// A zero embedding has similarity 0 to everything.
std::vector<RankedResponse> rank_by_centrality(const UserResponsePool& pool, features::EmbeddingProvider& embedder);

/// v1 is the most central response. v2 is the most central response whose
/// text differs from v1, or v1 itself when every text in the pool is the
/// same. s_user is the mean sentiment of v1 and v2.
ReferencePair select_representatives(const UserResponsePool& pool, features::EmbeddingProvider& embedder,
                                     features::SentimentProvider& scorer);

features::SentimentScore averaged_user_sentiment(features::SentimentScore s_v1, features::SentimentScore s_v2);
/// Recomputes s_user for a pair read back from a reference file.
features::SentimentScore averaged_user_sentiment(const ReferencePair& pair, features::SentimentProvider& scorer);

/// `Question,RespondentID,Response`; pools in order of first appearance.
std::vector<UserResponsePool> load_user_responses(const std::filesystem::path& path);
void save_user_responses(std::span<const UserResponsePool> pools, const std::filesystem::path& path);

/// `Question,RespV1,RespV2`. Sentiment is not stored; loaded pairs carry
/// s_user = 0 until rescored with averaged_user_sentiment().
void save_references(std::span<const ReferencePair> pairs, const std::filesystem::path& path);
std::vector<ReferencePair> load_references(const std::filesystem::path& path);

}  // namespace cultura::aggregation
