#include "cultura/aggregation.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "cultura/csv.hpp"
#include "cultura/error.hpp"
#include "cultura/metrics.hpp"
#include "cultura/text.hpp"

namespace cultura::aggregation {

void UserResponsePool::validate() const {
  if (responses.empty()) throw InvalidArgument("empty response pool for question: " + question);
  std::set<std::string> ids;
  for (const auto& r : responses) {
    if (text::trim(r.text).empty()) throw InvalidArgument("blank user response for question: " + question);
    if (!ids.insert(r.respondent_id).second) {
      throw InvalidArgument("respondent '" + r.respondent_id + "' answers twice for question: " + question);
    }
  }
}

namespace {

double similarity_or_zero(const features::EmbeddingVector& a, const features::EmbeddingVector& b) {
  if (a.is_zero() || b.is_zero()) return 0.0;
  return metrics::cosine_similarity(a, b);
}

}  // namespace

std::vector<RankedResponse> rank_by_centrality(const UserResponsePool& pool, features::EmbeddingProvider& embedder) {
  pool.validate();
  // Work in respondent-id order so sums (and hence ranks) do not depend on input order.
  std::vector<UserResponse> sorted = pool.responses;
  std::sort(sorted.begin(), sorted.end(),
            [](const UserResponse& a, const UserResponse& b) { return a.respondent_id < b.respondent_id; });

  std::vector<features::EmbeddingVector> emb;
  emb.reserve(sorted.size());
  for (const auto& r : sorted) emb.push_back(embedder.embed(r.text));

  const std::size_t n = sorted.size();
  std::vector<RankedResponse> ranked;
  for (std::size_t i = 0; i < n; ++i) {
    double c = 1.0;
    if (n > 1) {
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) sum += similarity_or_zero(emb[i], emb[j]);
      }
      c = sum / static_cast<double>(n - 1);
    }
    ranked.push_back({sorted[i].respondent_id, sorted[i].text, c});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedResponse& a, const RankedResponse& b) { return a.centrality > b.centrality; });
  return ranked;
}

features::SentimentScore averaged_user_sentiment(features::SentimentScore s_v1, features::SentimentScore s_v2) {
  return features::SentimentScore((s_v1.value() + s_v2.value()) / 2.0);
}

features::SentimentScore averaged_user_sentiment(const ReferencePair& pair, features::SentimentProvider& scorer) {
  return averaged_user_sentiment(scorer.score(pair.v1), scorer.score(pair.v2));
}

ReferencePair select_representatives(const UserResponsePool& pool, features::EmbeddingProvider& embedder,
                                     features::SentimentProvider& scorer) {
  const auto ranked = rank_by_centrality(pool, embedder);
  ReferencePair pair;
  pair.question = pool.question;
  pair.v1 = ranked.front().text;
  pair.v2 = pair.v1;
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    if (ranked[i].text != pair.v1) {
      pair.v2 = ranked[i].text;
      break;
    }
  }
  pair.s_user = averaged_user_sentiment(scorer.score(pair.v1), scorer.score(pair.v2));
  return pair;
}

std::vector<UserResponsePool> load_user_responses(const std::filesystem::path& path) {
  const auto table = csv::read_file_with_header(path, {"Question", "RespondentID", "Response"});
  std::vector<UserResponsePool> pools;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    if (text::trim(row[2]).empty()) continue;
    auto [it, inserted] = index.emplace(row[0], pools.size());
    if (inserted) pools.push_back({row[0], {}});
    auto& pool = pools[it->second];
    for (const auto& r : pool.responses) {
      if (r.respondent_id == row[1]) {
        throw ParseError(path.string(), table.row_lines[i], "duplicate respondent '" + row[1] + "' for question");
      }
    }
    pool.responses.push_back({row[1], row[2]});
  }
  return pools;
}

void save_user_responses(std::span<const UserResponsePool> pools, const std::filesystem::path& path) {
  csv::Writer w({"Question", "RespondentID", "Response"});
  for (const auto& p : pools) {
    for (const auto& r : p.responses) w.add({p.question, r.respondent_id, r.text});
  }
  w.save(path);
}

void save_references(std::span<const ReferencePair> pairs, const std::filesystem::path& path) {
  csv::Writer w({"Question", "RespV1", "RespV2"});
  for (const auto& p : pairs) w.add({p.question, p.v1, p.v2});
  w.save(path);
}

std::vector<ReferencePair> load_references(const std::filesystem::path& path) {
  const auto table = csv::read_file_with_header(path, {"Question", "RespV1", "RespV2"});
  std::vector<ReferencePair> out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    if (text::trim(row[1]).empty() || text::trim(row[2]).empty()) {
      throw ParseError(path.string(), table.row_lines[i], "reference responses must be non-empty");
    }
    out.push_back({row[0], row[1], row[2], features::SentimentScore(0.0)});
  }
  return out;
}

}  // namespace cultura::aggregation
