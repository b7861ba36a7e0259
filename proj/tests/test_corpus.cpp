#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include <httplib.h>

#include "cultura/corpus.hpp"
#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/text.hpp"

using namespace cultura;
using namespace cultura::corpus;

namespace {

std::vector<QuestionRecord> numbered(std::size_t n) {
  std::vector<QuestionRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"Why question number " + std::to_string(i) + "?", "fixture:" + std::to_string(i), "fixture",
                   Language::en});
  }
  return out;
}

std::string random_unicode(std::mt19937& gen, std::size_t len) {
  static const std::vector<std::string> pieces = {"a", "Z", " ", "\t", "¿", "¡", "é", "Ç", "ß", "İ", "𝔘", "漢", "\xff",
                                                  "\xc3", "\x80", "?", "\n", "Por qué", "WHY", "quem"};
  std::string s;
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  for (std::size_t i = 0; i < len; ++i) s += pieces[pick(gen)];
  return s;
}

}  // namespace

TEST_CASE("default filter holds the three keyword lists") {
  const auto cfg = FilterConfig::defaults();
  REQUIRE(cfg.interrogative_keywords.size() == 3);
  CHECK(cfg.interrogative_keywords[0].second == std::vector<std::string>{"Why", "How", "What", "When", "Where"});
  CHECK(cfg.interrogative_keywords[1].second ==
        std::vector<std::string>{"¿", "Por qué", "Cómo", "Qué", "Dónde", "Cual"});
  CHECK(cfg.interrogative_keywords[2].second == std::vector<std::string>{"Quem"});
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("is_question_title") {
  const auto cfg = FilterConfig::defaults();
  CHECK(is_question_title("Why do Ignorant Americans Believe Paraguay Actually Exists?", cfg));
  CHECK_FALSE(is_question_title("I visited Quito last year.", cfg));
  CHECK(is_question_title("¿Por qué llueve tanto?", cfg));
  CHECK(is_question_title("   how is called Popcorn in Latin America?", cfg));
  CHECK(is_question_title("QUEM é você?", cfg));
  CHECK_FALSE(is_question_title("", cfg));
  CHECK_FALSE(is_question_title("   ", cfg));
}

TEST_CASE("language hint follows the matching list, en before es before pt") {
  const auto cfg = FilterConfig::defaults();
  CHECK(match_question_language("What is mate?", cfg) == Language::en);
  CHECK(match_question_language("¿Qué es el mate?", cfg) == Language::es);
  CHECK(match_question_language("Cómo se dice?", cfg) == Language::es);
  CHECK(match_question_language("Quem descobriu o Brasil?", cfg) == Language::pt);
  FilterConfig overlap{{{Language::en, {"Qu"}}, {Language::pt, {"Quem"}}}};
  CHECK(match_question_language("Quem?", overlap) == Language::en);
}

TEST_CASE("filter is total over arbitrary input") {
  std::mt19937 gen(11);
  const auto cfg = FilterConfig::defaults();
  for (int i = 0; i < 500; ++i) {
    const std::string s = random_unicode(gen, i % 17);
    CHECK_NOTHROW((void)is_question_title(s, cfg));
  }
}

TEST_CASE("adding a keyword never rejects an accepted title") {
  std::mt19937 gen(12);
  const auto base = FilterConfig::defaults();
  for (int i = 0; i < 300; ++i) {
    const std::string title = random_unicode(gen, 1 + i % 9);
    auto extended = base;
    const std::string kw = random_unicode(gen, 1 + i % 3);
    if (text::trim(kw).empty()) continue;
    extended.interrogative_keywords[i % 3].second.push_back(kw);
    if (is_question_title(title, base)) CHECK(is_question_title(title, extended));
  }
}

TEST_CASE("empty keyword list is rejected") {
  FilterConfig cfg{{{Language::en, {}}}};
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("dedupe") {
  std::vector<QuestionRecord> two_same = {{"Why X?", "u1", "s", Language::en}, {"Why X?", "u2", "s", Language::en}};
  CHECK(dedupe(two_same).size() == 1);
  CHECK(dedupe(two_same).front().source_url == "u1");

  // Normalization oracle worked by hand: casefold("why  x?") = "why  x?", collapse -> "why x?".
  std::vector<QuestionRecord> near = {{"Why X?", "", "", Language::en}, {"why  x?", "", "", Language::en}};
  CHECK(dedupe_key("why  x?") == "why x?");
  CHECK(dedupe_key("Why X?") == "why x?");
  CHECK(dedupe(near).size() == 1);

  CHECK(dedupe(numbered(535)).size() == 535);
}

TEST_CASE("dedupe is idempotent and order preserving") {
  std::mt19937 gen(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<QuestionRecord> recs;
    for (int i = 0; i < 30; ++i) {
      static const std::vector<std::string> texts = {"Why A?", "why a?", "How B?", " How  B? ", "Qué C?", "QUÉ c?"};
      recs.push_back({texts[gen() % texts.size()], std::to_string(i), "s", Language::en});
    }
    const auto once = dedupe(recs);
    CHECK(dedupe(once) == once);
    CHECK(once.size() <= recs.size());
    std::set<std::string> keys;
    for (const auto& r : once) CHECK(keys.insert(dedupe_key(r.text)).second);
    // First occurrences appear in input order.
    std::size_t pos = 0;
    for (const auto& r : once) {
      while (recs[pos].source_url != r.source_url) ++pos;
    }
  }
}

TEST_CASE("sample_subset partitions deterministically") {
  const auto recs = numbered(535);
  const auto split = sample_subset(recs, 54, 2024);
  CHECK(split.subset.size() == 54);
  CHECK(split.remainder.size() == 481);

  const auto again = sample_subset(recs, 54, 2024);
  CHECK(again.subset == split.subset);

  std::set<std::string> seen;
  for (const auto& r : split.subset) seen.insert(r.source_url);
  for (const auto& r : split.remainder) CHECK(seen.insert(r.source_url).second);
  CHECK(seen.size() == recs.size());

  const auto other = sample_subset(recs, 54, 2025);
  CHECK(other.subset != split.subset);
}

TEST_CASE("sample_subset edge cases") {
  const auto recs = numbered(10);
  const auto full = sample_subset(recs, 10, 7);
  CHECK(full.subset == recs);
  CHECK(full.remainder.empty());
  CHECK(sample_subset(recs, 3, 7).subset == sample_subset(recs, 3, 7).subset);
  CHECK_THROWS_AS(sample_subset(recs, 11, 7), InvalidArgument);
}

TEST_CASE("include list is honoured first") {
  const auto recs = numbered(20);
  const std::vector<std::string> include = {"why question number 3?", "Why question number 17?"};
  const auto split = sample_with_includes(recs, include, 5, 1);
  CHECK(split.subset.size() == 5);
  auto has = [&](const std::string& t) {
    return std::any_of(split.subset.begin(), split.subset.end(), [&](const auto& r) { return r.text == t; });
  };
  CHECK(has("Why question number 3?"));
  CHECK(has("Why question number 17?"));
}

TEST_CASE("ingest from a JSON-lines fixture") {
  auto client = JsonlFixtureClient::from_string(
      R"({"title":"Why is mate bitter?","url":"https://x/1","subreddit":"Argentina","id":"2"}
{"title":"I love asado","url":"https://x/2","subreddit":"Argentina","id":"1"}
{"title":"¿Qué es el ceviche?","url":"https://x/3","subreddit":"Peru"}
{"title":"How tall is Aconcagua?","url":"https://x/4","subreddit":"Argentina","id":"10"}
{"title":"Lima is grey","url":"https://x/5","subreddit":"Peru"}
{"url":"https://x/6","subreddit":"Peru"}
{"title":"Why is mate bitter?","url":"https://x/7","subreddit":"Argentina","id":"11"}
)",
      "fixture");
  const std::vector<std::string> subs = {"Peru", "Argentina"};
  const auto result = ingest_source(client, subs, FilterConfig::defaults());
  REQUIRE(result.records.size() == 4);
  // Subreddit list order, then numeric post-id order; duplicates retained.
  CHECK(result.records[0].text == "¿Qué es el ceviche?");
  CHECK(result.records[0].language_hint == Language::es);
  CHECK(result.records[1].source_url == "https://x/1");
  CHECK(result.records[2].source_url == "https://x/4");
  CHECK(result.records[3].source_url == "https://x/7");
  CHECK(result.records[1].subreddit == "Argentina");
  CHECK(result.report.malformed == 1);
  CHECK(result.report.rejected == 2);
  CHECK(result.report.accepted == 4);
}

TEST_CASE("ingest result does not depend on parallelism") {
  std::string lines;
  for (int i = 0; i < 60; ++i) {
    lines += R"({"title":")" + std::string(i % 3 ? "Why " : "No ") + std::to_string(i) + R"(","url":"u)" +
             std::to_string(i) + R"(","subreddit":")" + default_subreddits()[i % 13] + R"(","id":")" +
             std::to_string(i) + "\"}\n";
  }
  auto c1 = JsonlFixtureClient::from_string(lines);
  auto c2 = JsonlFixtureClient::from_string(lines);
  const auto serial = ingest_source(c1, default_subreddits(), FilterConfig::defaults(), {1});
  const auto parallel = ingest_source(c2, default_subreddits(), FilterConfig::defaults(), {8});
  CHECK(serial.records == parallel.records);
  CHECK(serial.records.size() == 40);
}

TEST_CASE("fixture lines that are not JSON are a parse error with a line number") {
  try {
    JsonlFixtureClient::from_string("{\"title\":\"a\",\"url\":\"b\",\"subreddit\":\"c\"}\nnot json\n", "f.jsonl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("default subreddit list") {
  const auto& subs = default_subreddits();
  CHECK(subs.size() == 13);
  CHECK(std::find(subs.begin(), subs.end(), "AskLatinAmerica") != subs.end());
}

namespace {

class DownClient final : public ForumClient {
 public:
  std::vector<RawPost> fetch(const std::string& subreddit) override {
    if (subreddit == "Chile") throw TransportError(subreddit, "connection refused");
    return {};
  }
  std::string identity() const override { return "down"; }
};

}  // namespace

TEST_CASE("unreachable source names the subreddit") {
  DownClient client;
  try {
    ingest_source(client, default_subreddits(), FilterConfig::defaults());
    FAIL("expected TransportError");
  } catch (const TransportError& e) {
    CHECK(e.source() == "Chile");
  }
}

TEST_CASE("reddit client parses listings and retries server errors") {
  httplib::Server server;
  int hits = 0;
  server.Get("/r/Peru/top.json", [&](const httplib::Request&, httplib::Response& res) {
    if (hits++ == 0) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"data":{"children":[
      {"data":{"id":"b","title":"Why is Lima grey?","permalink":"/r/Peru/comments/b/"}},
      {"data":{"id":"a","title":"Lima photo","permalink":"/r/Peru/comments/a/"}},
      {"data":{"id":"c","permalink":"/r/Peru/comments/c/"}}]}})",
                    "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  RedditClient::Options opts;
  opts.base_url = "http://127.0.0.1:" + std::to_string(port);
  opts.backoff_ms = 1;
  RedditClient client(opts);
  const std::vector<std::string> subs = {"Peru"};
  const auto result = ingest_source(client, subs, FilterConfig::defaults());
  CHECK(hits == 2);
  REQUIRE(result.records.size() == 1);
  CHECK(result.records[0].source_url == "https://www.reddit.com/r/Peru/comments/b/");
  CHECK(result.report.malformed == 1);

  const std::vector<std::string> missing = {"Nowhere"};
  CHECK_THROWS_AS(ingest_source(client, missing, FilterConfig::defaults()), TransportError);
  server.stop();
  t.join();
}

TEST_CASE("questions CSV round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "cultura_corpus_test";
  std::vector<QuestionRecord> recs = {{"¿Qué es \"mate\", amigo?", "https://x/1", "Uruguay", Language::es},
                                      {"Quem é?", "fixture:2", "fixture", Language::pt}};
  save_questions(recs, dir / "questions.csv");
  CHECK(load_questions(dir / "questions.csv") == recs);
  CHECK(io::read_text(dir / "questions.csv").starts_with("Question,URL,Subreddit,Language\r\n"));
  std::filesystem::remove_all(dir);
}
