#include "cultura/text.hpp"

#include <memory>

#include <unicode/brkiter.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "cultura/error.hpp"

namespace cultura::text {
namespace {

std::string to_utf8(const icu::UnicodeString& u) {
  std::string out;
  u.toUTF8String(out);
  return out;
}

icu::UnicodeString from_utf8(std::string_view s) {
  return icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
}

// BreakIterator construction loads rule data; keep one per thread.
icu::BreakIterator& word_breaker() {
  thread_local std::unique_ptr<icu::BreakIterator> it = [] {
    UErrorCode status = U_ZERO_ERROR;
    std::unique_ptr<icu::BreakIterator> bi(icu::BreakIterator::createWordInstance(icu::Locale::getRoot(), status));
    if (U_FAILURE(status) || !bi) {
      throw Error(std::string("ICU word break iterator unavailable: ") + u_errorName(status));
    }
    return bi;
  }();
  return *it;
}

bool is_sentence_terminator(UChar32 c) {
  switch (c) {
    case '.':
    case '?':
    case '!':
    case 0x00BF:  // ¿
    case 0x00A1:  // ¡
    case 0x2026:  // …
    case 0x3002:  // 。
    case 0xFF01:
    case 0xFF0E:
    case 0xFF1F:
      return true;
    default:
      return false;
  }
}

}  // namespace

std::string trim(std::string_view s) {
  icu::UnicodeString u = from_utf8(s);
  int32_t begin = 0;
  int32_t end = u.length();
  while (begin < end) {
    UChar32 c = u.char32At(begin);
    if (!u_isUWhiteSpace(c)) break;
    begin += U16_LENGTH(c);
  }
  while (end > begin) {
    int32_t prev = u.moveIndex32(end, -1);
    if (!u_isUWhiteSpace(u.char32At(prev))) break;
    end = prev;
  }
  return to_utf8(u.tempSubStringBetween(begin, end));
}

std::string normalize_nfc(std::string_view s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error(std::string("ICU NFC normalizer unavailable: ") + u_errorName(status));
  icu::UnicodeString out = nfc->normalize(from_utf8(s), status);
  if (U_FAILURE(status)) throw Error(std::string("NFC normalization failed: ") + u_errorName(status));
  return to_utf8(out);
}

std::string casefold(std::string_view s) {
  icu::UnicodeString u = from_utf8(s);
  u.foldCase(U_FOLD_CASE_DEFAULT);
  return to_utf8(u);
}

std::string collapse_whitespace(std::string_view s) {
  icu::UnicodeString u = from_utf8(s);
  icu::UnicodeString out;
  bool pending_space = false;
  for (int32_t i = 0; i < u.length();) {
    UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    if (u_isUWhiteSpace(c)) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.isEmpty()) out.append(static_cast<UChar>(' '));
    pending_space = false;
    out.append(c);
  }
  return to_utf8(out);
}

std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> tokens;
  icu::UnicodeString u = from_utf8(normalize_nfc(s));
  if (u.isEmpty()) return tokens;
  u.foldCase(U_FOLD_CASE_DEFAULT);

  icu::BreakIterator& bi = word_breaker();
  bi.setText(u);
  int32_t start = bi.first();
  for (int32_t end = bi.next(); end != icu::BreakIterator::DONE; start = end, end = bi.next()) {
    if (bi.getRuleStatus() == UBRK_WORD_NONE) continue;
    tokens.push_back(to_utf8(u.tempSubStringBetween(start, end)));
  }
  return tokens;
}

std::vector<std::string> split_sentences(std::string_view s) {
  std::vector<std::string> sentences;
  icu::UnicodeString u = from_utf8(s);
  icu::UnicodeString current;
  auto flush = [&] {
    std::string piece = trim(to_utf8(current));
    if (!piece.empty()) sentences.push_back(std::move(piece));
    current.remove();
  };
  for (int32_t i = 0; i < u.length();) {
    UChar32 c = u.char32At(i);
    i += U16_LENGTH(c);
    if (is_sentence_terminator(c)) {
      flush();
    } else {
      current.append(c);
    }
  }
  flush();
  return sentences;
}

std::set<std::string> parse_term_list(std::string_view content) {
  std::set<std::string> terms;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= content.size()) {
    std::size_t nl = content.find('\n', pos);
    if (nl == std::string_view::npos) nl = content.size();
    const std::string line = trim(content.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto toks = word_tokens(line);
    if (toks.size() != 1) {
      throw InvalidArgument("term list line " + std::to_string(line_no) + ": '" + line +
                            "' is not a single word token");
    }
    terms.insert(std::move(toks.front()));
  }
  return terms;
}

bool is_valid_utf8(std::string_view s) {
  const auto* p = reinterpret_cast<const uint8_t*>(s.data());
  const auto n = static_cast<int32_t>(s.size());
  int32_t i = 0;
  while (i < n) {
    UChar32 c;
    U8_NEXT(p, i, n, c);
    if (c < 0) return false;
  }
  return true;
}

std::string sanitize_utf8(std::string_view s) {
  if (is_valid_utf8(s)) return std::string(s);
  return to_utf8(from_utf8(s));
}

}  // namespace cultura::text
