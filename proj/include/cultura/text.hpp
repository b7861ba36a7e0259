#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

/// Unicode-aware text helpers shared by corpus filtering and the metric suite.
/// All inputs and outputs are UTF-8; invalid sequences are replaced by U+FFFD.
namespace cultura::text {

/// Strips leading and trailing Unicode whitespace.
std::string trim(std::string_view s);

/// Canonical composition (NFC), so "é" and "e\u0301" compare equal.
std::string normalize_nfc(std::string_view s);

/// Full Unicode case folding (default folding, not locale-specific).
std::string casefold(std::string_view s);

/// Replaces every run of Unicode whitespace with a single ASCII space and trims.
std::string collapse_whitespace(std::string_view s);

/// Casefolded word tokens from Unicode word segmentation. Punctuation,
/// whitespace and symbol-only segments are dropped.
///
/// This is the single tokenizer behind keyword frequency, type-token ratio
/// and response length, so the three metrics count the same units.
std::vector<std::string> word_tokens(std::string_view s);

/// Splits on runs of `.`, `?`, `!` (and their inverted/fullwidth forms).
/// Empty (whitespace-only) segments are dropped.
std::vector<std::string> split_sentences(std::string_view s);

/// Parses a term list: one term per line, `#` starts a comment line, blank
/// lines ignored. Terms are casefolded. Throws InvalidArgument if a term is
/// not exactly one word token.
std::set<std::string> parse_term_list(std::string_view content);

bool is_valid_utf8(std::string_view s);

/// Replaces invalid UTF-8 sequences with U+FFFD.
std::string sanitize_utf8(std::string_view s);

}  // namespace cultura::text
