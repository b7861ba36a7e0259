#pragma once

#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

/// RFC 4180 reading and writing. Fields containing a comma, quote, CR or LF
/// are quoted on output; CRLF line endings are written.
namespace cultura::csv {

using Row = std::vector<std::string>;

struct Table {
  Row header;
  std::vector<Row> rows;
  /// 1-based physical line on which each row starts (for diagnostics).
  std::vector<std::size_t> row_lines;
};

/// Parses a whole document. A UTF-8 BOM is skipped. Throws ParseError with the
/// line number on an unterminated quote or on a row whose field count differs
/// from the header.
Table parse(std::string_view content, const std::string& source_name = "<memory>");

Table read_file(const std::filesystem::path& path);

/// Reads a file and requires its header to equal `expected` exactly.
/// Throws FormatError on mismatch.
Table read_file_with_header(const std::filesystem::path& path, const Row& expected);

std::string escape_field(std::string_view field);
std::string format_row(const Row& row);

class Writer {
 public:
  explicit Writer(Row header);

  void add(Row row);
  std::string str() const;
  /// Writes atomically-enough for a single-writer CLI: temp file then rename.
  void save(const std::filesystem::path& path) const;

 private:
  Row header_;
  std::vector<Row> rows_;
};

}  // namespace cultura::csv
