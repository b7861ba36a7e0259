#include "cultura/csv.hpp"

#include <fstream>
#include <sstream>

#include "cultura/error.hpp"
#include "cultura/io.hpp"

namespace cultura::csv {

Table parse(std::string_view content, const std::string& source_name) {
  if (content.substr(0, 3) == "\xEF\xBB\xBF") content.remove_prefix(3);

  std::vector<Row> records;
  std::vector<std::size_t> record_lines;
  Row row;
  std::string field;
  bool in_quotes = false;
  bool field_was_quoted = false;
  bool row_has_content = false;
  std::size_t line = 1;
  std::size_t row_start_line = 1;
  std::size_t quote_open_line = 0;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_was_quoted = false;
  };
  auto end_row = [&] {
    end_field();
    records.push_back(std::move(row));
    record_lines.push_back(row_start_line);
    row.clear();
    row_has_content = false;
  };

  for (std::size_t i = 0; i < content.size(); ++i) {
    const char c = content[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty() || field_was_quoted) {
          throw ParseError(source_name, line, "quote inside unquoted field");
        }
        if (!row_has_content) row_start_line = line;
        in_quotes = true;
        field_was_quoted = true;
        quote_open_line = line;
        row_has_content = true;
        break;
      case ',':
        if (!row_has_content) row_start_line = line;
        row_has_content = true;
        end_field();
        break;
      case '\r':
        if (i + 1 < content.size() && content[i + 1] == '\n') break;
        [[fallthrough]];
      case '\n':
        if (row_has_content) end_row();
        ++line;
        break;
      default:
        if (field_was_quoted) {
          throw ParseError(source_name, line, "characters after closing quote");
        }
        if (!row_has_content) row_start_line = line;
        row_has_content = true;
        field.push_back(c);
    }
  }
  if (in_quotes) throw ParseError(source_name, quote_open_line, "unterminated quoted field");
  if (row_has_content) end_row();

  Table table;
  if (records.empty()) throw ParseError(source_name, 1, "missing header row");
  table.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != table.header.size()) {
      throw ParseError(source_name, record_lines[r],
                       "expected " + std::to_string(table.header.size()) + " fields, found " +
                           std::to_string(records[r].size()));
    }
    table.rows.push_back(std::move(records[r]));
    table.row_lines.push_back(record_lines[r]);
  }
  return table;
}

Table read_file(const std::filesystem::path& path) {
  return parse(io::read_text(path), path.string());
}

Table read_file_with_header(const std::filesystem::path& path, const Row& expected) {
  Table table = read_file(path);
  if (table.header != expected) {
    throw FormatError(path.string() + ": expected header '" + format_row(expected) + "', found '" +
                      format_row(table.header) + "'");
  }
  return table;
}

std::string escape_field(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string format_row(const Row& row) {
  std::string out;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out.push_back(',');
    out += escape_field(row[i]);
  }
  return out;
}

Writer::Writer(Row header) : header_(std::move(header)) {}

void Writer::add(Row row) {
  if (row.size() != header_.size()) {
    throw InvalidArgument("csv row has " + std::to_string(row.size()) + " fields, header has " +
                          std::to_string(header_.size()));
  }
  rows_.push_back(std::move(row));
}

std::string Writer::str() const {
  std::string out = format_row(header_) + "\r\n";
  for (const auto& r : rows_) out += format_row(r) + "\r\n";
  return out;
}

void Writer::save(const std::filesystem::path& path) const { io::write_text(path, str()); }

}  // namespace cultura::csv
