#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mda/errors.hpp"

namespace mda::csv {

/// Quotes a field when it contains a comma, quote, or line break; embedded
/// quotes are doubled.
inline std::string encode_field(std::string_view field) {
  bool needs_quote = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!needs_quote) return std::string(field);
  std::string out;
  out.reserve(field.size() + 2);
  out.push_back('"');
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string encode_row(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out.push_back(',');
    out += encode_field(cells[i]);
  }
  out.push_back('\n');
  return out;
}

/// Parses RFC-4180 content: quoted fields, doubled quotes, embedded
/// separators and line breaks. CRLF and LF both end records; a final
/// record without a trailing newline is kept.
inline std::vector<std::vector<std::string>> parse(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool row_started = false;
  std::size_t i = 0;

  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
  };
  auto end_row = [&] {
    end_field();
    records.push_back(std::move(row));
    row.clear();
    row_started = false;
  };

  while (i < text.size()) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
        } else {
          in_quotes = false;
          ++i;
        }
      } else {
        field.push_back(c);
        ++i;
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        row_started = true;
        ++i;
        break;
      case ',':
        end_field();
        row_started = true;
        ++i;
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
        end_row();
        ++i;
        break;
      case '\n':
        end_row();
        ++i;
        break;
      default:
        field.push_back(c);
        row_started = true;
        ++i;
        break;
    }
  }
  if (in_quotes) throw Error(errc::syntax_error, "unterminated quoted field in CSV");
  if (row_started || !field.empty() || !row.empty()) end_row();
  return records;
}

/// A parsed CSV with a header row and name-based column lookup.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::unordered_map<std::string, std::size_t> index;

  static Table from_text(std::string_view text) {
    Table t;
    auto records = parse(text);
    if (records.empty()) throw Error(errc::syntax_error, "CSV has no header row");
    t.header = std::move(records.front());
    for (std::size_t i = 0; i < t.header.size(); ++i) t.index.emplace(t.header[i], i);
    t.rows.assign(std::make_move_iterator(records.begin() + 1),
                  std::make_move_iterator(records.end()));
    return t;
  }

  bool has_column(const std::string& name) const { return index.count(name) != 0; }

  std::size_t column(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw Error(errc::config_error, "missing column", name);
    return it->second;
  }

  /// Out-of-range cells on a short row read as empty.
  const std::string& cell(std::size_t row, std::size_t col) const {
    static const std::string empty;
    const auto& r = rows[row];
    return col < r.size() ? r[col] : empty;
  }
};

}  // namespace mda::csv
