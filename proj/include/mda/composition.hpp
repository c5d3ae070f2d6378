#pragma once

#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mda/errors.hpp"
#include "mda/util.hpp"

namespace mda::schema {

/// An alloy composition as an ordered list of (element symbol, fraction)
/// pairs, e.g. "Al0.25CoFeNi" -> [(Al,0.25),(Co,1),(Fe,1),(Ni,1)].
struct CompositionKey {
  std::vector<std::pair<std::string, double>> elements;

  std::size_t distinct_elements() const {
    std::map<std::string, double> seen;
    for (const auto& [sym, frac] : elements) seen[sym] += frac;
    return seen.size();
  }

  /// Alphabetical element order with duplicate symbols merged.
  CompositionKey canonical() const {
    std::map<std::string, double> merged;
    for (const auto& [sym, frac] : elements) merged[sym] += frac;
    CompositionKey out;
    out.elements.assign(merged.begin(), merged.end());
    return out;
  }

  /// Renders the canonical form; a fraction of exactly 1 drops its subscript
  /// and fractional subscripts lose trailing zeros.
  std::string canonical_string() const {
    CompositionKey c = canonical();
    std::string out;
    for (const auto& [sym, frac] : c.elements) {
      out += sym;
      if (frac != 1.0) out += util::format_decimal(frac);
    }
    return out;
  }

  friend bool operator==(const CompositionKey& a, const CompositionKey& b) {
    return a.canonical().elements == b.canonical().elements;
  }
};

/// Greedy left-to-right tokenization of a flat composition formula.
/// Grammar: one or more of SYMBOL SUBSCRIPT? where SYMBOL is a capital
/// letter plus optional lowercase letter and SUBSCRIPT is a decimal
/// number (digits, optionally with a fractional part, or ".5" style).
/// An omitted subscript means 1.0.
inline CompositionKey parse_composition(std::string_view text) {
  if (text.empty()) throw Error(errc::parse_error, "empty composition string");
  CompositionKey key;
  std::size_t i = 0;
  const std::size_t n = text.size();

  auto is_upper = [](char c) { return c >= 'A' && c <= 'Z'; };
  auto is_lower = [](char c) { return c >= 'a' && c <= 'z'; };

  while (i < n) {
    char c = text[i];
    bool allowed = is_upper(c) || is_lower(c) || util::is_digit(c) || c == '.';
    if (!allowed)
      throw Error(errc::parse_error,
                  "invalid character '" + std::string(1, c) + "' at offset " + std::to_string(i),
                  std::string(text));
    if (!is_upper(c))
      throw Error(errc::parse_error, "expected element symbol at offset " + std::to_string(i),
                  std::string(text));

    std::string sym(1, c);
    ++i;
    if (i < n && is_lower(text[i])) {
      sym.push_back(text[i]);
      ++i;
    }

    double frac = 1.0;
    if (i < n && (util::is_digit(text[i]) || text[i] == '.')) {
      std::size_t start = i;
      while (i < n && util::is_digit(text[i])) ++i;
      if (i < n && text[i] == '.') {
        ++i;
        std::size_t fdigits = i;
        while (i < n && util::is_digit(text[i])) ++i;
        if (i == fdigits)
          throw Error(errc::parse_error, "dangling subscript after '" + sym + "'",
                      std::string(text));
      }
      auto parsed = util::parse_number(text.substr(start, i - start));
      if (!parsed)
        throw Error(errc::parse_error, "bad subscript after '" + sym + "'", std::string(text));
      frac = *parsed;
      if (frac <= 0.0)
        throw Error(errc::parse_error, "subscript must be > 0 for '" + sym + "'",
                    std::string(text));
    }
    key.elements.emplace_back(std::move(sym), frac);
  }
  return key;
}

}  // namespace mda::schema
