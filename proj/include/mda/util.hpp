#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mda/errors.hpp"

namespace mda::util {

inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

/// Natural order: digit runs compare by numeric value, everything else
/// byte-wise, full-string comparison breaks remaining ties ("01" vs "1").
inline bool natural_less(std::string_view a, std::string_view b) {
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (is_digit(a[i]) && is_digit(b[j])) {
      std::size_t ia = i, jb = j;
      while (ia < a.size() && is_digit(a[ia])) ++ia;
      while (jb < b.size() && is_digit(b[jb])) ++jb;
      std::string_view ra = a.substr(i, ia - i), rb = b.substr(j, jb - j);
      std::size_t za = ra.find_first_not_of('0'), zb = rb.find_first_not_of('0');
      std::string_view sa = (za == std::string_view::npos) ? ra.substr(ra.size() - 1) : ra.substr(za);
      std::string_view sb = (zb == std::string_view::npos) ? rb.substr(rb.size() - 1) : rb.substr(zb);
      if (sa.size() != sb.size()) return sa.size() < sb.size();
      if (sa != sb) return sa < sb;
      i = ia;
      j = jb;
    } else {
      if (a[i] != b[j]) return static_cast<unsigned char>(a[i]) < static_cast<unsigned char>(b[j]);
      ++i;
      ++j;
    }
  }
  if ((a.size() - i) != (b.size() - j)) return (a.size() - i) < (b.size() - j);
  return a < b;
}

/// Shortest decimal rendering of a double, plain notation: no exponent,
/// no trailing fraction zeros. Round-trips exactly through strtod.
inline std::string format_decimal(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";

  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);

  bool neg = false;
  if (!s.empty() && s[0] == '-') {
    neg = true;
    s.erase(0, 1);
  }

  std::string digits;
  int exp10 = 0;
  std::size_t epos = s.find_first_of("eE");
  std::string mant = (epos == std::string::npos) ? s : s.substr(0, epos);
  if (epos != std::string::npos) exp10 = std::stoi(s.substr(epos + 1));

  std::size_t dot = mant.find('.');
  if (dot == std::string::npos) {
    digits = mant;
  } else {
    digits = mant.substr(0, dot) + mant.substr(dot + 1);
    exp10 -= static_cast<int>(mant.size() - dot - 1);
  }

  std::size_t nz = digits.find_first_not_of('0');
  if (nz == std::string::npos) return "0";
  digits.erase(0, nz);

  // point position counted from the left of `digits`
  int point = static_cast<int>(digits.size()) + exp10;

  std::string out;
  if (point <= 0) {
    out = "0." + std::string(static_cast<std::size_t>(-point), '0') + digits;
  } else if (point >= static_cast<int>(digits.size())) {
    out = digits + std::string(static_cast<std::size_t>(point) - digits.size(), '0');
  } else {
    out = digits.substr(0, static_cast<std::size_t>(point)) + "." +
          digits.substr(static_cast<std::size_t>(point));
  }
  if (out.find('.') != std::string::npos) {
    out.erase(out.find_last_not_of('0') + 1);
    if (!out.empty() && out.back() == '.') out.pop_back();
  }
  return neg ? "-" + out : out;
}

inline std::optional<double> parse_number(std::string_view raw) {
  std::string s = trim(raw);
  if (s.empty()) return std::nullopt;
  const char* beg = s.data();
  const char* end = beg + s.size();
  double v{};
  auto [ptr, ec] = std::from_chars(beg, end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Keeps [A-Za-z0-9._-], maps every other character to '-'.
inline std::string sanitize_token(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || is_digit(c) ||
              c == '.' || c == '_' || c == '-';
    out.push_back(ok ? c : '-');
  }
  return out;
}

inline std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  static const char* hexd = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hexd[h & 0xf];
    h >>= 4;
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(errc::io_error, "cannot open file", p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(errc::io_error, "read failed", p.string());
  return ss.str();
}

/// Write-to-temp then rename, so readers never see a partial file.
inline void atomic_write_file(const std::filesystem::path& p, std::string_view data) {
  static std::atomic<unsigned> counter{0};
  std::ostringstream tmpname;
  tmpname << "." << p.filename().string() << ".tmp." << counter.fetch_add(1) << "."
          << std::random_device{}();
  std::filesystem::path tmp = p.parent_path() / tmpname.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(errc::io_error, "cannot create temp file", tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error(errc::io_error, "write failed", tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, p, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(errc::io_error, "rename failed: " + ec.message(), p.string());
  }
}

}  // namespace mda::util
