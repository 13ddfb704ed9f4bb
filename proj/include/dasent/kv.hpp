#pragma once

// key=value text: one pair per line, '#' comments, surrounding blanks trimmed.

#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <string_view>

#include "dasent/errors.hpp"

namespace dasent {

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_key_values(std::istream& in, const std::string& source = "<config>") {
  KeyValues out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError(source, lineno, "expected key=value");
    std::string key = trim(std::string_view(text).substr(0, eq));
    if (key.empty()) throw ParseError(source, lineno, "empty key");
    out[key] = trim(std::string_view(text).substr(eq + 1));
  }
  return out;
}

inline void write_key_values(std::ostream& os, const KeyValues& kv) {
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
}

}  // namespace dasent
