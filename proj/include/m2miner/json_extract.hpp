#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace m2 {

namespace detail {

inline std::optional<nlohmann::json> try_parse(std::string_view s) {
  auto j = nlohmann::json::parse(s.begin(), s.end(), nullptr, false);
  if (j.is_discarded() || !(j.is_object() || j.is_array())) return std::nullopt;
  return j;
}

/// Bodies of ``` fences, in order. The info string (e.g. "json") after the opening fence is skipped.
inline std::vector<std::string_view> fenced_blocks(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  for (;;) {
    const auto open = text.find("```", pos);
    if (open == std::string_view::npos) break;
    auto body = text.find('\n', open + 3);
    if (body == std::string_view::npos) break;
    ++body;
    const auto close = text.find("```", body);
    if (close == std::string_view::npos) break;
    out.push_back(text.substr(body, close - body));
    pos = close + 3;
  }
  return out;
}

/// End index (exclusive) of the bracket group opening at `start`, skipping string literals.
inline std::optional<std::size_t> balanced_end(std::string_view s, std::size_t start) {
  std::vector<char> stack;
  bool in_str = false, esc = false;
  for (std::size_t i = start; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      if (esc) esc = false;
      else if (c == '\\') esc = true;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{' || c == '[') stack.push_back(c == '{' ? '}' : ']');
    else if (c == '}' || c == ']') {
      if (stack.empty() || stack.back() != c) return std::nullopt;
      stack.pop_back();
      if (stack.empty()) return i + 1;
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Structured payload inside a model reply: the first parseable fenced block, else the first
/// balanced {...} or [...] span that parses, else nothing. Objects are preferred over arrays.
inline std::optional<nlohmann::json> extract_json(std::string_view text) {
  for (auto block : detail::fenced_blocks(text))
    if (auto j = detail::try_parse(block)) return j;
  std::optional<nlohmann::json> first_array;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '{' && text[i] != '[') continue;
    const auto end = detail::balanced_end(text, i);
    if (!end) continue;
    if (auto j = detail::try_parse(text.substr(i, *end - i))) {
      if (j->is_object()) return j;
      if (!first_array) first_array = std::move(j);
      i = *end - 1;
    }
  }
  return first_array;
}

}  // namespace m2
