#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace capsforge {

/// Identifier of the word tokenization rule. Bump when tokenize_words changes
/// so that reported statistics stay comparable across runs.
inline constexpr std::string_view kTokenizerVersion = "tok/v1";

namespace detail {

// Decodes one UTF-8 code point starting at s[i]. An invalid byte decodes as
// U+FFFD with length 1 so that tokenization is total and keeps the raw byte.
inline char32_t decode_utf8(std::string_view s, std::size_t i, std::size_t& len) noexcept {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    len = 1;
    return b0;
  }
  if ((b0 & 0xE0) == 0xC0) {
    int c1 = cont(1);
    if (c1 >= 0) {
      len = 2;
      return (char32_t(b0 & 0x1F) << 6) | char32_t(c1);
    }
  } else if ((b0 & 0xF0) == 0xE0) {
    int c1 = cont(1), c2 = c1 >= 0 ? cont(2) : -1;
    if (c2 >= 0) {
      len = 3;
      return (char32_t(b0 & 0x0F) << 12) | (char32_t(c1) << 6) | char32_t(c2);
    }
  } else if ((b0 & 0xF8) == 0xF0) {
    int c1 = cont(1), c2 = c1 >= 0 ? cont(2) : -1, c3 = c2 >= 0 ? cont(3) : -1;
    if (c3 >= 0) {
      len = 4;
      return (char32_t(b0 & 0x07) << 18) | (char32_t(c1) << 12) | (char32_t(c2) << 6) |
             char32_t(c3);
    }
  }
  len = 1;
  return 0xFFFD;
}

}  // namespace detail

constexpr bool is_unicode_space(char32_t c) noexcept {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F ||
         c == 0x205F || c == 0x3000;
}

/// Punctuation removed by tok/v1: ASCII punctuation plus the common typographic
/// quotes, dashes, ellipsis and guillemets.
constexpr bool is_strippable_punct(char32_t c) noexcept {
  if (c < 0x80) {
    return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
           (c >= 0x7B && c <= 0x7E);
  }
  return (c >= 0x2010 && c <= 0x2027) || c == 0xAB || c == 0xBB || c == 0xBF || c == 0xA1 ||
         c == 0x3001 || c == 0x3002;
}

constexpr bool is_ascii_space(char c) noexcept {
  return c == ' ' || (c >= '\t' && c <= '\r');
}

/// Trims ASCII whitespace only; see collapse_whitespace for the Unicode-aware form.
inline std::string_view trim(std::string_view s) noexcept {
  std::size_t b = 0, e = s.size();
  while (b < e && is_ascii_space(s[b])) ++b;
  while (e > b && is_ascii_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

/// True when the text holds nothing but Unicode whitespace.
inline bool is_blank(std::string_view s) noexcept {
  for (std::size_t i = 0; i < s.size();) {
    std::size_t len = 1;
    if (!is_unicode_space(detail::decode_utf8(s, i, len))) return false;
    i += len;
  }
  return true;
}

/// Collapses every run of Unicode whitespace into one ASCII space and trims.
inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (std::size_t i = 0; i < s.size();) {
    std::size_t len = 1;
    const char32_t cp = detail::decode_utf8(s, i, len);
    if (is_unicode_space(cp)) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.append(s.substr(i, len));
    }
    i += len;
  }
  return out;
}

/// tok/v1 word tokenizer: ASCII-lowercases, deletes punctuation, splits on
/// Unicode whitespace and drops empty tokens.
inline std::vector<std::string> tokenize_words(std::string_view caption) {
  std::vector<std::string> words;
  std::string cur;
  for (std::size_t i = 0; i < caption.size();) {
    std::size_t len = 1;
    const char32_t cp = detail::decode_utf8(caption, i, len);
    if (is_unicode_space(cp)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else if (!is_strippable_punct(cp)) {
      if (cp >= 'A' && cp <= 'Z') {
        cur.push_back(static_cast<char>(cp - 'A' + 'a'));
      } else {
        cur.append(caption.substr(i, len));
      }
    }
    i += len;
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline std::size_t count_words(std::string_view caption) { return tokenize_words(caption).size(); }

inline bool iequals_prefix(std::string_view text, std::string_view prefix) noexcept {
  if (text.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    auto a = static_cast<unsigned char>(text[i]);
    auto b = static_cast<unsigned char>(prefix[i]);
    if (a >= 'A' && a <= 'Z') a = a - 'A' + 'a';
    if (b >= 'A' && b <= 'Z') b = b - 'A' + 'a';
    if (a != b) return false;
  }
  return true;
}

}  // namespace capsforge
