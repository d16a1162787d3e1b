#pragma once

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace capsforge {

// Murmur3 fmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  x *= 0xc4ceb9fe1a85ec53ULL;
  x ^= x >> 33;
  return x;
}

/// Seeded 64-bit content digest: FNV-1a over the bytes, then a full-avalanche
/// finalizer so the low and high bits are both usable for bucketing.
constexpr std::uint64_t digest64(std::string_view bytes, std::uint64_t seed = 0) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ mix64(seed + 0x9e3779b97f4a7c15ULL);
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h ^ (static_cast<std::uint64_t>(bytes.size()) * 0x9e3779b97f4a7c15ULL));
}

/// Incremental form of digest64 for streamed payloads.
class Digest64 {
 public:
  explicit Digest64(std::uint64_t seed = 0) noexcept
      : state_(0xcbf29ce484222325ULL ^ mix64(seed + 0x9e3779b97f4a7c15ULL)) {}

  void update(std::string_view bytes) noexcept {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
    size_ += bytes.size();
  }

  std::uint64_t finish() const noexcept {
    return mix64(state_ ^ (size_ * 0x9e3779b97f4a7c15ULL));
  }

 private:
  std::uint64_t state_;
  std::uint64_t size_ = 0;
};

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf, 16);
}

inline std::optional<std::uint64_t> from_hex(std::string_view s) {
  if (s.empty() || s.size() > 16) return std::nullopt;
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') v |= static_cast<std::uint64_t>(c - 'A' + 10);
    else return std::nullopt;
  }
  return v;
}

}  // namespace capsforge
