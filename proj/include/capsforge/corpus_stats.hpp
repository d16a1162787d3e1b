#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "capsforge/hash.hpp"
#include "capsforge/text.hpp"

namespace capsforge {

using json = nlohmann::json;

using Trigram = std::array<std::string, 3>;

/// Contiguous word 3-grams in order; max(0, n-2) of them.
inline std::vector<Trigram> extract_trigrams(const std::vector<std::string>& words) {
  std::vector<Trigram> out;
  if (words.size() < 3) return out;
  out.reserve(words.size() - 2);
  for (std::size_t i = 0; i + 2 < words.size(); ++i) out.push_back({words[i], words[i + 1], words[i + 2]});
  return out;
}

inline constexpr std::uint64_t kDefaultTrigramSeed = 0x5ca1ab1e0ddba11ULL;

/// Digest of a trigram joined with the ASCII unit separator.
inline std::uint64_t trigram_digest(std::string_view a, std::string_view b, std::string_view c,
                                    std::uint64_t seed = kDefaultTrigramSeed) {
  Digest64 d(seed);
  d.update(a);
  d.update("\x1f");
  d.update(b);
  d.update("\x1f");
  d.update(c);
  return d.finish();
}

enum class StatsMode { Exact, Sketch };

inline std::string_view to_string(StatsMode m) noexcept { return m == StatsMode::Exact ? "exact" : "sketch"; }

class ModeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Logarithmic-counting (HyperLogLog) distinct estimator with 2^p one-byte
/// registers. Merge is register-wise max.
class DistinctSketch {
 public:
  explicit DistinctSketch(int precision = 14) : p_(precision) {
    if (p_ < 10 || p_ > 18) throw std::invalid_argument("sketch precision must lie in [10, 18]");
    registers_.assign(std::size_t{1} << p_, 0);
  }

  void add(std::uint64_t hash) noexcept {
    const std::size_t idx = static_cast<std::size_t>(hash >> (64 - p_));
    const std::uint64_t rest = (hash << p_) | (std::uint64_t{1} << (p_ - 1));  // sentinel bounds the rank
    const auto rank = static_cast<std::uint8_t>(std::countl_zero(rest) + 1);
    if (rank > registers_[idx]) registers_[idx] = rank;
  }

  double estimate() const noexcept {
    const double m = static_cast<double>(registers_.size());
    double sum = 0.0;
    std::size_t zeros = 0;
    for (auto r : registers_) {
      sum += std::ldexp(1.0, -static_cast<int>(r));
      zeros += r == 0;
    }
    const double alpha = 0.7213 / (1.0 + 1.079 / m);
    const double raw = alpha * m * m / sum;
    if (raw <= 2.5 * m && zeros > 0) return m * std::log(m / static_cast<double>(zeros));
    return raw;
  }

  void merge(const DistinctSketch& o) {
    if (o.p_ != p_) throw ModeMismatch("sketch precisions differ");
    for (std::size_t i = 0; i < registers_.size(); ++i) registers_[i] = std::max(registers_[i], o.registers_[i]);
  }

  int precision() const noexcept { return p_; }
  const std::vector<std::uint8_t>& registers() const noexcept { return registers_; }

  friend bool operator==(const DistinctSketch&, const DistinctSketch&) = default;

 private:
  int p_;
  std::vector<std::uint8_t> registers_;
};

struct StatsOptions {
  StatsMode mode = StatsMode::Exact;
  int precision = 14;
  std::uint64_t seed = kDefaultTrigramSeed;
};

/// Mergeable accumulator of caption count, word-length sum and distinct
/// trigrams. Accumulators only merge with the same mode, precision and seed.
class CorpusStats {
 public:
  explicit CorpusStats(StatsOptions opts = {}) : opts_(opts) {
    if (opts_.mode == StatsMode::Sketch) sketch_.emplace(opts_.precision);
  }

  void add_caption(std::string_view caption) {
    const auto words = tokenize_words(caption);
    ++record_count_;
    word_count_sum_ += words.size();
    for (std::size_t i = 0; i + 2 < words.size(); ++i) {
      const auto h = trigram_digest(words[i], words[i + 1], words[i + 2], opts_.seed);
      if (sketch_) sketch_->add(h);
      else exact_.insert(h);
    }
  }

  void merge(const CorpusStats& o) {
    if (o.opts_.mode != opts_.mode) throw ModeMismatch("cannot merge exact and sketch statistics");
    if (o.opts_.seed != opts_.seed) throw ModeMismatch("trigram hash seeds differ");
    if (sketch_) {
      sketch_->merge(*o.sketch_);
    } else {
      exact_.insert(o.exact_.begin(), o.exact_.end());
    }
    record_count_ += o.record_count_;
    word_count_sum_ += o.word_count_sum_;
  }

  std::uint64_t record_count() const noexcept { return record_count_; }
  std::uint64_t word_count_sum() const noexcept { return word_count_sum_; }
  StatsMode mode() const noexcept { return opts_.mode; }
  const StatsOptions& options() const noexcept { return opts_; }

  std::optional<double> avg_length() const noexcept {
    if (record_count_ == 0) return std::nullopt;
    return static_cast<double>(word_count_sum_) / static_cast<double>(record_count_);
  }

  /// Exact count in Exact mode, rounded estimate in Sketch mode.
  std::uint64_t unique_trigrams() const {
    if (sketch_) return static_cast<std::uint64_t>(std::llround(sketch_->estimate()));
    return exact_.size();
  }

  double unique_trigrams_estimate() const {
    return sketch_ ? sketch_->estimate() : static_cast<double>(exact_.size());
  }

  json to_json() const {
    json j{{"record_count", record_count_},
           {"unique_trigrams", unique_trigrams()},
           {"mode", std::string(to_string(opts_.mode))},
           {"tokenizer", std::string(kTokenizerVersion)}};
    if (auto a = avg_length()) j["avg_length"] = *a;
    else j["avg_length"] = nullptr;
    if (sketch_) j["precision"] = opts_.precision;
    return j;
  }

  friend bool operator==(const CorpusStats& a, const CorpusStats& b) {
    return a.opts_.mode == b.opts_.mode && a.opts_.precision == b.opts_.precision && a.opts_.seed == b.opts_.seed &&
           a.record_count_ == b.record_count_ && a.word_count_sum_ == b.word_count_sum_ && a.exact_ == b.exact_ &&
           a.sketch_ == b.sketch_;
  }

 private:
  StatsOptions opts_;
  std::uint64_t record_count_ = 0;
  std::uint64_t word_count_sum_ = 0;
  std::unordered_set<std::uint64_t> exact_;
  std::optional<DistinctSketch> sketch_;
};

template <class Range>
CorpusStats caption_stats(const Range& captions, StatsOptions opts = {}) {
  CorpusStats s(opts);
  for (const auto& c : captions) s.add_caption(c);
  return s;
}

inline CorpusStats merge_stats(CorpusStats a, const CorpusStats& b) {
  a.merge(b);
  return a;
}

}  // namespace capsforge
