#pragma once

#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "capsforge/text.hpp"

namespace capsforge::cider {

inline constexpr int kMaxN = 4;
inline constexpr double kSigma = 6.0;

/// n-gram → count; the n-gram key is its words joined by single spaces.
using NGramCounts = std::unordered_map<std::string, int>;

class EmptyCorpus : public std::invalid_argument {
 public:
  EmptyCorpus() : std::invalid_argument("reference corpus is empty") {}
};

class MissingReferences : public std::invalid_argument {
 public:
  explicit MissingReferences(const std::string& id)
      : std::invalid_argument("no references for image " + id), id_(id) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

inline NGramCounts ngram_counts(const std::vector<std::string>& tokens, int n) {
  if (n < 1 || n > kMaxN) throw std::invalid_argument("n-gram order must lie in [1, 4]");
  NGramCounts out;
  const auto un = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i + un <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (std::size_t k = 1; k < un; ++k) {
      key.push_back(' ');
      key += tokens[i + k];
    }
    ++out[key];
  }
  return out;
}

/// Document frequencies over reference sets, one table per n-gram order.
struct DocFreqIndex {
  std::array<std::unordered_map<std::string, int>, kMaxN> df;
  std::size_t corpus_size = 0;

  int doc_freq(int n, const std::string& gram) const {
    const auto& table = df[static_cast<std::size_t>(n - 1)];
    auto it = table.find(gram);
    return it == table.end() ? 0 : it->second;
  }

  /// ln(N / max(1, df)); unseen n-grams get the maximum weight ln(N).
  double idf(int n, const std::string& gram) const {
    const int d = std::max(1, doc_freq(n, gram));
    return std::log(static_cast<double>(corpus_size)) - std::log(static_cast<double>(d));
  }
};

using References = std::map<std::string, std::vector<std::string>>;
using Candidates = std::map<std::string, std::string>;

inline DocFreqIndex build_tfidf_index(const References& references) {
  if (references.empty()) throw EmptyCorpus();
  DocFreqIndex index;
  index.corpus_size = references.size();
  for (const auto& [id, refs] : references) {
    std::array<std::unordered_set<std::string>, kMaxN> seen;
    for (const auto& ref : refs) {
      const auto tokens = tokenize_words(ref);
      for (int n = 1; n <= kMaxN; ++n) {
        for (auto& [gram, count] : ngram_counts(tokens, n)) seen[static_cast<std::size_t>(n - 1)].insert(gram);
      }
    }
    for (int n = 0; n < kMaxN; ++n) {
      for (const auto& gram : seen[static_cast<std::size_t>(n)]) ++index.df[static_cast<std::size_t>(n)][gram];
    }
  }
  return index;
}

struct CiderScore {
  std::map<std::string, double> per_image;
  double corpus_mean = 0.0;

  /// Benchmark display convention (mean × 100).
  double display() const noexcept { return corpus_mean * 100.0; }
};

namespace detail {

struct WeightedCaption {
  std::array<std::unordered_map<std::string, double>, kMaxN> vec;
  std::array<double, kMaxN> norm{};
  std::size_t length = 0;
};

inline WeightedCaption weigh(const std::string& caption, const DocFreqIndex& index) {
  WeightedCaption w;
  const auto tokens = tokenize_words(caption);
  w.length = tokens.size();
  for (int n = 1; n <= kMaxN; ++n) {
    const auto k = static_cast<std::size_t>(n - 1);
    double sq = 0.0;
    for (const auto& [gram, tf] : ngram_counts(tokens, n)) {
      const double v = static_cast<double>(tf) * index.idf(n, gram);
      w.vec[k].emplace(gram, v);
      sq += v * v;
    }
    w.norm[k] = std::sqrt(sq);
  }
  return w;
}

inline double length_penalty(std::size_t cand_len, std::size_t ref_len, double sigma) {
  const double delta = static_cast<double>(cand_len) - static_cast<double>(ref_len);
  return std::exp(-(delta * delta) / (2.0 * sigma * sigma));
}

// Sum over n of the clipped, length-penalized cosine between one candidate and one reference.
inline double pair_similarity(const WeightedCaption& cand, const WeightedCaption& ref, double sigma) {
  const double penalty = length_penalty(cand.length, ref.length, sigma);
  double total = 0.0;
  for (std::size_t k = 0; k < kMaxN; ++k) {
    if (cand.norm[k] == 0.0 || ref.norm[k] == 0.0) continue;
    double dot = 0.0;
    for (const auto& [gram, cv] : cand.vec[k]) {
      auto it = ref.vec[k].find(gram);
      if (it == ref.vec[k].end()) continue;
      dot += std::min(cv, it->second) * it->second;
    }
    total += penalty * dot / (cand.norm[k] * ref.norm[k]);
  }
  return total;
}

}  // namespace detail

/// CIDEr-D score of a single candidate against its references, in [0, 10].
inline double cider_d_single(const std::string& candidate, const std::vector<std::string>& refs,
                             const DocFreqIndex& index, double sigma = kSigma) {
  if (refs.empty()) return 0.0;
  const auto cand = detail::weigh(candidate, index);
  double sum = 0.0;
  for (const auto& r : refs) sum += detail::pair_similarity(cand, detail::weigh(r, index), sigma);
  return 10.0 * (sum / static_cast<double>(refs.size())) / static_cast<double>(kMaxN);
}

inline CiderScore cider_d(const Candidates& candidates, const References& references, const DocFreqIndex& index,
                          double sigma = kSigma) {
  CiderScore score;
  for (const auto& [id, caption] : candidates) {
    auto it = references.find(id);
    if (it == references.end()) throw MissingReferences(id);
    score.per_image[id] = cider_d_single(caption, it->second, index, sigma);
  }
  double sum = 0.0;
  for (const auto& [id, s] : score.per_image) sum += s;
  score.corpus_mean = score.per_image.empty() ? 0.0 : sum / static_cast<double>(score.per_image.size());
  return score;
}

inline CiderScore cider_d(const Candidates& candidates, const References& references) {
  return cider_d(candidates, references, build_tfidf_index(references));
}

}  // namespace capsforge::cider
