#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "capsforge/corpus_io.hpp"
#include "capsforge/text.hpp"

namespace capsforge {

struct FilterConfig {
  double concat_containment_threshold = 0.85;
  int min_words = 3;
  int max_words = 128;
  double copy_similarity_threshold = 0.95;

  void validate() const {
    auto in_unit = [](double v) { return v > 0.0 && v <= 1.0; };
    if (!in_unit(concat_containment_threshold))
      throw std::invalid_argument("concat_containment_threshold must lie in (0, 1]");
    if (!in_unit(copy_similarity_threshold))
      throw std::invalid_argument("copy_similarity_threshold must lie in (0, 1]");
    if (min_words < 1) throw std::invalid_argument("min_words must be positive");
    if (max_words < 1) throw std::invalid_argument("max_words must be positive");
    if (min_words >= max_words) throw std::invalid_argument("min_words must be below max_words");
  }
};

/// Reads a FilterConfig from a JSON object; unknown keys are rejected by name.
inline FilterConfig filter_config_from_json(const json& j, FilterConfig cfg = {}) {
  if (!j.is_object()) throw std::invalid_argument("filter config must be an object");
  for (const auto& [k, v] : j.items()) {
    if (k == "concat_containment_threshold") cfg.concat_containment_threshold = v.get<double>();
    else if (k == "min_words") cfg.min_words = v.get<int>();
    else if (k == "max_words") cfg.max_words = v.get<int>();
    else if (k == "copy_similarity_threshold") cfg.copy_similarity_threshold = v.get<double>();
    else throw std::invalid_argument("unknown filter config key: " + k);
  }
  cfg.validate();
  return cfg;
}

enum class FilterRule { Empty, TooShort, TooLong, Refusal, Concatenation, VerbatimCopyRaw, VerbatimCopySynthetic };

inline constexpr std::array kAllFilterRules = {
    FilterRule::Empty,         FilterRule::TooShort,        FilterRule::TooLong,
    FilterRule::Refusal,       FilterRule::Concatenation,   FilterRule::VerbatimCopyRaw,
    FilterRule::VerbatimCopySynthetic,
};

inline std::string_view to_string(FilterRule r) noexcept {
  switch (r) {
    case FilterRule::Empty: return "empty";
    case FilterRule::TooShort: return "too_short";
    case FilterRule::TooLong: return "too_long";
    case FilterRule::Refusal: return "refusal";
    case FilterRule::Concatenation: return "concatenation";
    case FilterRule::VerbatimCopyRaw: return "verbatim_copy_raw";
    case FilterRule::VerbatimCopySynthetic: return "verbatim_copy_synthetic";
  }
  return "empty";
}

struct FilterVerdict {
  bool accepted = true;
  std::vector<FilterRule> triggered_rules;
  std::map<FilterRule, std::string> evidence;

  bool triggered(FilterRule r) const {
    return std::find(triggered_rules.begin(), triggered_rules.end(), r) != triggered_rules.end();
  }
};

// ---------------------------------------------------------------------------
// Word-level similarity primitives

using Words = std::vector<std::string>;

/// Length of the longest common contiguous run of words.
inline std::size_t longest_common_word_run(const Words& a, const Words& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  std::size_t best = 0;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : 0;
      best = std::max(best, cur[j]);
    }
    std::swap(prev, cur);
  }
  return best;
}

/// Fraction of `a` covered by its longest contiguous run inside `b`.
inline double containment(const Words& a, const Words& b) {
  if (a.empty()) return 0.0;
  return static_cast<double>(longest_common_word_run(a, b)) / static_cast<double>(a.size());
}

inline std::size_t word_edit_distance(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// 1 - edit_distance / max_len over tok/v1 words. Symmetric; 1 for identical
/// non-empty inputs; 1 for two empty inputs.
inline double copy_similarity(const Words& a, const Words& b) {
  const std::size_t n = std::max(a.size(), b.size());
  if (n == 0) return 1.0;
  return 1.0 - static_cast<double>(word_edit_distance(a, b)) / static_cast<double>(n);
}

inline double copy_similarity(std::string_view a, std::string_view b) {
  return copy_similarity(tokenize_words(a), tokenize_words(b));
}

struct ConcatenationCheck {
  bool flagged = false;
  double score = 0.0;
};

/// Flags fusions that merely join the two inputs: both inputs survive as long
/// contiguous runs and the fused text is about as long as the two together.
inline ConcatenationCheck detect_concatenation(std::string_view raw, std::string_view synthetic,
                                               std::string_view fused, double threshold) {
  const Words r = tokenize_words(raw), s = tokenize_words(synthetic), f = tokenize_words(fused);
  ConcatenationCheck c;
  c.score = std::min(containment(r, f), containment(s, f));
  c.flagged = c.score >= threshold &&
              static_cast<double>(f.size()) >= 0.8 * static_cast<double>(r.size() + s.size());
  return c;
}

/// Start-anchored, case-insensitive match against the refusal phrases.
inline bool detect_refusal(std::string_view fused) {
  static constexpr std::string_view kPatterns[] = {"i'm sorry", "i am sorry", "as an ai", "i cannot",
                                                   "unable to merge"};
  std::string s = collapse_whitespace(fused);
  // Treat typographic apostrophes like ASCII ones.
  for (std::size_t pos; (pos = s.find("’")) != std::string::npos;) s.replace(pos, 3, "'");
  for (auto p : kPatterns) {
    if (iequals_prefix(s, p)) return true;
  }
  return false;
}

namespace detail {

inline std::string fmt_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

/// Evaluates every rule (no short-circuit) so evidence is complete.
inline FilterVerdict apply_filters(const FusedRecord& record, const FilterConfig& cfg) {
  FilterVerdict v;
  auto trigger = [&](FilterRule r, std::string ev) {
    v.triggered_rules.push_back(r);
    v.evidence[r] = std::move(ev);
  };

  const auto& raw = record.base.raw_caption;
  const auto& syn = record.base.synthetic_caption;
  const Words fw = tokenize_words(record.fused_caption);
  const Words rw = tokenize_words(raw);
  const Words sw = tokenize_words(syn);

  if (fw.empty()) trigger(FilterRule::Empty, "words=0");
  const auto n = static_cast<int>(fw.size());
  if (!fw.empty() && n < cfg.min_words) trigger(FilterRule::TooShort, "words=" + std::to_string(n));
  if (n > cfg.max_words) trigger(FilterRule::TooLong, "words=" + std::to_string(n));
  if (detect_refusal(record.fused_caption)) trigger(FilterRule::Refusal, "start-anchored refusal phrase");
  if (!fw.empty()) {
    const double score = std::min(containment(rw, fw), containment(sw, fw));
    const bool long_enough = static_cast<double>(fw.size()) >= 0.8 * static_cast<double>(rw.size() + sw.size());
    if (score >= cfg.concat_containment_threshold && long_enough)
      trigger(FilterRule::Concatenation, "containment=" + detail::fmt_score(score));
    const double sim_raw = copy_similarity(fw, rw);
    if (sim_raw >= cfg.copy_similarity_threshold)
      trigger(FilterRule::VerbatimCopyRaw, "similarity=" + detail::fmt_score(sim_raw));
    const double sim_syn = copy_similarity(fw, sw);
    if (sim_syn >= cfg.copy_similarity_threshold)
      trigger(FilterRule::VerbatimCopySynthetic, "similarity=" + detail::fmt_score(sim_syn));
  }
  v.accepted = v.triggered_rules.empty();
  return v;
}

// ---------------------------------------------------------------------------
// Corpus-level filtering

struct FilterReport {
  std::uint64_t input_count = 0;
  std::uint64_t retained_count = 0;
  std::uint64_t not_fused = 0;  // BackendError/Filtered records, dropped before rules
  std::map<FilterRule, std::uint64_t> per_rule_counts;

  double retention() const noexcept {
    return input_count == 0 ? 1.0 : static_cast<double>(retained_count) / static_cast<double>(input_count);
  }

  void add(const FilterVerdict& v) {
    ++input_count;
    if (v.accepted) ++retained_count;
    for (auto r : v.triggered_rules) ++per_rule_counts[r];
  }

  void merge(const FilterReport& o) {
    input_count += o.input_count;
    retained_count += o.retained_count;
    not_fused += o.not_fused;
    for (const auto& [r, c] : o.per_rule_counts) per_rule_counts[r] += c;
  }

  json to_json() const {
    json rules = json::object();
    for (auto r : kAllFilterRules) {
      auto it = per_rule_counts.find(r);
      rules[std::string(to_string(r))] = it == per_rule_counts.end() ? 0 : it->second;
    }
    return json{{"input_count", input_count},
                {"retained_count", retained_count},
                {"not_fused", not_fused},
                {"retention", retention()},
                {"per_rule_counts", rules}};
  }

  friend bool operator==(const FilterReport&, const FilterReport&) = default;
};

/// Filters a single shard, writing accepted records to `out` in input order.
inline FilterReport filter_shard(const fs::path& in, const fs::path& out, const FilterConfig& cfg) {
  FilterReport report;
  FusedShardReader reader(in);
  ShardWriter writer(out);
  while (auto rec = reader.next()) {
    if (rec->status != FusionStatus::Fused) {
      ++report.input_count;
      ++report.not_fused;
      continue;
    }
    FilterVerdict v = apply_filters(*rec, cfg);
    report.add(v);
    if (v.accepted) writer.write(*rec);
  }
  writer.finish();
  return report;
}

struct FilterRun {
  std::vector<fs::path> retained_shards;
  FilterReport report;
};

inline FilterRun filter_corpus(const std::vector<fs::path>& shards, const fs::path& output_dir,
                               const FilterConfig& cfg) {
  cfg.validate();
  FilterRun run;
  for (const auto& in : shards) {
    const fs::path out = output_dir / in.filename();
    run.report.merge(filter_shard(in, out, cfg));
    run.retained_shards.push_back(out);
  }
  return run;
}

}  // namespace capsforge
