#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capsforge/corpus_io.hpp"
#include "capsforge/fusion_engine.hpp"
#include "capsforge/hash.hpp"

namespace capsforge {

inline constexpr std::string_view kChatFormat = "capsforge.chat/v1";

struct CaptionTriplet {
  std::string raw;
  std::string synthetic;
  std::string fused;
  std::string source_id;

  friend bool operator==(const CaptionTriplet&, const CaptionTriplet&) = default;
};

class InvalidTriplet : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate(const CaptionTriplet& t) {
  if (is_blank(t.raw)) throw InvalidTriplet("triplet " + t.source_id + ": empty raw caption");
  if (is_blank(t.synthetic)) throw InvalidTriplet("triplet " + t.source_id + ": empty synthetic caption");
  if (is_blank(t.fused)) throw InvalidTriplet("triplet " + t.source_id + ": empty fused caption");
}

/// One finetuning example: the fusion prompt as the user turn, the fused
/// caption as the target. The inputs are repeated verbatim so a line parses
/// back to its triplet without re-reading the prompt.
inline ordered_json render_chat_example(const CaptionTriplet& t) {
  validate(t);
  ordered_json j;
  j["source_id"] = t.source_id;
  j["messages"] = ordered_json::array({ordered_json{{"role", "user"}, {"content", build_prompt(t.raw, t.synthetic)}}});
  j["target"] = t.fused;
  j["inputs"] = ordered_json{{"raw", t.raw}, {"synthetic", t.synthetic}};
  return j;
}

inline CaptionTriplet parse_chat_example(std::string_view line) {
  const json j = json::parse(line);
  CaptionTriplet t;
  t.source_id = j.at("source_id").get<std::string>();
  t.fused = j.at("target").get<std::string>();
  t.raw = j.at("inputs").at("raw").get<std::string>();
  t.synthetic = j.at("inputs").at("synthetic").get<std::string>();
  return t;
}

inline std::optional<CaptionTriplet> triplet_from(const FusedRecord& r) {
  if (r.status != FusionStatus::Fused || is_blank(r.fused_caption)) return std::nullopt;
  return CaptionTriplet{r.base.raw_caption, r.base.synthetic_caption, r.fused_caption, r.base.id};
}

struct ExportResult {
  fs::path train_path;
  fs::path val_path;
  std::uint64_t train_count = 0;
  std::uint64_t val_count = 0;
  std::uint64_t skipped = 0;  // records without a usable fused caption
};

/// Re-iterable triplet source: calling it runs `fn` over every triplet.
using TripletVisitor = std::function<void(const std::function<void(const CaptionTriplet&)>&)>;

namespace detail {

struct SplitKey {
  std::uint64_t hash;
  std::string id;
  auto operator<=>(const SplitKey&) const = default;
};

inline SplitKey split_key(const std::string& source_id, std::uint64_t seed) { return {digest64(source_id, seed), source_id}; }

inline void write_header(std::ofstream& out, std::string_view split, std::uint64_t seed, double val_fraction) {
  ordered_json h;
  h["format"] = kChatFormat;
  h["split"] = split;
  h["prompt_version"] = kPromptVersion;
  h["seed"] = seed;
  h["val_fraction"] = val_fraction;
  out << h.dump() << '\n';
}

}  // namespace detail

/// Writes train.jsonl / val.jsonl under out_dir. Each source_id is ranked by
/// its seeded digest; the round(n · val_fraction) lowest ranks form the
/// validation split. The split therefore depends on (ids, seed, fraction)
/// only, not on corpus order, and one id never lands in both files.
inline ExportResult export_triplets(const TripletVisitor& visit, const fs::path& out_dir, double val_fraction,
                                    std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw std::invalid_argument("val_fraction must lie in [0, 1)");
  std::vector<detail::SplitKey> keys;
  visit([&](const CaptionTriplet& t) { keys.push_back(detail::split_key(t.source_id, seed)); });

  const auto n = keys.size();
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction + 0.5));
  std::optional<detail::SplitKey> cutoff;
  if (k > 0) {
    std::nth_element(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(k - 1), keys.end());
    cutoff = keys[k - 1];
  }
  keys.clear();
  keys.shrink_to_fit();

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  ExportResult res{out_dir / "train.jsonl", out_dir / "val.jsonl"};
  std::ofstream train(res.train_path, std::ios::binary | std::ios::trunc);
  std::ofstream val(res.val_path, std::ios::binary | std::ios::trunc);
  if (!train || !val) throw IoError("cannot open export files under " + out_dir.string());
  detail::write_header(train, "train", seed, val_fraction);
  detail::write_header(val, "val", seed, val_fraction);

  visit([&](const CaptionTriplet& t) {
    const std::string line = render_chat_example(t).dump();
    if (cutoff && detail::split_key(t.source_id, seed) <= *cutoff) {
      val << line << '\n';
      ++res.val_count;
    } else {
      train << line << '\n';
      ++res.train_count;
    }
  });
  train.flush();
  val.flush();
  if (!train || !val) throw IoError("write failure under " + out_dir.string());
  return res;
}

inline ExportResult export_triplets(const std::vector<CaptionTriplet>& triplets, const fs::path& out_dir,
                                    double val_fraction, std::uint64_t seed) {
  return export_triplets([&](const auto& fn) { for (const auto& t : triplets) fn(t); }, out_dir, val_fraction, seed);
}

/// Exports from shards of fused records, skipping records that were not fused.
inline ExportResult export_triplets(const std::vector<fs::path>& shards, const fs::path& out_dir,
                                    double val_fraction, std::uint64_t seed) {
  std::uint64_t skipped = 0;
  bool first_pass = true;
  auto visit = [&](const std::function<void(const CaptionTriplet&)>& fn) {
    for (const auto& s : shards) {
      FusedShardReader reader(s);
      while (auto r = reader.next()) {
        if (auto t = triplet_from(*r)) fn(*t);
        else if (first_pass) ++skipped;
      }
    }
    first_pass = false;
  };
  auto res = export_triplets(visit, out_dir, val_fraction, seed);
  res.skipped = skipped;
  return res;
}

/// Reads an exported split back, skipping its header line.
inline std::vector<CaptionTriplet> read_chat_split(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<CaptionTriplet> out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (!line.empty()) out.push_back(parse_chat_example(line));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Refiner training configuration (metadata only; nothing here trains)

inline const std::vector<std::pair<std::string, std::string>>& refiner_training_config() {
  static const std::vector<std::pair<std::string, std::string>> cfg = {
      {"model_init", "LLaMA-2-13B"}, {"batch_size", "128"},       {"epochs", "2"},
      {"peak_lr", "1e-5"},           {"end_lr", "0"},             {"warmup_steps", "500"},
      {"scheduler", "cosine"},       {"optimizer", "AdamW"},      {"betas", "(0.9,0.95)"},
      {"eps", "1e-8"},               {"weight_decay", "0.0"},
  };
  return cfg;
}

inline void emit_training_config(const fs::path& out_path) {
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + out_path.string());
  for (const auto& [k, v] : refiner_training_config()) out << k << '=' << v << '\n';
  if (!out.flush()) throw IoError("cannot write " + out_path.string());
}

/// Parses a flat key=value file; blank lines and '#' comments are ignored.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("not a key=value line: " + std::string(t));
    out.emplace_back(std::string(trim(t.substr(0, eq))), std::string(trim(t.substr(eq + 1))));
  }
  return out;
}

}  // namespace capsforge
