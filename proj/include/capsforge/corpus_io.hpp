#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <iterator>
#include <type_traits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capsforge/hash.hpp"
#include "capsforge/text.hpp"

namespace capsforge {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

inline constexpr std::string_view kShardExtension = ".rlc";
inline constexpr std::string_view kManifestSuffix = ".manifest";

// ---------------------------------------------------------------------------
// Errors

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedLine : public std::runtime_error {
 public:
  MalformedLine(std::size_t line_no, std::uint64_t byte_offset, const std::string& why)
      : std::runtime_error("malformed record at line " + std::to_string(line_no) + " (byte " +
                           std::to_string(byte_offset) + "): " + why),
        line_no_(line_no),
        byte_offset_(byte_offset) {}

  std::size_t line_no() const noexcept { return line_no_; }
  std::uint64_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t line_no_;
  std::uint64_t byte_offset_;
};

class DuplicateId : public std::runtime_error {
 public:
  explicit DuplicateId(std::string id)
      : std::runtime_error("duplicate record id: " + id), id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

// ---------------------------------------------------------------------------
// Records

/// One image reference with its web (raw) and model-generated (synthetic)
/// captions. Keys of the record line that this struct does not model are kept
/// in `extra` and written back unchanged.
struct ImageTextRecord {
  std::string id;
  std::string image_ref;
  std::string raw_caption;
  std::string synthetic_caption;
  std::map<std::string, std::string> meta;
  json extra = json::object();

  friend bool operator==(const ImageTextRecord&, const ImageTextRecord&) = default;
};

enum class FusionStatus { Fused, BackendError, Filtered };

inline std::string_view to_string(FusionStatus s) noexcept {
  switch (s) {
    case FusionStatus::Fused: return "fused";
    case FusionStatus::BackendError: return "backend_error";
    case FusionStatus::Filtered: return "filtered";
  }
  return "fused";
}

inline std::optional<FusionStatus> parse_status(std::string_view s) noexcept {
  if (s == "fused") return FusionStatus::Fused;
  if (s == "backend_error") return FusionStatus::BackendError;
  if (s == "filtered") return FusionStatus::Filtered;
  return std::nullopt;
}

struct FusedRecord {
  ImageTextRecord base;
  std::string fused_caption;
  std::string backend_model;
  std::uint64_t latency_ms = 0;  // not serialized: it would make shards non-reproducible
  FusionStatus status = FusionStatus::Fused;

  friend bool operator==(const FusedRecord& a, const FusedRecord& b) {
    return a.base == b.base && a.fused_caption == b.fused_caption &&
           a.backend_model == b.backend_model && a.status == b.status;
  }
};

/// Synthesized id for source rows that carry none: the digest of image_ref.
inline std::string synthesize_id(std::string_view image_ref) { return to_hex(digest64(image_ref)); }

// ---------------------------------------------------------------------------
// Record line format

namespace detail {

inline const std::unordered_set<std::string_view>& modeled_keys() {
  static const std::unordered_set<std::string_view> keys = {
      "id", "image_ref", "raw_caption", "synthetic_caption", "meta"};
  return keys;
}

}  // namespace detail

inline ordered_json to_json(const ImageTextRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["image_ref"] = r.image_ref;
  j["raw_caption"] = r.raw_caption;
  j["synthetic_caption"] = r.synthetic_caption;
  if (!r.meta.empty()) j["meta"] = r.meta;
  for (const auto& [k, v] : r.extra.items()) j[k] = v;
  return j;
}

inline ordered_json to_json(const FusedRecord& r) {
  ordered_json j = to_json(r.base);
  j["fused_caption"] = r.fused_caption;
  j["status"] = std::string(to_string(r.status));
  if (!r.backend_model.empty()) j["backend_model"] = r.backend_model;
  return j;
}

inline std::string to_line(const ImageTextRecord& r) { return to_json(r).dump(); }
inline std::string to_line(const FusedRecord& r) { return to_json(r).dump(); }

/// Parses one record line. Throws MalformedLine (with the supplied position)
/// on syntax errors, missing required keys, wrong types or blank captions.
inline ImageTextRecord parse_record_line(std::string_view line, std::size_t line_no = 0,
                                         std::uint64_t byte_offset = 0) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw MalformedLine(line_no, byte_offset, std::string("syntax: ") + e.what());
  }
  if (!j.is_object()) throw MalformedLine(line_no, byte_offset, "not an object");

  auto required = [&](const char* key) -> std::string {
    auto it = j.find(key);
    if (it == j.end()) throw MalformedLine(line_no, byte_offset, std::string("missing `") + key + "`");
    if (!it->is_string()) throw MalformedLine(line_no, byte_offset, std::string("`") + key + "` not text");
    return it->get<std::string>();
  };

  ImageTextRecord r;
  r.image_ref = required("image_ref");
  r.raw_caption = required("raw_caption");
  r.synthetic_caption = required("synthetic_caption");
  if (auto it = j.find("id"); it != j.end()) {
    if (!it->is_string()) throw MalformedLine(line_no, byte_offset, "`id` not text");
    r.id = it->get<std::string>();
  }
  if (r.id.empty()) r.id = synthesize_id(r.image_ref);
  if (is_blank(r.raw_caption)) throw MalformedLine(line_no, byte_offset, "blank raw_caption");
  if (is_blank(r.synthetic_caption)) throw MalformedLine(line_no, byte_offset, "blank synthetic_caption");

  if (auto it = j.find("meta"); it != j.end()) {
    if (!it->is_object()) throw MalformedLine(line_no, byte_offset, "`meta` not a map");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) throw MalformedLine(line_no, byte_offset, "meta value not text");
      r.meta.emplace(k, v.get<std::string>());
    }
  }
  for (const auto& [k, v] : j.items()) {
    if (!detail::modeled_keys().contains(k)) r.extra[k] = v;
  }
  return r;
}

/// Lifts the fusion keys out of `extra`. A record without `status` is taken
/// as Fused when it carries a fused caption and as Filtered otherwise.
inline FusedRecord to_fused(ImageTextRecord r) {
  FusedRecord f;
  auto take = [&](const char* key) -> std::optional<json> {
    auto it = r.extra.find(key);
    if (it == r.extra.end()) return std::nullopt;
    json v = *it;
    r.extra.erase(it);
    return v;
  };
  auto fused = take("fused_caption");
  auto status = take("status");
  auto model = take("backend_model");
  if (fused && fused->is_string()) f.fused_caption = fused->get<std::string>();
  if (model && model->is_string()) f.backend_model = model->get<std::string>();
  std::optional<FusionStatus> st;
  if (status && status->is_string()) st = parse_status(status->get<std::string>());
  f.status = st.value_or(f.fused_caption.empty() ? FusionStatus::Filtered : FusionStatus::Fused);
  f.base = std::move(r);
  return f;
}

// ---------------------------------------------------------------------------
// Streams

/// Anything that yields records one at a time until it returns nullopt.
template <class S>
concept RecordSource = requires(S s) {
  { s.next() };
  typename S::value_type;
};

/// Lazy, constant-memory reader over one shard file.
class ShardReader {
 public:
  using value_type = ImageTextRecord;

  explicit ShardReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open shard for reading: " + path.string());
  }

  std::optional<ImageTextRecord> next() {
    std::string line;
    while (true) {
      const std::uint64_t offset = offset_;
      if (!std::getline(in_, line)) {
        if (in_.bad()) throw IoError("read failure: " + path_.string());
        return std::nullopt;
      }
      ++line_no_;
      offset_ += line.size() + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (trim(line).empty()) continue;
      return parse_record_line(line, line_no_, offset);
    }
  }

  std::size_t line_no() const noexcept { return line_no_; }

 private:
  fs::path path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
  std::uint64_t offset_ = 0;
};

/// Reader that yields FusedRecords from a shard written by the fusion stage.
class FusedShardReader {
 public:
  using value_type = FusedRecord;

  explicit FusedShardReader(const fs::path& path) : inner_(path) {}

  std::optional<FusedRecord> next() {
    auto r = inner_.next();
    if (!r) return std::nullopt;
    return to_fused(std::move(*r));
  }

 private:
  ShardReader inner_;
};

inline ShardReader read_shard(const fs::path& path) { return ShardReader(path); }

template <class S>
  requires RecordSource<std::remove_cvref_t<S>>
std::vector<typename std::remove_cvref_t<S>::value_type> collect(S&& source) {
  std::vector<typename std::remove_cvref_t<S>::value_type> out;
  while (auto r = source.next()) out.push_back(std::move(*r));
  return out;
}

/// Adapts an in-memory vector to a RecordSource.
template <class T>
class VectorSource {
 public:
  using value_type = T;
  explicit VectorSource(std::vector<T> items) : items_(std::move(items)) {}
  std::optional<T> next() {
    if (pos_ >= items_.size()) return std::nullopt;
    return std::move(items_[pos_++]);
  }

 private:
  std::vector<T> items_;
  std::size_t pos_ = 0;
};

enum class DedupKey { ById, ByImageRef };

inline const ImageTextRecord& base_of(const ImageTextRecord& r) { return r; }
inline const ImageTextRecord& base_of(const FusedRecord& r) { return r.base; }

/// Order-preserving deduplication; the first occurrence of a key wins.
/// Memory is O(distinct keys): the seen-set is exact, never windowed.
template <RecordSource S>
class DedupStream {
 public:
  using value_type = typename S::value_type;

  DedupStream(S source, DedupKey key) : source_(std::move(source)), key_(key) {}

  std::optional<value_type> next() {
    while (auto r = source_.next()) {
      const auto& b = base_of(*r);
      const std::string& k = key_ == DedupKey::ById ? b.id : b.image_ref;
      if (seen_.insert(k).second) return r;
      ++dropped_;
    }
    return std::nullopt;
  }

  std::size_t dropped() const noexcept { return dropped_; }

 private:
  S source_;
  DedupKey key_;
  std::unordered_set<std::string> seen_;
  std::size_t dropped_ = 0;
};

template <class S>
  requires RecordSource<std::remove_cvref_t<S>>
DedupStream<std::remove_cvref_t<S>> dedup(S&& source, DedupKey key) {
  return DedupStream<std::decay_t<S>>(std::forward<S>(source), key);
}

// ---------------------------------------------------------------------------
// Writing and manifests

struct ShardManifest {
  std::string shard_path;  // file name, relative to the manifest's directory
  std::uint64_t record_count = 0;
  std::uint64_t content_digest = 0;

  friend bool operator==(const ShardManifest&, const ShardManifest&) = default;
};

inline fs::path manifest_path_for(const fs::path& shard) {
  return fs::path(shard.string() + std::string(kManifestSuffix));
}

inline void write_manifest(const fs::path& shard, const ShardManifest& m) {
  ordered_json j;
  j["shard_path"] = m.shard_path;
  j["record_count"] = m.record_count;
  j["content_digest"] = to_hex(m.content_digest);
  const fs::path mp = manifest_path_for(shard);
  const fs::path tmp = fs::path(mp.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write manifest: " + mp.string());
    out << j.dump() << '\n';
    if (!out.flush()) throw IoError("cannot write manifest: " + mp.string());
  }
  std::error_code ec;
  fs::rename(tmp, mp, ec);
  if (ec) throw IoError("cannot publish manifest " + mp.string() + ": " + ec.message());
}

inline std::optional<ShardManifest> read_manifest(const fs::path& shard) {
  std::ifstream in(manifest_path_for(shard), std::ios::binary);
  if (!in) return std::nullopt;
  try {
    json j = json::parse(in);
    ShardManifest m;
    m.shard_path = j.at("shard_path").get<std::string>();
    m.record_count = j.at("record_count").get<std::uint64_t>();
    auto d = from_hex(j.at("content_digest").get<std::string>());
    if (!d) return std::nullopt;
    m.content_digest = *d;
    return m;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

/// Recomputes (line count, digest) of a shard's payload bytes.
inline std::pair<std::uint64_t, std::uint64_t> scan_payload(const fs::path& shard) {
  std::ifstream in(shard, std::ios::binary);
  if (!in) throw IoError("cannot open shard: " + shard.string());
  Digest64 d;
  std::uint64_t lines = 0;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    std::string_view chunk(buf, static_cast<std::size_t>(in.gcount()));
    d.update(chunk);
    for (char c : chunk) lines += c == '\n';
  }
  return {lines, d.finish()};
}

/// True when the shard has a manifest whose count and digest match the bytes on disk.
inline bool verify_manifest(const fs::path& shard) {
  auto m = read_manifest(shard);
  if (!m || !fs::exists(shard)) return false;
  auto [lines, digest] = scan_payload(shard);
  return lines == m->record_count && digest == m->content_digest;
}

/// Exclusive writer for a single shard. The manifest sidecar is published by
/// finish(), so a shard without a manifest is by definition incomplete.
class ShardWriter {
 public:
  explicit ShardWriter(fs::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) {
      std::error_code ec;
      fs::create_directories(path_.parent_path(), ec);
    }
    std::error_code ec;
    fs::remove(manifest_path_for(path_), ec);
    out_.open(path_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open shard for writing: " + path_.string());
  }

  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;

  template <class R>
  void write(const R& record) {
    const auto& id = base_of(record).id;
    if (!ids_.insert(id).second) throw DuplicateId(id);
    write_line(to_line(record));
  }

  /// Writes a pre-serialized line; callers own id uniqueness.
  void write_line(std::string_view line) {
    digest_.update(line);
    digest_.update("\n");
    out_.write(line.data(), static_cast<std::streamsize>(line.size()));
    out_.put('\n');
    if (!out_) throw IoError("write failure: " + path_.string());
    ++count_;
  }

  ShardManifest finish() {
    out_.flush();
    if (!out_) throw IoError("flush failure: " + path_.string());
    out_.close();
    ShardManifest m{path_.filename().string(), count_, digest_.finish()};
    write_manifest(path_, m);
    return m;
  }

  std::uint64_t count() const noexcept { return count_; }

 private:
  fs::path path_;
  std::ofstream out_;
  Digest64 digest_;
  std::uint64_t count_ = 0;
  std::unordered_set<std::string> ids_;
};

template <class S>
  requires RecordSource<std::remove_cvref_t<S>>
ShardManifest write_shard(S&& source, const fs::path& path) {
  ShardWriter w(path);
  while (auto r = source.next()) w.write(*r);
  return w.finish();
}

template <class R>
ShardManifest write_shard(const std::vector<R>& records, const fs::path& path) {
  ShardWriter w(path);
  for (const auto& r : records) w.write(r);
  return w.finish();
}

/// Shard files (by extension) directly inside a directory, sorted by name.
inline std::vector<fs::path> list_shards(const fs::path& dir) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    if (e.is_regular_file() && e.path().extension() == kShardExtension) out.push_back(e.path());
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace capsforge
