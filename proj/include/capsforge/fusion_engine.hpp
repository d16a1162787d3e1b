#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "capsforge/corpus_io.hpp"
#include "capsforge/hash.hpp"
#include "capsforge/text.hpp"

namespace capsforge {

// ---------------------------------------------------------------------------
// Prompt

/// Cache keys include this tag; bump it whenever build_prompt output changes.
inline constexpr std::string_view kPromptVersion = "capsfusion-v1";

class EmptyCaption : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Renders the caption-fusion instruction. Lines are joined with '\n' and the
/// captions are substituted literally (no escaping, no trimming).
inline std::string build_prompt(std::string_view raw_caption, std::string_view synthetic_caption) {
  if (is_blank(raw_caption)) throw EmptyCaption("raw caption is empty");
  if (is_blank(synthetic_caption)) throw EmptyCaption("synthetic caption is empty");
  std::string p;
  p.reserve(560 + raw_caption.size() + synthetic_caption.size());
  p += "Please merge and refine the information from the two given sentences.\n";
  p += "Sentence 1 provides detailed real-world knowledge, yet it suffers from flaws in sentence "
       "structure and grammar.\n";
  p += "Sentence 2 exhibits nice sentence structure, but lacking in-depth real-world details and "
       "may contain false information.\n";
  p += "Please combine them into a new sentence, ensuring a well-structured sentence while "
       "retaining the detailed real-world information provided in Sentence 1.\n";
  p += "Avoid simply concatenating the sentences.\n";
  p += "Sentence 1: ";
  p += raw_caption;
  p += "\nSentence 2: ";
  p += synthetic_caption;
  return p;
}

// ---------------------------------------------------------------------------
// Response cleaning

namespace detail {

inline bool strip_wrapping_quotes(std::string& s) {
  static constexpr std::pair<std::string_view, std::string_view> kPairs[] = {
      {"\"", "\""}, {"'", "'"}, {"`", "`"}, {"“", "”"}, {"‘", "’"},
  };
  for (auto [open, close] : kPairs) {
    if (s.size() >= open.size() + close.size() && s.starts_with(open) && s.ends_with(close)) {
      s = s.substr(open.size(), s.size() - open.size() - close.size());
      return true;
    }
  }
  return false;
}

inline bool strip_label(std::string& s) {
  static constexpr std::string_view kLabels[] = {"new sentence:", "merged sentence:", "sentence:"};
  for (auto label : kLabels) {
    if (iequals_prefix(s, label)) {
      s = s.substr(label.size());
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// Normalizes a backend reply to a bare caption. Rules are applied until none
/// fires, which makes the function idempotent.
inline std::string clean_response(std::string_view backend_text) {
  std::string s = collapse_whitespace(backend_text);
  bool changed = true;
  while (changed) {
    changed = detail::strip_wrapping_quotes(s);
    changed = detail::strip_label(s) || changed;
    if (changed) s = collapse_whitespace(s);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Backend

struct BackendConfig {
  std::string endpoint_url = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model_name = "gpt-3.5-turbo";
  std::string api_key_env = "OPENAI_API_KEY";
  int max_in_flight = 8;
  int timeout_ms = 60000;
  double temperature = 0.0;
  int max_retries = 5;

  void validate() const {
    if (max_in_flight < 1) throw std::invalid_argument("max_in_flight must be >= 1");
    if (timeout_ms < 1000) throw std::invalid_argument("timeout_ms must be >= 1000");
    if (!(temperature >= 0.0 && temperature <= 2.0))
      throw std::invalid_argument("temperature must lie in [0, 2]");
    if (max_retries < 0) throw std::invalid_argument("max_retries must be >= 0");
    if (model_name.empty()) throw std::invalid_argument("model_name is empty");
  }
};

struct BackoffPolicy {
  std::chrono::milliseconds base{1000};
  double factor = 2.0;
  double jitter = 0.2;
  std::chrono::milliseconds cap{60000};

  /// Delay before retry number `retry` (0-based), jittered uniformly by ±jitter.
  template <class Rng>
  std::chrono::milliseconds delay(int retry, Rng& rng) const {
    double d = static_cast<double>(base.count());
    for (int i = 0; i < retry; ++i) d *= factor;
    d = std::min(d, static_cast<double>(cap.count()));
    std::uniform_real_distribution<double> u(1.0 - jitter, 1.0 + jitter);
    d = std::min(d * u(rng), static_cast<double>(cap.count()));
    return std::chrono::milliseconds(static_cast<std::int64_t>(d));
  }
};

/// One backend exchange. status is the HTTP status, or 0 when the request
/// never produced one (connection failure, timeout).
struct BackendReply {
  int status = 0;
  std::string content;
  std::string error;

  bool ok() const noexcept { return status >= 200 && status < 300; }
  bool retryable() const noexcept { return status == 0 || status == 408 || status == 429 || status >= 500; }
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual BackendReply complete(const std::string& prompt) = 0;
};

inline json make_chat_request(const BackendConfig& cfg, const std::string& prompt) {
  return json{{"model", cfg.model_name},
              {"temperature", cfg.temperature},
              {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})}};
}

/// Extracts choices[0].message.content from a chat-completion response body.
inline std::optional<std::string> parse_chat_response(std::string_view body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array() || choices->empty()) return std::nullopt;
  const json& first = (*choices)[0];
  auto msg = first.find("message");
  if (msg == first.end() || !msg->is_object()) return std::nullopt;
  auto content = msg->find("content");
  if (content == msg->end() || !content->is_string()) return std::nullopt;
  return content->get<std::string>();
}

struct ParsedEndpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline ParsedEndpoint parse_endpoint(std::string_view url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) throw std::invalid_argument("endpoint needs a scheme: " + std::string(url));
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string_view::npos) return {std::string(url), "/"};
  return {std::string(url.substr(0, path_start)), std::string(url.substr(path_start))};
}

/// Chat-completion client over HTTP(S). Holds a small pool of connections so
/// concurrent callers each get their own keep-alive client.
class HttpChatBackend final : public ChatBackend {
 public:
  explicit HttpChatBackend(BackendConfig cfg) : cfg_(std::move(cfg)), endpoint_(parse_endpoint(cfg_.endpoint_url)) {
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) bearer_ = key;
  }

  BackendReply complete(const std::string& prompt) override {
    auto client = acquire();
    const std::string body = make_chat_request(cfg_, prompt).dump();
    httplib::Headers headers;
    if (!bearer_.empty()) headers.emplace("Authorization", "Bearer " + bearer_);
    auto res = client->Post(endpoint_.path, headers, body, "application/json");
    BackendReply reply;
    if (!res) {
      reply.error = httplib::to_string(res.error());
      release(std::move(client), false);
      return reply;
    }
    reply.status = res->status;
    if (reply.ok()) {
      if (auto content = parse_chat_response(res->body)) {
        reply.content = std::move(*content);
      } else {
        reply.status = 502;
        reply.error = "unparseable chat-completion response";
      }
    } else {
      reply.error = "HTTP " + std::to_string(res->status);
    }
    release(std::move(client), true);
    return reply;
  }

 private:
  std::unique_ptr<httplib::Client> acquire() {
    {
      std::lock_guard lk(mu_);
      if (!idle_.empty()) {
        auto c = std::move(idle_.back());
        idle_.pop_back();
        return c;
      }
    }
    auto c = std::make_unique<httplib::Client>(endpoint_.origin);
    const auto t = std::chrono::milliseconds(cfg_.timeout_ms);
    c->set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(t).count(), 0);
    c->set_read_timeout(t);
    c->set_write_timeout(t);
    c->set_keep_alive(true);
    c->set_tcp_nodelay(true);
    return c;
  }

  void release(std::unique_ptr<httplib::Client> c, bool healthy) {
    if (!healthy) return;
    std::lock_guard lk(mu_);
    idle_.push_back(std::move(c));
  }

  BackendConfig cfg_;
  ParsedEndpoint endpoint_;
  std::string bearer_;
  std::mutex mu_;
  std::vector<std::unique_ptr<httplib::Client>> idle_;
};

// ---------------------------------------------------------------------------
// Cache

inline std::uint64_t fusion_cache_key(std::string_view raw, std::string_view synthetic,
                                      std::string_view model_name,
                                      std::string_view prompt_version = kPromptVersion) {
  Digest64 d;
  d.update(raw);
  d.update("\x1f");
  d.update(synthetic);
  d.update("\x1f");
  d.update(model_name);
  d.update("\x1f");
  d.update(prompt_version);
  return d.finish();
}

struct FusionCacheEntry {
  std::uint64_t key = 0;
  std::string fused_caption;
  std::int64_t created_at = 0;  // unix seconds
};

/// Append-only key→caption log with an in-memory index. Reads run
/// concurrently; appends are serialized. The first value stored for a key is
/// the one every later lookup returns. A torn trailing line (crash during
/// append) is ignored on load.
class FusionCache {
 public:
  FusionCache() = default;  // memory only

  explicit FusionCache(fs::path log_path) : path_(std::move(log_path)) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    load();
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw IoError("cannot open cache log: " + path_.string());
  }

  std::optional<std::string> get(std::uint64_t key) const {
    std::shared_lock lk(mu_);
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second.fused_caption;
  }

  void put(std::uint64_t key, const std::string& fused) {
    std::unique_lock lk(mu_);
    if (index_.contains(key)) return;
    FusionCacheEntry e{key, fused,
                       std::chrono::duration_cast<std::chrono::seconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count()};
    if (out_.is_open()) {
      json j{{"key", to_hex(key)}, {"fused_caption", fused}, {"created_at", e.created_at}};
      out_ << j.dump() << '\n';
      out_.flush();
      if (!out_) throw IoError("cache append failed: " + path_.string());
    }
    index_.emplace(key, std::move(e));
  }

  std::size_t size() const {
    std::shared_lock lk(mu_);
    return index_.size();
  }

 private:
  void load() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object()) continue;
      auto key = j.contains("key") && j["key"].is_string() ? from_hex(j["key"].get<std::string>()) : std::nullopt;
      if (!key || !j.contains("fused_caption") || !j["fused_caption"].is_string()) continue;
      FusionCacheEntry e{*key, j["fused_caption"].get<std::string>(), j.value("created_at", std::int64_t{0})};
      index_.emplace(*key, std::move(e));
    }
  }

  fs::path path_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::uint64_t, FusionCacheEntry> index_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Fusion of one record

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

struct FuseOptions {
  BackoffPolicy backoff;
  Sleeper sleep = real_sleep;
};

struct FuseOutcome {
  FusedRecord record;
  bool from_cache = false;
  int attempts = 0;  // backend calls made for this record
  std::string last_error;
};

/// Fuses one record: cache lookup, then up to max_retries+1 backend attempts
/// with exponential backoff. Backend failures end in status BackendError; a
/// reply that cleans to nothing ends in status Filtered. Never throws for
/// backend-side problems.
inline FuseOutcome fuse_record(const ImageTextRecord& record, const BackendConfig& cfg, ChatBackend& backend,
                               FusionCache& cache, const FuseOptions& opts = {}) {
  FuseOutcome out;
  out.record.base = record;
  out.record.backend_model = cfg.model_name;
  const auto key = fusion_cache_key(record.raw_caption, record.synthetic_caption, cfg.model_name);
  if (auto hit = cache.get(key)) {
    out.from_cache = true;
    out.record.fused_caption = std::move(*hit);
    out.record.status = FusionStatus::Fused;
    return out;
  }

  std::string prompt;
  try {
    prompt = build_prompt(record.raw_caption, record.synthetic_caption);
  } catch (const EmptyCaption& e) {
    out.record.status = FusionStatus::BackendError;
    out.last_error = e.what();
    return out;
  }

  std::mt19937_64 jitter_rng(key);
  const auto start = std::chrono::steady_clock::now();
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    if (attempt > 0) opts.sleep(opts.backoff.delay(attempt - 1, jitter_rng));
    BackendReply reply;
    try {
      reply = backend.complete(prompt);
    } catch (const std::exception& e) {
      reply.status = 0;
      reply.error = e.what();
    }
    ++out.attempts;
    if (reply.ok()) {
      out.record.latency_ms = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count());
      out.record.fused_caption = clean_response(reply.content);
      if (out.record.fused_caption.empty()) {
        out.record.status = FusionStatus::Filtered;
      } else {
        out.record.status = FusionStatus::Fused;
        cache.put(key, out.record.fused_caption);
      }
      return out;
    }
    out.last_error = reply.error.empty() ? "HTTP " + std::to_string(reply.status) : reply.error;
    if (!reply.retryable()) break;
  }
  out.record.status = FusionStatus::BackendError;
  out.record.fused_caption.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Corpus orchestration

struct RunReport {
  std::uint64_t requested = 0;
  std::uint64_t served_from_cache = 0;
  std::uint64_t backend_calls = 0;      // every HTTP attempt, retries included
  std::uint64_t backend_succeeded = 0;  // records answered by the backend
  std::uint64_t failures = 0;
  std::uint64_t empty_responses = 0;    // subset of backend_succeeded, status Filtered
  std::uint64_t shards_written = 0;
  std::uint64_t shards_skipped = 0;
  std::uint64_t records_skipped = 0;
  double wall_clock_s = 0.0;

  bool conserved() const noexcept { return requested == served_from_cache + backend_succeeded + failures; }

  json to_json() const {
    return json{{"requested", requested},
                {"served_from_cache", served_from_cache},
                {"backend_calls", backend_calls},
                {"backend_succeeded", backend_succeeded},
                {"failures", failures},
                {"empty_responses", empty_responses},
                {"shards_written", shards_written},
                {"shards_skipped", shards_skipped},
                {"records_skipped", records_skipped},
                {"wall_clock_s", wall_clock_s}};
  }
};

namespace detail {

/// Fixed set of workers fusing records concurrently; results are handed back
/// in submission order through a bounded reorder window.
class FusionPool {
 public:
  FusionPool(const BackendConfig& cfg, ChatBackend& backend, FusionCache& cache, const FuseOptions& opts)
      : cfg_(cfg), backend_(backend), cache_(cache), opts_(opts),
        window_(4 * static_cast<std::size_t>(cfg.max_in_flight)) {
    for (int i = 0; i < cfg.max_in_flight; ++i) workers_.emplace_back([this] { work(); });
  }

  ~FusionPool() {
    {
      std::lock_guard lk(mu_);
      stopping_ = true;
    }
    task_cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  /// Fuses every record of `source` and passes outcomes to `sink` in input order.
  template <RecordSource S, class Sink>
  void run(S& source, Sink&& sink) {
    std::uint64_t submitted = 0;
    std::uint64_t delivered = 0;
    auto drain_ready = [&](std::unique_lock<std::mutex>& lk) {
      while (true) {
        auto it = done_.find(delivered);
        if (it == done_.end()) return;
        FuseOutcome o = std::move(it->second);
        done_.erase(it);
        ++delivered;
        lk.unlock();
        sink(std::move(o));
        lk.lock();
      }
    };
    while (auto rec = source.next()) {
      std::unique_lock lk(mu_);
      while (submitted - delivered >= window_) {
        drain_ready(lk);
        if (submitted - delivered < window_) break;
        done_cv_.wait(lk);
      }
      tasks_.push_back({submitted++, std::move(*rec)});
      lk.unlock();
      task_cv_.notify_one();
    }
    std::unique_lock lk(mu_);
    while (delivered < submitted) {
      drain_ready(lk);
      if (delivered < submitted) done_cv_.wait(lk);
    }
  }

 private:
  struct Task {
    std::uint64_t seq;
    ImageTextRecord record;
  };

  void work() {
    while (true) {
      Task task;
      {
        std::unique_lock lk(mu_);
        task_cv_.wait(lk, [&] { return stopping_ || !tasks_.empty(); });
        if (tasks_.empty()) return;
        task = std::move(tasks_.front());
        tasks_.pop_front();
      }
      FuseOutcome o;
      try {
        o = fuse_record(task.record, cfg_, backend_, cache_, opts_);
      } catch (const std::exception& e) {
        o.record.base = std::move(task.record);
        o.record.backend_model = cfg_.model_name;
        o.record.status = FusionStatus::BackendError;
        o.last_error = e.what();
      }
      {
        std::lock_guard lk(mu_);
        done_.emplace(task.seq, std::move(o));
      }
      done_cv_.notify_all();
    }
  }

  const BackendConfig& cfg_;
  ChatBackend& backend_;
  FusionCache& cache_;
  const FuseOptions& opts_;
  std::size_t window_;

  std::mutex mu_;
  std::condition_variable task_cv_;
  std::condition_variable done_cv_;
  std::deque<Task> tasks_;
  std::map<std::uint64_t, FuseOutcome> done_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

}  // namespace detail

/// Fuses every input shard into a same-named shard under output_dir. Output
/// order equals input order whatever max_in_flight is. With resume, an output
/// shard whose manifest verifies against its bytes is skipped. Throws IoError
/// only for unreadable inputs or unwritable outputs.
inline RunReport fuse_corpus(const std::vector<fs::path>& input_shards, const fs::path& output_dir,
                             const BackendConfig& cfg, ChatBackend& backend, FusionCache& cache, bool resume,
                             const FuseOptions& opts = {}) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  std::error_code ec;
  fs::create_directories(output_dir, ec);
  if (ec) throw IoError("cannot create output dir " + output_dir.string() + ": " + ec.message());

  RunReport report;
  detail::FusionPool pool(cfg, backend, cache, opts);
  for (const auto& in : input_shards) {
    const fs::path out = output_dir / in.filename();
    if (resume && verify_manifest(out)) {
      ++report.shards_skipped;
      report.records_skipped += read_manifest(out)->record_count;
      continue;
    }
    ShardReader reader(in);
    ShardWriter writer(out);
    pool.run(reader, [&](FuseOutcome o) {
      ++report.requested;
      report.backend_calls += static_cast<std::uint64_t>(o.attempts);
      if (o.from_cache) {
        ++report.served_from_cache;
      } else if (o.record.status == FusionStatus::BackendError) {
        ++report.failures;
      } else {
        ++report.backend_succeeded;
        if (o.record.status == FusionStatus::Filtered) ++report.empty_responses;
      }
      writer.write(o.record);
    });
    writer.finish();
    ++report.shards_written;
  }
  report.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace capsforge
