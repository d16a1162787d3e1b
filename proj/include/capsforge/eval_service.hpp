#pragma once

#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "capsforge/corpus_io.hpp"
#include "capsforge/hash.hpp"

namespace capsforge::eval {

// ---------------------------------------------------------------------------
// Errors

class UnknownSession : public std::runtime_error {
 public:
  explicit UnknownSession(const std::string& id) : std::runtime_error("unknown session: " + id) {}
};

class UnknownItem : public std::runtime_error {
 public:
  explicit UnknownItem(const std::string& id) : std::runtime_error("unknown item: " + id) {}
};

class DuplicateJudgment : public std::runtime_error {
 public:
  DuplicateJudgment(const std::string& item, const std::string& annotator)
      : std::runtime_error("item " + item + " already judged by " + annotator) {}
};

class CoverageGap : public std::runtime_error {
 public:
  explicit CoverageGap(std::string id)
      : std::runtime_error("system B has no output for " + id), id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

// ---------------------------------------------------------------------------
// Domain types

enum class Choice { LeftWin, RightWin, SimilarQuality, NearlyIdentical };

inline std::string_view to_string(Choice c) noexcept {
  switch (c) {
    case Choice::LeftWin: return "LeftWin";
    case Choice::RightWin: return "RightWin";
    case Choice::SimilarQuality: return "SimilarQuality";
    case Choice::NearlyIdentical: return "NearlyIdentical";
  }
  return "SimilarQuality";
}

inline std::optional<Choice> parse_choice(std::string_view s) noexcept {
  if (s == "LeftWin") return Choice::LeftWin;
  if (s == "RightWin") return Choice::RightWin;
  if (s == "SimilarQuality") return Choice::SimilarQuality;
  if (s == "NearlyIdentical") return Choice::NearlyIdentical;
  return std::nullopt;
}

struct EvalItem {
  std::string item_id;
  std::string image_ref;
  std::string raw;
  std::string synthetic;
  std::string left;
  std::string right;
  bool left_is_a = true;  // never sent to annotators

  friend bool operator==(const EvalItem&, const EvalItem&) = default;
};

struct EvalSession {
  std::string session_id;
  std::vector<EvalItem> items;
  std::uint64_t seed = 0;
  std::string system_a_name = "A";
  std::string system_b_name = "B";

  friend bool operator==(const EvalSession&, const EvalSession&) = default;
};

struct JudgmentRecord {
  std::string item_id;
  Choice choice = Choice::SimilarQuality;
  std::string annotator;
  std::int64_t timestamp = 0;  // unix milliseconds
};

struct EvalSummary {
  std::uint64_t a_win = 0;
  std::uint64_t b_win = 0;
  std::uint64_t similar = 0;
  std::uint64_t identical = 0;

  std::uint64_t total() const noexcept { return a_win + b_win + similar + identical; }
  friend bool operator==(const EvalSummary&, const EvalSummary&) = default;
};

// ---------------------------------------------------------------------------
// Session creation

/// The top seed bit flips every side assignment without changing which items
/// are sampled, so (A, B, s) and (B, A, mirror_seed(s)) show annotators the
/// very same left/right texts.
inline constexpr std::uint64_t kMirrorBit = std::uint64_t{1} << 63;

inline constexpr std::uint64_t mirror_seed(std::uint64_t seed) noexcept { return seed ^ kMirrorBit; }

namespace detail {

// splitmix64; fixed algorithm so sessions are identical across standard libraries.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  std::uint64_t below(std::uint64_t bound) noexcept {
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t threshold = (0 - bound) % bound;
    while (true) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % bound;
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace detail

/// Samples sample_n of system A's fused records (by seed) and pairs each with
/// system B's output for the same id, randomizing which side A is shown on.
inline EvalSession create_session(const std::vector<FusedRecord>& outputs_a, const std::vector<FusedRecord>& outputs_b,
                                  std::size_t sample_n, std::uint64_t seed, std::string system_a_name = "A",
                                  std::string system_b_name = "B") {
  std::map<std::string, const FusedRecord*> a_by_id;
  for (const auto& r : outputs_a) {
    if (r.status == FusionStatus::Fused) a_by_id.emplace(r.base.id, &r);
  }
  std::unordered_map<std::string, const FusedRecord*> b_by_id;
  for (const auto& r : outputs_b) {
    if (r.status == FusionStatus::Fused) b_by_id.emplace(r.base.id, &r);
  }
  if (sample_n > a_by_id.size()) {
    throw std::invalid_argument("requested " + std::to_string(sample_n) + " items but system A has " +
                                std::to_string(a_by_id.size()) + " fused outputs");
  }

  std::vector<const FusedRecord*> pool;
  pool.reserve(a_by_id.size());
  for (const auto& [id, r] : a_by_id) pool.push_back(r);

  detail::SeededRng rng(seed & ~kMirrorBit);
  const bool mirrored = (seed & kMirrorBit) != 0;
  // Partial Fisher-Yates: the first sample_n slots become the sample.
  for (std::size_t i = 0; i < sample_n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }

  EvalSession s;
  s.seed = seed;
  s.system_a_name = std::move(system_a_name);
  s.system_b_name = std::move(system_b_name);
  Digest64 sid(seed);
  sid.update(s.system_a_name);
  sid.update("\x1f");
  sid.update(s.system_b_name);
  for (std::size_t i = 0; i < sample_n; ++i) {
    const FusedRecord& a = *pool[i];
    auto it = b_by_id.find(a.base.id);
    if (it == b_by_id.end()) throw CoverageGap(a.base.id);
    const FusedRecord& b = *it->second;
    EvalItem item;
    item.item_id = a.base.id;
    item.image_ref = a.base.image_ref;
    item.raw = a.base.raw_caption;
    item.synthetic = a.base.synthetic_caption;
    item.left_is_a = ((rng.next() >> 63) != 0) != mirrored;
    item.left = item.left_is_a ? a.fused_caption : b.fused_caption;
    item.right = item.left_is_a ? b.fused_caption : a.fused_caption;
    sid.update("\x1f");
    sid.update(item.item_id);
    s.items.push_back(std::move(item));
  }
  s.session_id = "s-" + to_hex(sid.finish());
  return s;
}

/// Unblinds judgments through each item's side assignment.
inline EvalSummary tally(const EvalSession& session, const std::vector<JudgmentRecord>& judgments) {
  std::unordered_map<std::string, bool> left_is_a;
  for (const auto& it : session.items) left_is_a.emplace(it.item_id, it.left_is_a);
  EvalSummary sum;
  for (const auto& j : judgments) {
    auto it = left_is_a.find(j.item_id);
    if (it == left_is_a.end()) continue;
    switch (j.choice) {
      case Choice::LeftWin: ++(it->second ? sum.a_win : sum.b_win); break;
      case Choice::RightWin: ++(it->second ? sum.b_win : sum.a_win); break;
      case Choice::SimilarQuality: ++sum.similar; break;
      case Choice::NearlyIdentical: ++sum.identical; break;
    }
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Serialization

inline json to_json(const EvalSession& s) {
  json items = json::array();
  for (const auto& it : s.items) {
    items.push_back(json{{"item_id", it.item_id},
                         {"image_ref", it.image_ref},
                         {"raw", it.raw},
                         {"synthetic", it.synthetic},
                         {"left", it.left},
                         {"right", it.right},
                         {"left_is_a", it.left_is_a}});
  }
  return json{{"session_id", s.session_id},
              {"seed", s.seed},
              {"system_a_name", s.system_a_name},
              {"system_b_name", s.system_b_name},
              {"items", std::move(items)}};
}

inline EvalSession session_from_json(const json& j) {
  EvalSession s;
  s.session_id = j.at("session_id").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.system_a_name = j.at("system_a_name").get<std::string>();
  s.system_b_name = j.at("system_b_name").get<std::string>();
  std::set<std::string> ids;
  for (const auto& ji : j.at("items")) {
    EvalItem it;
    it.item_id = ji.at("item_id").get<std::string>();
    it.image_ref = ji.value("image_ref", "");
    it.raw = ji.at("raw").get<std::string>();
    it.synthetic = ji.at("synthetic").get<std::string>();
    it.left = ji.at("left").get<std::string>();
    it.right = ji.at("right").get<std::string>();
    it.left_is_a = ji.at("left_is_a").get<bool>();
    if (!ids.insert(it.item_id).second) throw std::invalid_argument("duplicate item id " + it.item_id);
    s.items.push_back(std::move(it));
  }
  return s;
}

/// What an annotator receives for one item. The side assignment is absent by construction.
inline json item_payload(const EvalItem& it) {
  json j{{"item_id", it.item_id}, {"raw", it.raw}, {"synthetic", it.synthetic}, {"left", it.left}, {"right", it.right}};
  if (!it.image_ref.empty()) j["image_ref"] = it.image_ref;
  return j;
}

inline json to_json(const EvalSummary& s) {
  return json{{"a_win", s.a_win}, {"b_win", s.b_win}, {"similar", s.similar}, {"identical", s.identical},
              {"total", s.total()}};
}

// ---------------------------------------------------------------------------
// Durable store

/// Session state backed by an append-only event log. Every mutation is
/// appended and fsync'd before it becomes visible; startup replays the log.
/// Mutations are serialized, reads run concurrently.
class EvalService {
 public:
  explicit EvalService(fs::path log_path) : log_path_(std::move(log_path)) {
    if (log_path_.has_parent_path()) fs::create_directories(log_path_.parent_path());
    replay();
    log_ = std::fopen(log_path_.c_str(), "ab");
    if (!log_) throw IoError("cannot open eval log: " + log_path_.string());
  }

  ~EvalService() {
    if (log_) std::fclose(log_);
  }

  EvalService(const EvalService&) = delete;
  EvalService& operator=(const EvalService&) = delete;

  /// Registers a session. Re-registering an identical session is a no-op.
  const EvalSession& add_session(EvalSession session) {
    std::unique_lock lk(mu_);
    if (auto it = sessions_.find(session.session_id); it != sessions_.end()) {
      if (it->second.session == session) return it->second.session;
      throw std::invalid_argument("session id already in use: " + session.session_id);
    }
    append(json{{"type", "session"}, {"session", to_json(session)}});
    return install(std::move(session));
  }

  const EvalSession& create_session(const std::vector<FusedRecord>& a, const std::vector<FusedRecord>& b,
                                    std::size_t sample_n, std::uint64_t seed, std::string a_name = "A",
                                    std::string b_name = "B") {
    return add_session(eval::create_session(a, b, sample_n, seed, std::move(a_name), std::move(b_name)));
  }

  /// Lowest-index item this annotator has not judged, or nullopt when done.
  std::optional<EvalItem> next_item(const std::string& session_id, const std::string& annotator) const {
    std::shared_lock lk(mu_);
    const auto& st = state(session_id);
    auto judged = st.judged.find(annotator);
    for (const auto& it : st.session.items) {
      if (judged == st.judged.end() || !judged->second.contains(it.item_id)) return it;
    }
    return std::nullopt;
  }

  std::pair<std::size_t, std::size_t> progress(const std::string& session_id, const std::string& annotator) const {
    std::shared_lock lk(mu_);
    const auto& st = state(session_id);
    auto judged = st.judged.find(annotator);
    return {judged == st.judged.end() ? 0 : judged->second.size(), st.session.items.size()};
  }

  /// Persists the judgment, then acknowledges by returning.
  JudgmentRecord submit_judgment(const std::string& session_id, const std::string& item_id, Choice choice,
                                 const std::string& annotator) {
    std::unique_lock lk(mu_);
    auto& st = state(session_id);
    if (!st.item_ids.contains(item_id)) throw UnknownItem(item_id);
    if (st.judged[annotator].contains(item_id)) throw DuplicateJudgment(item_id, annotator);
    JudgmentRecord j{item_id, choice, annotator,
                     std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count()};
    append(json{{"type", "judgment"},
                {"session_id", session_id},
                {"item_id", j.item_id},
                {"choice", std::string(to_string(j.choice))},
                {"annotator", j.annotator},
                {"timestamp", j.timestamp}});
    st.judged[annotator].insert(item_id);
    st.judgments.push_back(j);
    return j;
  }

  EvalSummary tally(const std::string& session_id) const {
    std::shared_lock lk(mu_);
    const auto& st = state(session_id);
    return eval::tally(st.session, st.judgments);
  }

  std::vector<JudgmentRecord> judgments(const std::string& session_id) const {
    std::shared_lock lk(mu_);
    return state(session_id).judgments;
  }

  EvalSession session(const std::string& session_id) const {
    std::shared_lock lk(mu_);
    return state(session_id).session;
  }

  std::vector<std::string> session_ids() const {
    std::shared_lock lk(mu_);
    std::vector<std::string> out;
    for (const auto& [id, st] : sessions_) out.push_back(id);
    return out;
  }

  const fs::path& log_path() const noexcept { return log_path_; }

 private:
  struct SessionState {
    EvalSession session;
    std::set<std::string> item_ids;
    std::unordered_map<std::string, std::set<std::string>> judged;  // annotator → item ids
    std::vector<JudgmentRecord> judgments;
  };

  const SessionState& state(const std::string& id) const {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw UnknownSession(id);
    return it->second;
  }
  SessionState& state(const std::string& id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw UnknownSession(id);
    return it->second;
  }

  const EvalSession& install(EvalSession session) {
    SessionState st;
    for (const auto& it : session.items) st.item_ids.insert(it.item_id);
    st.session = std::move(session);
    const std::string id = st.session.session_id;
    return sessions_.insert_or_assign(id, std::move(st)).first->second.session;
  }

  void append(const json& event) {
    const std::string line = event.dump() + "\n";
    if (std::fwrite(line.data(), 1, line.size(), log_) != line.size() || std::fflush(log_) != 0 ||
        ::fsync(::fileno(log_)) != 0) {
      throw IoError("eval log append failed: " + log_path_.string());
    }
  }

  void replay() {
    std::ifstream in(log_path_, std::ios::binary);
    if (!in) return;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      json ev = json::parse(line, nullptr, false);
      if (ev.is_discarded()) {
        // A torn final line is what a crash mid-append leaves behind.
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw MalformedLine(line_no, 0, "eval log event is not valid JSON");
      }
      const std::string type = ev.value("type", "");
      if (type == "session") {
        install(session_from_json(ev.at("session")));
      } else if (type == "judgment") {
        auto& st = state(ev.at("session_id").get<std::string>());
        auto choice = parse_choice(ev.at("choice").get<std::string>());
        if (!choice) throw MalformedLine(line_no, 0, "unknown choice");
        JudgmentRecord j{ev.at("item_id").get<std::string>(), *choice, ev.at("annotator").get<std::string>(),
                         ev.value("timestamp", std::int64_t{0})};
        if (!st.item_ids.contains(j.item_id)) throw MalformedLine(line_no, 0, "judgment for unknown item");
        if (!st.judged[j.annotator].insert(j.item_id).second) continue;
        st.judgments.push_back(std::move(j));
      } else {
        throw MalformedLine(line_no, 0, "unknown eval log event type: " + type);
      }
    }
  }

  fs::path log_path_;
  std::FILE* log_ = nullptr;
  mutable std::shared_mutex mu_;
  std::map<std::string, SessionState> sessions_;
};

// ---------------------------------------------------------------------------
// HTTP surface

namespace detail {

inline void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void reply_error(httplib::Response& res, int status, std::string_view kind, std::string_view message) {
  reply_json(res, status, json{{"error", kind}, {"message", message}});
}

inline std::vector<FusedRecord> outputs_from(const json& body, const std::string& system) {
  std::vector<FusedRecord> out;
  if (auto it = body.find("outputs_" + system); it != body.end()) {
    for (const auto& r : *it) out.push_back(to_fused(parse_record_line(r.dump())));
  }
  if (auto it = body.find("shards_" + system); it != body.end()) {
    for (const auto& p : *it) {
      FusedShardReader reader(p.get<std::string>());
      while (auto r = reader.next()) out.push_back(std::move(*r));
    }
  }
  return out;
}

const char* const kPlaceholderPage =
    "<!doctype html><html><head><title>capsforge eval</title></head><body>"
    "<p>Annotator UI assets are not installed. Start the server with --ui-dir.</p></body></html>";

}  // namespace detail

/// Registers the evaluation API on `server`. When ui_dir is given its files
/// are served at "/".
inline void install_routes(httplib::Server& server, EvalService& svc, std::optional<fs::path> ui_dir = std::nullopt) {
  using detail::reply_error;
  using detail::reply_json;

  server.Post("/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) return reply_error(res, 400, "BadRequest", "body must be a JSON object");
    try {
      auto a = detail::outputs_from(body, "a");
      auto b = detail::outputs_from(body, "b");
      const auto n = body.value("sample_n", std::size_t{100});
      const auto seed = body.value("seed", std::uint64_t{0});
      const auto& s = svc.create_session(a, b, n, seed, body.value("system_a_name", "A"),
                                         body.value("system_b_name", "B"));
      reply_json(res, 201, json{{"session_id", s.session_id}, {"items", s.items.size()}});
    } catch (const CoverageGap& e) {
      reply_error(res, 422, "CoverageGap", e.what());
    } catch (const std::exception& e) {
      reply_error(res, 400, "BadRequest", e.what());
    }
  });

  server.Get(R"(/sessions/([^/]+)/next)", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string sid = req.matches[1];
    const std::string annotator = req.has_param("annotator") ? req.get_param_value("annotator") : "default";
    try {
      auto item = svc.next_item(sid, annotator);
      auto [judged, total] = svc.progress(sid, annotator);
      json body{{"done", !item.has_value()}, {"progress", json{{"judged", judged}, {"total", total}}}};
      if (item) body["item"] = item_payload(*item);
      reply_json(res, 200, body);
    } catch (const UnknownSession& e) {
      reply_error(res, 404, "UnknownSession", e.what());
    }
  });

  server.Post(R"(/sessions/([^/]+)/judgments)", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string sid = req.matches[1];
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("item_id") || !body["item_id"].is_string() ||
        !body.contains("choice") || !body["choice"].is_string()) {
      return reply_error(res, 400, "BadRequest", "expected {item_id, choice, annotator}");
    }
    auto choice = parse_choice(body["choice"].get<std::string>());
    if (!choice) return reply_error(res, 400, "BadRequest", "unknown choice");
    try {
      svc.submit_judgment(sid, body["item_id"].get<std::string>(), *choice, body.value("annotator", "default"));
      reply_json(res, 201, json{{"ok", true}});
    } catch (const UnknownSession& e) {
      reply_error(res, 404, "UnknownSession", e.what());
    } catch (const UnknownItem& e) {
      reply_error(res, 404, "UnknownItem", e.what());
    } catch (const DuplicateJudgment& e) {
      reply_error(res, 409, "DuplicateJudgment", e.what());
    } catch (const IoError& e) {
      reply_error(res, 500, "IoError", e.what());
    }
  });

  server.Get(R"(/sessions/([^/]+)/tally)", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string sid = req.matches[1];
    try {
      const auto s = svc.session(sid);
      json body = to_json(svc.tally(sid));
      body["system_a_name"] = s.system_a_name;
      body["system_b_name"] = s.system_b_name;
      body["items"] = s.items.size();
      reply_json(res, 200, body);
    } catch (const UnknownSession& e) {
      reply_error(res, 404, "UnknownSession", e.what());
    }
  });

  if (ui_dir && fs::is_directory(*ui_dir)) {
    server.set_mount_point("/", ui_dir->string());
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(detail::kPlaceholderPage, "text/html");
    });
  }
}

}  // namespace capsforge::eval
