#pragma once

#include <fnmatch.h>

#include <atomic>
#include <csignal>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "capsforge/cider_metric.hpp"
#include "capsforge/corpus_io.hpp"
#include "capsforge/corpus_stats.hpp"
#include "capsforge/eval_service.hpp"
#include "capsforge/fusion_engine.hpp"
#include "capsforge/quality_filter.hpp"
#include "capsforge/triplet_export.hpp"

namespace capsforge::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kPartial = 2 };

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Pipeline configuration

/// File-level configuration. Precedence: built-in defaults < config file < flags.
struct PipelineConfig {
  std::vector<std::string> input_glob;
  std::string output_dir;
  BackendConfig backend;
  FilterConfig filter;
  StatsOptions stats;
  std::uint64_t seed = 0;
  std::int64_t backoff_base_ms = 1000;
};

namespace detail {

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key `" + key + "` has the wrong type");
  }
}

inline void apply_backend(const json& j, BackendConfig& b, std::int64_t& backoff_base_ms) {
  if (!j.is_object()) throw ConfigError("config key `backend` must be an object");
  for (const auto& [k, v] : j.items()) {
    const std::string key = "backend." + k;
    if (k == "endpoint_url") b.endpoint_url = get_as<std::string>(v, key);
    else if (k == "model_name") b.model_name = get_as<std::string>(v, key);
    else if (k == "api_key_env") b.api_key_env = get_as<std::string>(v, key);
    else if (k == "max_in_flight") b.max_in_flight = get_as<int>(v, key);
    else if (k == "timeout_ms") b.timeout_ms = get_as<int>(v, key);
    else if (k == "temperature") b.temperature = get_as<double>(v, key);
    else if (k == "max_retries") b.max_retries = get_as<int>(v, key);
    else if (k == "backoff_base_ms") backoff_base_ms = get_as<std::int64_t>(v, key);
    else throw ConfigError("unknown config key: " + key);
  }
}

inline void apply_stats(const json& j, StatsOptions& s) {
  if (!j.is_object()) throw ConfigError("config key `stats` must be an object");
  for (const auto& [k, v] : j.items()) {
    const std::string key = "stats." + k;
    if (k == "mode") {
      const auto m = get_as<std::string>(v, key);
      if (m == "exact") s.mode = StatsMode::Exact;
      else if (m == "sketch") s.mode = StatsMode::Sketch;
      else throw ConfigError("stats.mode must be exact or sketch");
    } else if (k == "precision") {
      s.precision = get_as<int>(v, key);
    } else if (k == "seed") {
      s.seed = get_as<std::uint64_t>(v, key);
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
}

}  // namespace detail

inline PipelineConfig pipeline_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  PipelineConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "input_glob") {
      if (v.is_string()) c.input_glob = {v.get<std::string>()};
      else c.input_glob = detail::get_as<std::vector<std::string>>(v, k);
    } else if (k == "output_dir") {
      c.output_dir = detail::get_as<std::string>(v, k);
    } else if (k == "backend") {
      detail::apply_backend(v, c.backend, c.backoff_base_ms);
    } else if (k == "filter") {
      try {
        c.filter = filter_config_from_json(v);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("filter config: ") + e.what());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    } else if (k == "stats") {
      detail::apply_stats(v, c.stats);
    } else if (k == "seed") {
      c.seed = detail::get_as<std::uint64_t>(v, k);
    } else {
      throw ConfigError("unknown config key: " + k);
    }
  }
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
  return j;
}

/// Loads a config file. A filter-only object (as accepted by `filter --config`)
/// is treated as the `filter` section of a pipeline config.
inline PipelineConfig load_config(const std::string& path) {
  json j = read_json_file(path);
  static const std::set<std::string> filter_keys = {"concat_containment_threshold", "min_words", "max_words",
                                                    "copy_similarity_threshold"};
  bool filter_only = j.is_object() && !j.empty();
  if (filter_only) {
    for (const auto& [k, v] : j.items()) filter_only = filter_only && filter_keys.contains(k);
  }
  if (filter_only) j = json{{"filter", j}};
  return pipeline_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Input resolution

/// Expands each argument: a directory yields its shards, a pattern with
/// wildcards is matched against file names in its directory, anything else is
/// taken as a file path. The result is sorted and de-duplicated.
inline std::vector<fs::path> resolve_inputs(const std::vector<std::string>& specs) {
  std::set<fs::path> out;
  for (const auto& spec : specs) {
    const fs::path p(spec);
    if (fs::is_directory(p)) {
      for (auto& s : list_shards(p)) out.insert(s);
    } else if (spec.find_first_of("*?[") != std::string::npos) {
      const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
      const std::string pattern = p.filename().string();
      std::error_code ec;
      for (const auto& e : fs::directory_iterator(dir, ec)) {
        if (e.is_regular_file() && ::fnmatch(pattern.c_str(), e.path().filename().c_str(), 0) == 0) out.insert(e.path());
      }
    } else {
      if (!fs::exists(p)) throw IoError("input not found: " + spec);
      out.insert(p);
    }
  }
  return {out.begin(), out.end()};
}

// ---------------------------------------------------------------------------
// Subcommand bodies

struct IngestArgs {
  std::vector<std::string> inputs;
  std::string output_dir;
  std::size_t shard_size = 100000;
  std::string dedup = "id";
  std::string prefix = "shard";
};

/// Reads loosely validated record lines, drops malformed ones, deduplicates
/// and re-shards into canonical `.rlc` shards with manifests.
inline int run_ingest(const IngestArgs& a, std::ostream& out, std::ostream& err) {
  const auto inputs = resolve_inputs(a.inputs);
  std::optional<DedupKey> key;
  if (a.dedup == "id") key = DedupKey::ById;
  else if (a.dedup == "image_ref") key = DedupKey::ByImageRef;
  if (a.shard_size == 0) throw ConfigError("--shard-size must be positive");

  std::unordered_set<std::string> seen;
  std::uint64_t read = 0, malformed = 0, duplicates = 0, written = 0;
  std::size_t shard_index = 0;
  std::unique_ptr<ShardWriter> writer;
  json manifests = json::array();
  auto close = [&] {
    if (!writer) return;
    auto m = writer->finish();
    manifests.push_back(json{{"shard_path", m.shard_path}, {"record_count", m.record_count},
                             {"content_digest", to_hex(m.content_digest)}});
    writer.reset();
  };

  for (const auto& in : inputs) {
    std::ifstream f(in, std::ios::binary);
    if (!f) throw IoError("cannot open " + in.string());
    std::string line;
    std::size_t line_no = 0;
    std::uint64_t offset = 0;
    while (std::getline(f, line)) {
      ++line_no;
      const auto line_offset = offset;
      offset += line.size() + 1;
      if (trim(line).empty()) continue;
      ++read;
      ImageTextRecord r;
      try {
        r = parse_record_line(line, line_no, line_offset);
      } catch (const MalformedLine& e) {
        ++malformed;
        err << in.string() << ": " << e.what() << '\n';
        continue;
      }
      if (key) {
        const std::string& k = *key == DedupKey::ById ? r.id : r.image_ref;
        if (!seen.insert(k).second) {
          ++duplicates;
          continue;
        }
      }
      if (!writer) {
        std::ostringstream name;
        name << a.prefix << '-' << std::setw(5) << std::setfill('0') << shard_index++ << kShardExtension;
        writer = std::make_unique<ShardWriter>(fs::path(a.output_dir) / name.str());
      }
      try {
        writer->write(r);
      } catch (const DuplicateId&) {
        ++duplicates;  // only reachable with --dedup none
        continue;
      }
      ++written;
      if (writer->count() >= a.shard_size) close();
    }
  }
  close();
  out << json{{"command", "ingest"}, {"read", read}, {"written", written}, {"malformed", malformed},
              {"duplicates", duplicates}, {"shards", manifests}}.dump()
      << '\n';
  return malformed > 0 ? kPartial : kOk;
}

struct FuseArgs {
  PipelineConfig cfg;
  std::string cache_path;
  bool resume = false;
};

inline int run_fuse(const FuseArgs& a, std::ostream& out, std::ostream&) {
  a.cfg.backend.validate();
  if (a.cfg.output_dir.empty()) throw ConfigError("--output-dir is required");
  const auto inputs = resolve_inputs(a.cfg.input_glob);
  const fs::path out_dir(a.cfg.output_dir);
  FusionCache cache(a.cache_path.empty() ? out_dir / "fusion_cache.jsonl" : fs::path(a.cache_path));
  HttpChatBackend backend(a.cfg.backend);
  FuseOptions opts;
  opts.backoff.base = std::chrono::milliseconds(a.cfg.backoff_base_ms);
  const RunReport report = fuse_corpus(inputs, out_dir, a.cfg.backend, backend, cache, a.resume, opts);
  json j = report.to_json();
  j["command"] = "fuse";
  {
    std::ofstream rf(out_dir / "run_report.json", std::ios::binary | std::ios::trunc);
    rf << j.dump() << '\n';
  }
  out << j.dump() << '\n';
  return report.failures > 0 ? kPartial : kOk;
}

inline int run_filter(const PipelineConfig& cfg, std::ostream& out, std::ostream&) {
  if (cfg.output_dir.empty()) throw ConfigError("--output-dir is required");
  try {
    cfg.filter.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const auto inputs = resolve_inputs(cfg.input_glob);
  const auto run = filter_corpus(inputs, cfg.output_dir, cfg.filter);
  json j = run.report.to_json();
  j["command"] = "filter";
  {
    std::ofstream rf(fs::path(cfg.output_dir) / "filter_report", std::ios::binary | std::ios::trunc);
    rf << j.dump() << '\n';
    if (!rf) throw IoError("cannot write filter_report");
  }
  out << j.dump() << '\n';
  return kOk;
}

inline int run_stats(const PipelineConfig& cfg, const std::string& field, std::ostream& out, std::ostream&) {
  if (field != "raw" && field != "synthetic" && field != "fused") throw ConfigError("--field must be raw, synthetic or fused");
  const auto inputs = resolve_inputs(cfg.input_glob);
  CorpusStats total(cfg.stats);
  for (const auto& path : inputs) {
    CorpusStats shard(cfg.stats);
    FusedShardReader reader(path);
    while (auto r = reader.next()) {
      if (field == "raw") shard.add_caption(r->base.raw_caption);
      else if (field == "synthetic") shard.add_caption(r->base.synthetic_caption);
      else if (r->status == FusionStatus::Fused) shard.add_caption(r->fused_caption);
    }
    total.merge(shard);
  }
  json j = total.to_json();
  j["field"] = field;
  out << j.dump() << '\n';
  return kOk;
}

namespace detail {

inline std::string caption_of(const json& j, const std::string& field) {
  for (const char* k : {field.c_str(), "caption", "fused_caption"}) {
    if (auto it = j.find(k); it != j.end() && it->is_string()) return it->get<std::string>();
  }
  throw std::invalid_argument("line has no caption field");
}

template <class Fn>
void for_each_json_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("id") || !j["id"].is_string())
      throw MalformedLine(line_no, 0, "expected an object with a text `id`");
    fn(j);
  }
}

}  // namespace detail

/// Candidates: one line per image with `id` and a caption field. References:
/// one line per reference caption (ids repeat), or a `captions` array.
inline int run_score_cider(const std::string& cand_path, const std::string& ref_path, const std::string& field,
                           std::ostream& out, std::ostream&) {
  cider::Candidates cands;
  detail::for_each_json_line(cand_path, [&](const json& j) { cands[j["id"].get<std::string>()] = detail::caption_of(j, field); });
  cider::References refs;
  detail::for_each_json_line(ref_path, [&](const json& j) {
    auto& v = refs[j["id"].get<std::string>()];
    if (auto it = j.find("captions"); it != j.end() && it->is_array()) {
      for (const auto& c : *it) v.push_back(c.get<std::string>());
    } else {
      v.push_back(detail::caption_of(j, field));
    }
  });
  const auto score = cider::cider_d(cands, refs);
  for (const auto& [id, s] : score.per_image) out << json{{"id", id}, {"cider_d", s}}.dump() << '\n';
  out << json{{"command", "score-cider"}, {"images", score.per_image.size()}, {"corpus_mean", score.corpus_mean},
              {"corpus_mean_x100", score.display()}}.dump()
      << '\n';
  return kOk;
}

inline int run_export(const PipelineConfig& cfg, double val_fraction, std::ostream& out, std::ostream&) {
  if (cfg.output_dir.empty()) throw ConfigError("--output-dir is required");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("--val-fraction must lie in [0, 1)");
  const auto inputs = resolve_inputs(cfg.input_glob);
  const auto res = export_triplets(inputs, cfg.output_dir, val_fraction, cfg.seed);
  const fs::path config_path = fs::path(cfg.output_dir) / "training_config.txt";
  emit_training_config(config_path);
  out << json{{"command", "export-triplets"}, {"train_path", res.train_path.string()},
              {"val_path", res.val_path.string()}, {"train_count", res.train_count},
              {"val_count", res.val_count}, {"skipped", res.skipped},
              {"training_config", config_path.string()}}.dump()
      << '\n';
  return kOk;
}

inline std::vector<FusedRecord> read_fused(const std::vector<std::string>& specs) {
  std::vector<FusedRecord> out;
  for (const auto& p : resolve_inputs(specs)) {
    auto recs = collect(FusedShardReader(p));
    out.insert(out.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  return out;
}

inline std::atomic<httplib::Server*>& active_server() {
  static std::atomic<httplib::Server*> s{nullptr};
  return s;
}

inline int run_eval_serve(const std::string& log, const std::string& host, int port, const std::string& ui_dir,
                          std::ostream& out) {
  eval::EvalService svc(log);
  httplib::Server server;
  eval::install_routes(server, svc, ui_dir.empty() ? std::nullopt : std::optional<fs::path>(ui_dir));
  active_server() = &server;
  auto stop = [](int) {
    if (auto* s = active_server().load()) s->stop();
  };
  std::signal(SIGINT, stop);
  std::signal(SIGTERM, stop);
  out << json{{"command", "eval serve"}, {"host", host}, {"port", port}, {"log", log}}.dump() << std::endl;
  const bool ok = server.listen(host, port);
  active_server() = nullptr;
  return ok ? kOk : kUsage;
}

// ---------------------------------------------------------------------------
// Entry point

/// Runs one CLI invocation. 0 = success, 1 = usage/config/fatal error,
/// 2 = finished with partial failures (reports are still written).
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"capsforge: caption-fusion corpus refinery"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "capsforge 0.1.0");

  // Shared per-subcommand option sets; flag values land in these and win over the config file.
  std::string config_path;
  std::vector<std::string> inputs;
  std::string output_dir;

  auto* ingest = app.add_subcommand("ingest", "Validate, deduplicate and shard source records");
  IngestArgs ingest_args;
  ingest->add_option("-i,--input", ingest_args.inputs, "Input files, directories or globs")->required();
  ingest->add_option("-o,--output-dir", ingest_args.output_dir, "Output shard directory")->required();
  ingest->add_option("--shard-size", ingest_args.shard_size, "Records per output shard");
  ingest->add_option("--dedup", ingest_args.dedup, "Dedup key")->check(CLI::IsMember({"id", "image_ref", "none"}));
  ingest->add_option("--prefix", ingest_args.prefix, "Output shard name prefix");

  auto* fuse = app.add_subcommand("fuse", "Fuse raw and synthetic captions through a chat-completion backend");
  std::string endpoint, model, api_key_env, cache_path;
  int max_in_flight = 0, timeout_ms = 0, max_retries = -1;
  double temperature = -1.0;
  std::int64_t backoff_ms = -1;
  bool resume = false;
  fuse->add_option("--config", config_path, "Pipeline config file (JSON)");
  fuse->add_option("-i,--input", inputs, "Input shards, directories or globs");
  fuse->add_option("-o,--output-dir", output_dir, "Output directory");
  fuse->add_option("--endpoint", endpoint, "Chat-completion endpoint URL");
  fuse->add_option("--model", model, "Model name sent to the backend");
  fuse->add_option("--api-key-env", api_key_env, "Environment variable holding the bearer token");
  fuse->add_option("--max-in-flight", max_in_flight, "Concurrent backend requests");
  fuse->add_option("--timeout-ms", timeout_ms, "Per-request timeout");
  fuse->add_option("--max-retries", max_retries, "Retries per record");
  fuse->add_option("--temperature", temperature, "Sampling temperature");
  fuse->add_option("--backoff-base-ms", backoff_ms, "First retry delay");
  fuse->add_option("--cache", cache_path, "Fusion cache log (default <output-dir>/fusion_cache.jsonl)");
  fuse->add_flag("--resume", resume, "Skip output shards whose manifest verifies");

  auto* filter = app.add_subcommand("filter", "Apply the heuristic quality rules to fused shards");
  filter->add_option("--config", config_path, "Filter or pipeline config file (JSON)");
  filter->add_option("-i,--input", inputs, "Fused shards, directories or globs");
  filter->add_option("-o,--output-dir", output_dir, "Retained shard directory");

  auto* stats = app.add_subcommand("stats", "Unique trigrams and average caption length");
  std::string mode, field = "fused";
  int precision = 0;
  stats->add_option("--config", config_path, "Pipeline config file (JSON)");
  stats->add_option("-i,--input", inputs, "Shards, directories or globs");
  stats->add_option("--mode", mode, "exact or sketch")->check(CLI::IsMember({"exact", "sketch"}));
  stats->add_option("--precision", precision, "Sketch precision p (2^p registers)");
  stats->add_option("--field", field, "Caption field")->check(CLI::IsMember({"raw", "synthetic", "fused"}));

  auto* score = app.add_subcommand("score-cider", "CIDEr-D of candidate captions against references");
  std::string cand_path, ref_path, caption_field = "caption";
  score->add_option("--candidates", cand_path, "Candidate captions (one line per image)")->required();
  score->add_option("--references", ref_path, "Reference captions")->required();
  score->add_option("--field", caption_field, "Caption key in both files");

  auto* exp = app.add_subcommand("export-triplets", "Export (raw, synthetic, fused) finetuning data");
  double val_fraction = 0.01;
  std::optional<std::uint64_t> seed;
  exp->add_option("--config", config_path, "Pipeline config file (JSON)");
  exp->add_option("-i,--input", inputs, "Filtered fused shards");
  exp->add_option("-o,--output-dir", output_dir, "Export directory");
  exp->add_option("--val-fraction", val_fraction, "Validation fraction in [0, 1)");
  exp->add_option("--seed", seed, "Split seed");

  auto* ev = app.add_subcommand("eval", "Blinded pairwise human evaluation");
  ev->require_subcommand(1);
  std::string log_path = "eval_log.jsonl", host = "127.0.0.1", ui_dir, session_id;
  int port = 8080;
  auto* serve = ev->add_subcommand("serve", "Serve the evaluation API");
  serve->add_option("--port", port, "Listen port");
  serve->add_option("--host", host, "Listen address");
  serve->add_option("--log", log_path, "Judgment log file");
  serve->add_option("--ui-dir", ui_dir, "Static annotator UI assets");
  auto* report = ev->add_subcommand("report", "Print the tally of a session");
  report->add_option("session", session_id, "Session id")->required();
  report->add_option("--log", log_path, "Judgment log file");
  auto* create = ev->add_subcommand("create", "Create a session from two systems' fused shards");
  std::vector<std::string> a_inputs, b_inputs;
  std::string a_name = "A", b_name = "B";
  std::size_t sample_n = 100;
  create->add_option("--a", a_inputs, "System A fused shards")->required();
  create->add_option("--b", b_inputs, "System B fused shards")->required();
  create->add_option("--a-name", a_name, "System A display name");
  create->add_option("--b-name", b_name, "System B display name");
  create->add_option("--sample-n", sample_n, "Items to sample");
  create->add_option("--seed", seed, "Sampling and side-assignment seed");
  create->add_option("--log", log_path, "Judgment log file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << app.help();
    return kUsage;
  }

  try {
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
    if (!inputs.empty()) cfg.input_glob = inputs;
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (!endpoint.empty()) cfg.backend.endpoint_url = endpoint;
    if (!model.empty()) cfg.backend.model_name = model;
    if (!api_key_env.empty()) cfg.backend.api_key_env = api_key_env;
    if (max_in_flight != 0) cfg.backend.max_in_flight = max_in_flight;
    if (timeout_ms != 0) cfg.backend.timeout_ms = timeout_ms;
    if (max_retries >= 0) cfg.backend.max_retries = max_retries;
    if (temperature >= 0.0) cfg.backend.temperature = temperature;
    if (backoff_ms >= 0) cfg.backoff_base_ms = backoff_ms;
    if (!mode.empty()) cfg.stats.mode = mode == "exact" ? StatsMode::Exact : StatsMode::Sketch;
    if (precision != 0) cfg.stats.precision = precision;
    if (seed) cfg.seed = *seed;

    auto need_inputs = [&] {
      if (cfg.input_glob.empty()) throw ConfigError("--input is required");
    };

    if (ingest->parsed()) return run_ingest(ingest_args, out, err);
    if (fuse->parsed()) {
      need_inputs();
      try {
        cfg.backend.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
      return run_fuse(FuseArgs{cfg, cache_path, resume}, out, err);
    }
    if (filter->parsed()) {
      need_inputs();
      return run_filter(cfg, out, err);
    }
    if (stats->parsed()) {
      need_inputs();
      if (cfg.stats.mode == StatsMode::Sketch && (cfg.stats.precision < 10 || cfg.stats.precision > 18))
        throw ConfigError("--precision must lie in [10, 18]");
      return run_stats(cfg, field, out, err);
    }
    if (score->parsed()) return run_score_cider(cand_path, ref_path, caption_field, out, err);
    if (exp->parsed()) {
      need_inputs();
      return run_export(cfg, val_fraction, out, err);
    }
    if (serve->parsed()) return run_eval_serve(log_path, host, port, ui_dir, out);
    if (report->parsed()) {
      eval::EvalService svc(log_path);
      const auto s = svc.session(session_id);
      json j = eval::to_json(svc.tally(session_id));
      j["command"] = "eval report";
      j["session_id"] = session_id;
      j["system_a_name"] = s.system_a_name;
      j["system_b_name"] = s.system_b_name;
      j["items"] = s.items.size();
      out << j.dump() << '\n';
      return kOk;
    }
    if (create->parsed()) {
      eval::EvalService svc(log_path);
      const auto& s = svc.create_session(read_fused(a_inputs), read_fused(b_inputs), sample_n, cfg.seed, a_name, b_name);
      out << json{{"command", "eval create"}, {"session_id", s.session_id}, {"items", s.items.size()}}.dump() << '\n';
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  err << app.help();
  return kUsage;
}

}  // namespace capsforge::cli
