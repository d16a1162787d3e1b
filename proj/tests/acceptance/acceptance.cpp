// Acceptance run: one PASS/FAIL line per primary criterion. Exit status is
// non-zero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "capsforge/capsforge.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace capsforge;
using testing_support::TempDir;

namespace {

/// Collects failed expectations for one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  bool ok() const { return failed_ == 0; }
  std::size_t checks() const { return checks_; }
  std::size_t failed() const { return failed_; }
  const std::vector<std::string>& failures() const { return failures_; }

 private:
  std::size_t checks_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

struct Criterion {
  std::string name;
  double limit_s;
  std::function<void(Check&)> body;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

void prompt_fidelity(Check& c) {
  const std::string golden = testing_support::read_file(testing_support::data_dir() / "golden_prompt.txt");
  c.expect(build_prompt("B&O Railroad Museum photo Baltimore Maryland", "A man standing next to a train") == golden,
           "golden prompt differs");

  std::vector<std::string> template_lines;
  {
    std::istringstream in(golden);
    for (std::string line; std::getline(in, line);)
      if (!line.starts_with("Sentence 1: ") && !line.starts_with("Sentence 2: ")) template_lines.push_back(line);
  }
  c.expect(template_lines.size() == 5, "template should have 5 instruction lines");
  c.expect(template_lines.front() == "Please merge and refine the information from the two given sentences.",
           "first template line");
  c.expect(template_lines.back() == "Avoid simply concatenating the sentences.", "last template line");

  std::mt19937_64 rng(1);
  const std::vector<std::string> tricky = {"{raw}", "$1 \\1", "%s %d", "Sentence 2: fake", "ünï 😀", "\"q\""};
  for (int i = 0; i < 2000; ++i) {
    std::string raw = testing_support::random_sentence(rng, 1, 12) + " " + tricky[rng() % tricky.size()];
    std::string syn = testing_support::random_sentence(rng, 1, 10);
    const std::string p = build_prompt(raw, syn);
    std::vector<std::string> lines;
    std::istringstream in(p);
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    bool ok = lines.size() == 7;
    for (std::size_t k = 0; ok && k < 5; ++k) ok = lines[k] == template_lines[k];
    ok = ok && lines[5] == "Sentence 1: " + raw && lines[6] == "Sentence 2: " + syn && p.back() != '\n';
    c.expect(ok, "prompt layout for input " + std::to_string(i));
  }
}

void fusion_determinism(Check& c) {
  TempDir dir;
  std::mt19937_64 rng(2024);
  std::vector<fs::path> inputs;
  for (int s = 0; s < 4; ++s) {
    std::vector<ImageTextRecord> recs;
    for (int i = 0; i < 2500; ++i) recs.push_back(testing_support::random_record(rng, static_cast<std::size_t>(s * 2500 + i)));
    const auto path = dir / "in" / ("part-" + std::to_string(s) + ".rlc");
    write_shard(recs, path);
    inputs.push_back(path);
  }
  auto server = testing_support::MockChatServer::deterministic();

  std::vector<std::string> reference;
  for (int par : {1, 8, 64}) {
    BackendConfig cfg;
    cfg.endpoint_url = server.endpoint();
    cfg.max_in_flight = par;
    HttpChatBackend backend(cfg);
    FusionCache cache;
    const int before = server.calls();
    const auto out = dir / ("out-" + std::to_string(par));
    const auto report = fuse_corpus(inputs, out, cfg, backend, cache, false);
    c.expect(report.requested == 10000 && report.backend_succeeded == 10000 && report.failures == 0,
             "parallelism " + std::to_string(par) + ": every record fused by the backend");
    c.expect(server.calls() - before == 10000, "parallelism " + std::to_string(par) + ": one call per record");
    std::vector<std::string> bytes;
    for (const auto& in : inputs) bytes.push_back(testing_support::read_file(out / in.filename()));
    if (reference.empty()) {
      reference = bytes;
    } else {
      c.expect(bytes == reference, "parallelism " + std::to_string(par) + ": shards differ from parallelism 1");
    }
  }

  // Rerun against a cache persisted from the first pass.
  const auto cache_path = dir / "cache.jsonl";
  {
    BackendConfig cfg;
    cfg.endpoint_url = server.endpoint();
    HttpChatBackend backend(cfg);
    FusionCache cache(cache_path);
    fuse_corpus(inputs, dir / "seed-run", cfg, backend, cache, false);
  }
  BackendConfig cfg;
  cfg.endpoint_url = server.endpoint();
  cfg.max_in_flight = 8;
  HttpChatBackend backend(cfg);
  FusionCache reopened(cache_path);
  const int before = server.calls();
  const auto report = fuse_corpus(inputs, dir / "cached", cfg, backend, reopened, false);
  c.expect(server.calls() == before, "cache rerun made " + std::to_string(server.calls() - before) + " backend calls");
  c.expect(report.served_from_cache == 10000 && report.backend_calls == 0, "cache rerun served every record");
  std::vector<std::string> bytes;
  for (const auto& in : inputs) bytes.push_back(testing_support::read_file(dir / "cached" / in.filename()));
  c.expect(bytes == reference, "cache rerun shards differ");
}

void filter_efficacy(Check& c) {
  std::mt19937_64 rng(7);
  static const std::vector<std::string> refusals = {
      "I'm sorry, but I cannot merge these two sentences.", "I am sorry, I can't help with that request.",
      "As an AI language model, I cannot view images.", "I cannot combine these sentences without more context.",
      "Unable to merge the sentences as requested."};
  enum Kind { Clean, Concat, Refusal, Copy };
  std::vector<std::pair<Kind, FusedRecord>> corpus;
  for (int i = 0; i < 2000; ++i) {
    auto t = testing_support::clean_triple(rng);
    Kind k = Clean;
    if (i < 100) {
      k = Concat;
      t.fused = (i % 2 ? t.raw + " " + t.synthetic : t.synthetic + " " + t.raw);
    } else if (i < 200) {
      k = Refusal;
      t.fused = refusals[static_cast<std::size_t>(i) % refusals.size()];
    } else if (i < 240) {
      k = Copy;
      t.fused = i % 2 ? t.synthetic : t.raw;
    }
    corpus.emplace_back(k, testing_support::fused_record("r" + std::to_string(i), t));
  }
  std::shuffle(corpus.begin(), corpus.end(), rng);

  const FilterConfig cfg;
  int defects = 0, defects_rejected = 0, clean = 0, clean_rejected = 0;
  for (const auto& [kind, rec] : corpus) {
    const bool rejected = !apply_filters(rec, cfg).accepted;
    if (kind == Clean) {
      ++clean;
      clean_rejected += rejected;
    } else {
      ++defects;
      defects_rejected += rejected;
      c.expect(rejected, "defect not rejected: " + rec.fused_caption);
    }
    const auto fw = tokenize_words(rec.fused_caption);
    const double expected = std::min(oracle::containment_bruteforce(tokenize_words(rec.base.raw_caption), fw),
                                     oracle::containment_bruteforce(tokenize_words(rec.base.synthetic_caption), fw));
    const double got = detect_concatenation(rec.base.raw_caption, rec.base.synthetic_caption, rec.fused_caption,
                                            cfg.concat_containment_threshold)
                           .score;
    c.expect(std::abs(got - expected) <= 1e-9, "concatenation score mismatch for " + rec.base.id);
  }
  c.expect(defects == 240 && defects_rejected == 240,
           "defects rejected " + std::to_string(defects_rejected) + "/" + std::to_string(defects));
  c.expect(clean_rejected * 100 <= clean,
           "clean rejected " + std::to_string(clean_rejected) + "/" + std::to_string(clean) + " exceeds 1%");
}

void stats_correctness(Check& c) {
  std::mt19937_64 rng(11);
  std::vector<std::string> captions;
  for (int i = 0; i < 10000; ++i) captions.push_back(testing_support::random_sentence(rng, 0, 20));
  const auto single = caption_stats(captions);
  const auto oracle_count = oracle::distinct_trigrams_set(captions);
  c.expect(single.unique_trigrams() == oracle_count,
           "exact " + std::to_string(single.unique_trigrams()) + " vs oracle " + std::to_string(oracle_count));

  CorpusStats merged;
  for (int s = 0; s < 8; ++s) merged.merge(caption_stats(std::vector<std::string>(captions.begin() + s * 1250, captions.begin() + (s + 1) * 1250)));
  c.expect(merged == single, "8-shard merge differs from single pass");

  // 10^4 captions of 102 unique words: exactly 10^6 distinct trigrams.
  std::vector<std::string> planned;
  planned.reserve(10000);
  for (int k = 0; k < 10000; ++k) {
    std::string s;
    for (int w = 0; w < 102; ++w) s += (w ? " w" : "w") + std::to_string(k) + "x" + std::to_string(w);
    planned.push_back(std::move(s));
  }
  std::unordered_set<std::string> distinct;
  distinct.reserve(1000000);
  for (const auto& s : planned) {
    const auto w = tokenize_words(s);
    for (std::size_t i = 0; i + 3 <= w.size(); ++i) distinct.insert(w[i] + "\x1f" + w[i + 1] + "\x1f" + w[i + 2]);
  }
  c.expect(distinct.size() == 1000000, "constructed corpus has " + std::to_string(distinct.size()) + " trigrams");
  distinct = {};
  const double est = caption_stats(planned, StatsOptions{StatsMode::Sketch, 14}).unique_trigrams_estimate();
  c.expect(std::abs(est - 1e6) / 1e6 <= 0.02, "sketch estimate " + fmt("%.0f", est) + " outside 2% of 1e6");
}

void table3_ordering(Check& c) {
  const auto dir = testing_support::data_dir() / "style_samples";
  auto avg = [&](const char* name) {
    const auto lines = testing_support::read_lines(dir / name);
    return std::make_pair(lines.size(), *caption_stats(lines).avg_length());
  };
  const auto [nf, fused] = avg("fused.txt");
  const auto [nw, rewrite] = avg("rewrite.txt");
  const auto [nr, raw] = avg("raw.txt");
  const auto [ns, synthetic] = avg("synthetic.txt");
  c.expect(nf == 200 && nw == 200 && nr == 200 && ns == 200, "each style sample should hold 200 captions");
  c.expect(fused > rewrite && rewrite > raw && raw > synthetic,
           "ordering fused " + fmt("%.2f", fused) + " rewrite " + fmt("%.2f", rewrite) + " raw " + fmt("%.2f", raw) +
               " synthetic " + fmt("%.2f", synthetic));
}

void cider_equivalence(Check& c) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    cider::References refs;
    cider::Candidates cands;
    const int images = 3 + static_cast<int>(rng() % 8);
    for (int i = 0; i < images; ++i) {
      const std::string id = "im" + std::to_string(i);
      const int nr = 1 + static_cast<int>(rng() % 5);
      for (int r = 0; r < nr; ++r) refs[id].push_back(testing_support::random_sentence(rng, 1, 14));
      cands[id] = testing_support::random_sentence(rng, 0, 14);
    }
    oracle::NaiveCider naive;
    for (const auto& [id, rs] : refs) naive.refs[id] = rs;
    const auto score = cider::cider_d(cands, refs);
    double sum = 0;
    for (const auto& [id, cand] : cands) {
      const double expected = naive.score(id, cand);
      sum += expected;
      c.expect(std::abs(score.per_image.at(id) - expected) <= 1e-9, "trial " + std::to_string(trial) + " image " + id);
    }
    c.expect(std::abs(score.corpus_mean - sum / images) <= 1e-9, "corpus mean, trial " + std::to_string(trial));
  }
  const cider::References refs{{"a", {"a man standing next to a train"}}, {"b", {"a dog in a field"}}};
  const auto idx = cider::build_tfidf_index(refs);
  c.expect(cider::cider_d_single("", refs.at("a"), idx) == 0.0, "empty candidate");
  c.expect(cider::cider_d_single("purple elephants juggling", refs.at("a"), idx) == 0.0, "zero overlap");
  c.expect(cider::detail::length_penalty(12, 6, cider::kSigma) == std::exp(-0.5), "penalty at 6");
  c.expect(cider::detail::length_penalty(6, 6, cider::kSigma) == 1.0, "penalty at 0");
}

void triplet_export(Check& c) {
  std::mt19937_64 rng(5);
  std::vector<CaptionTriplet> ts;
  for (int i = 0; i < 1000; ++i) {
    const auto t = testing_support::clean_triple(rng);
    ts.push_back({t.raw, t.synthetic, t.fused, "t-" + std::to_string(i)});
  }
  TempDir a, b;
  const auto r1 = export_triplets(ts, a.path(), 0.1, 42);
  const auto r2 = export_triplets(ts, b.path(), 0.1, 42);
  c.expect(r1.train_count == 900 && r1.val_count == 100, "split counts");
  c.expect(testing_support::read_file(r1.train_path) == testing_support::read_file(r2.train_path) &&
               testing_support::read_file(r1.val_path) == testing_support::read_file(r2.val_path),
           "split not byte-identical across runs");

  std::set<std::string> train_ids, val_ids;
  for (const auto& [path, ids] : {std::pair{r1.train_path, &train_ids}, std::pair{r1.val_path, &val_ids}}) {
    const auto lines = testing_support::read_lines(path);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto j = json::parse(lines[i]);
      ids->insert(j.at("source_id").get<std::string>());
      const auto content = j.at("messages").at(0).at("content").get<std::string>();
      c.expect(content == build_prompt(j.at("inputs").at("raw").get<std::string>(),
                                       j.at("inputs").at("synthetic").get<std::string>()),
               "user message differs from build_prompt");
    }
  }
  for (const auto& id : val_ids) c.expect(!train_ids.contains(id), "id in both splits: " + id);
  c.expect(train_ids.size() + val_ids.size() == 1000, "splits do not cover the input");

  emit_training_config(a / "training_config.txt");
  const auto kv = parse_key_values(a / "training_config.txt");
  const std::vector<std::pair<std::string, std::string>> table8 = {
      {"model_init", "LLaMA-2-13B"}, {"batch_size", "128"},   {"epochs", "2"},         {"peak_lr", "1e-5"},
      {"end_lr", "0"},               {"warmup_steps", "500"}, {"scheduler", "cosine"}, {"optimizer", "AdamW"},
      {"betas", "(0.9,0.95)"},       {"eps", "1e-8"},         {"weight_decay", "0.0"}};
  c.expect(kv == table8, "training config differs from the refiner settings");
}

eval::Choice judge(const json& payload, std::uint64_t salt) {
  const auto h = digest64(payload.at("item_id").get<std::string>(), salt) % 4;
  if (h == 0) return eval::Choice::SimilarQuality;
  if (h == 1) return eval::Choice::NearlyIdentical;
  const bool left_mentions_a = payload.at("left").get<std::string>().starts_with("A:");
  return (h == 2) == left_mentions_a ? eval::Choice::LeftWin : eval::Choice::RightWin;
}

void eval_tally(Check& c) {
  TempDir dir;
  fs::copy_file(testing_support::data_dir() / "human_eval_judgments.jsonl", dir / "human_eval.jsonl");
  {
    eval::EvalService svc(dir / "human_eval.jsonl");
    const auto t = svc.tally("s-human-eval");
    c.expect(t.a_win == 20 && t.b_win == 15 && t.similar == 46 && t.identical == 19 && t.total() == 100,
             "bundled log tally " + eval::to_json(t).dump());
  }

  std::mt19937_64 rng(3);
  std::vector<FusedRecord> a, b;
  for (int i = 0; i < 300; ++i) {
    auto r = testing_support::fused_record("val-" + std::to_string(i), testing_support::clean_triple(rng));
    auto ra = r, rb = r;
    ra.fused_caption = "A: " + r.fused_caption;
    rb.fused_caption = "B: " + r.fused_caption;
    a.push_back(ra);
    b.push_back(rb);
  }
  int mirrored = 0;
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) {
    const auto s = eval::create_session(a, b, 100, seed);
    const auto m = eval::create_session(b, a, 100, eval::mirror_seed(seed));
    std::vector<eval::JudgmentRecord> js, jm;
    bool same_payloads = s.items.size() == m.items.size();
    for (std::size_t i = 0; same_payloads && i < s.items.size(); ++i) {
      const auto ps = eval::item_payload(s.items[i]);
      same_payloads = ps == eval::item_payload(m.items[i]) && !ps.contains("left_is_a");
      js.push_back({s.items[i].item_id, judge(ps, seed), "sim", 0});
      jm.push_back({m.items[i].item_id, judge(eval::item_payload(m.items[i]), seed), "sim", 0});
    }
    const auto ts = eval::tally(s, js), tm = eval::tally(m, jm);
    const bool ok = same_payloads && ts.a_win == tm.b_win && ts.b_win == tm.a_win && ts.similar == tm.similar &&
                    ts.identical == tm.identical && ts.total() == 100;
    mirrored += ok;
    c.expect(ok, "mirror property fails for seed " + std::to_string(seed));
  }
  c.expect(mirrored == 1000, "mirrored sessions " + std::to_string(mirrored) + "/1000");

  // Headless API pass with a scripted client.
  eval::EvalService svc(dir / "api.jsonl");
  httplib::Server server;
  eval::install_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);
  json oa = json::array(), ob = json::array();
  for (const auto& r : a) oa.push_back(json::parse(to_line(r)));
  for (const auto& r : b) ob.push_back(json::parse(to_line(r)));
  auto created = cli.Post("/sessions", json{{"outputs_a", oa}, {"outputs_b", ob}, {"sample_n", 100}, {"seed", 7}}.dump(),
                          "application/json");
  c.expect(created && created->status == 201, "POST /sessions");
  if (created && created->status == 201) {
    const std::string sid = json::parse(created->body).at("session_id");
    int judged = 0;
    for (int guard = 0; guard < 200; ++guard) {
      auto next = cli.Get("/sessions/" + sid + "/next?annotator=api");
      if (!next || next->status != 200) break;
      const auto body = json::parse(next->body);
      if (body.at("done")) break;
      c.expect(next->body.find("left_is_a") == std::string::npos, "side assignment leaked to client");
      const auto& item = body.at("item");
      auto r = cli.Post("/sessions/" + sid + "/judgments",
                        json{{"item_id", item.at("item_id")}, {"choice", std::string(eval::to_string(judge(item, 7)))},
                             {"annotator", "api"}}.dump(),
                        "application/json");
      judged += r && r->status == 201;
    }
    auto tally = cli.Get("/sessions/" + sid + "/tally");
    c.expect(judged == 100 && tally && tally->status == 200 && json::parse(tally->body).at("total") == 100,
             "API session did not reach 100 judgments");
  }
  server.stop();
  th.join();
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"Prompt fidelity", 1, prompt_fidelity},
      {"Fusion determinism", 120, fusion_determinism},
      {"Filter efficacy", 60, filter_efficacy},
      {"Stats correctness", 120, stats_correctness},
      {"Caption length ordering", 10, table3_ordering},
      {"CIDEr oracle equivalence", 60, cider_equivalence},
      {"Triplet export", 10, triplet_export},
      {"Eval tally reproduction", 60, eval_tally},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.body(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    check.expect(secs <= cr.limit_s, "took " + fmt("%.2f", secs) + " s, limit " + fmt("%.0f", cr.limit_s) + " s");
    const bool ok = check.ok();
    failed += !ok;
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << cr.name << " (" << fmt("%.2f", secs) << " s, limit "
              << fmt("%.0f", cr.limit_s) << " s, " << check.checks() << " checks";
    if (!ok) std::cout << ", " << check.failed() << " failed";
    std::cout << ")\n";
    for (const auto& f : check.failures()) std::cout << "       " << f << '\n';
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
