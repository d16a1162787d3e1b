#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "capsforge/eval_service.hpp"
#include "test_support.hpp"

using namespace capsforge;
using namespace capsforge::eval;
using testing_support::TempDir;

namespace {

// Two systems with outputs for the same ids, distinguishable by prefix.
std::pair<std::vector<FusedRecord>, std::vector<FusedRecord>> two_systems(int n, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<FusedRecord> a, b;
  for (int i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "val-%04d", i);
    auto r = testing_support::fused_record(id, testing_support::clean_triple(rng));
    auto ra = r, rb = r;
    ra.fused_caption = "A says " + r.fused_caption;
    rb.fused_caption = "B says " + r.fused_caption;
    a.push_back(ra);
    b.push_back(rb);
  }
  return {a, b};
}

// Annotator that judges only from what it is shown: prefers whichever side
// came from system A in a fixed 20/15/46/19 pattern keyed on item text.
Choice simulated_judgment(const json& payload) {
  const auto h = digest64(payload.at("item_id").get<std::string>(), 99) % 100;
  if (h < 46) return Choice::SimilarQuality;
  if (h < 65) return Choice::NearlyIdentical;
  const bool left_is_a_shown = payload.at("left").get<std::string>().starts_with("A says");
  const bool prefer_a = h < 85;
  return (prefer_a == left_is_a_shown) ? Choice::LeftWin : Choice::RightWin;
}

}  // namespace

TEST(CreateSession, DeterministicAndSized) {
  auto [a, b] = two_systems(500);
  const auto s1 = create_session(a, b, 100, 42);
  const auto s2 = create_session(a, b, 100, 42);
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(s1.items.size(), 100u);
  std::set<std::string> ids;
  for (const auto& it : s1.items) {
    ids.insert(it.item_id);
    const std::string& shown_a = it.left_is_a ? it.left : it.right;
    const std::string& shown_b = it.left_is_a ? it.right : it.left;
    EXPECT_TRUE(shown_a.starts_with("A says"));
    EXPECT_TRUE(shown_b.starts_with("B says"));
  }
  EXPECT_EQ(ids.size(), 100u);
  EXPECT_NE(create_session(a, b, 100, 43), s1);
}

TEST(CreateSession, SideAssignmentIsBalanced) {
  auto [a, b] = two_systems(100);
  std::uint64_t left_a = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    for (const auto& it : create_session(a, b, 100, seed).items) {
      left_a += it.left_is_a;
      ++total;
    }
  }
  const double frac = static_cast<double>(left_a) / static_cast<double>(total);
  EXPECT_GE(frac, 0.45);
  EXPECT_LE(frac, 0.55);
}

TEST(CreateSession, CoverageGap) {
  auto [a, b] = two_systems(50);
  b.erase(b.begin() + 10);
  try {
    create_session(a, b, 50, 1);
    FAIL() << "expected CoverageGap";
  } catch (const CoverageGap& e) {
    EXPECT_EQ(e.id(), "val-0010");
  }
  EXPECT_THROW(create_session(a, b, 51, 1), std::invalid_argument);
}

TEST(CreateSession, JsonRoundTrip) {
  auto [a, b] = two_systems(30);
  const auto s = create_session(a, b, 10, 5, "ChatGPT", "CapsFus-LLaMA");
  EXPECT_EQ(session_from_json(json::parse(to_json(s).dump())), s);
}

TEST(ItemPayload, HidesSideAssignment) {
  auto [a, b] = two_systems(20);
  for (const auto& it : create_session(a, b, 20, 3).items) {
    const auto p = item_payload(it);
    EXPECT_FALSE(p.contains("left_is_a"));
    for (const auto& [k, v] : p.items()) {
      EXPECT_TRUE(k == "item_id" || k == "raw" || k == "synthetic" || k == "left" || k == "right" || k == "image_ref")
          << k;
    }
  }
}

TEST(EvalServiceTest, NextItemWalksInOrderThenDone) {
  TempDir dir;
  auto [a, b] = two_systems(10);
  EvalService svc(dir / "log.jsonl");
  const auto& s = svc.create_session(a, b, 3, 1);
  const std::string sid = s.session_id;
  const auto items = s.items;
  for (std::size_t i = 0; i < 3; ++i) {
    auto next = svc.next_item(sid, "ann");
    ASSERT_TRUE(next);
    EXPECT_EQ(next->item_id, items[i].item_id);
    svc.submit_judgment(sid, next->item_id, Choice::SimilarQuality, "ann");
  }
  EXPECT_FALSE(svc.next_item(sid, "ann"));
  EXPECT_EQ(svc.next_item(sid, "other")->item_id, items[0].item_id);
  EXPECT_THROW(svc.next_item("s-missing", "ann"), UnknownSession);
}

TEST(EvalServiceTest, JudgmentErrors) {
  TempDir dir;
  auto [a, b] = two_systems(10);
  EvalService svc(dir / "log.jsonl");
  const std::string sid = svc.create_session(a, b, 5, 1).session_id;
  const auto first = svc.next_item(sid, "ann")->item_id;
  svc.submit_judgment(sid, first, Choice::LeftWin, "ann");
  EXPECT_THROW(svc.submit_judgment(sid, first, Choice::RightWin, "ann"), DuplicateJudgment);
  EXPECT_NO_THROW(svc.submit_judgment(sid, first, Choice::RightWin, "ann-2"));
  EXPECT_THROW(svc.submit_judgment(sid, "val-9999", Choice::LeftWin, "ann"), UnknownItem);
  EXPECT_THROW(svc.submit_judgment("s-nope", first, Choice::LeftWin, "ann"), UnknownSession);
}

TEST(EvalServiceTest, ZeroJudgmentsTallyToZero) {
  TempDir dir;
  auto [a, b] = two_systems(10);
  EvalService svc(dir / "log.jsonl");
  const std::string sid = svc.create_session(a, b, 5, 1).session_id;
  EXPECT_EQ(svc.tally(sid), EvalSummary{});
}

TEST(EvalServiceTest, JudgmentsSurviveRestart) {
  TempDir dir;
  auto [a, b] = two_systems(40);
  std::string sid;
  EvalSummary before;
  {
    EvalService svc(dir / "log.jsonl");
    sid = svc.create_session(a, b, 20, 8).session_id;
    for (int i = 0; i < 12; ++i) {
      auto it = svc.next_item(sid, "ann");
      svc.submit_judgment(sid, it->item_id, simulated_judgment(item_payload(*it)), "ann");
    }
    before = svc.tally(sid);
  }
  EvalService reopened(dir / "log.jsonl");
  EXPECT_EQ(reopened.tally(sid), before);
  EXPECT_EQ(reopened.progress(sid, "ann"), (std::pair<std::size_t, std::size_t>{12, 20}));
  EXPECT_EQ(reopened.next_item(sid, "ann")->item_id, reopened.session(sid).items[12].item_id);
}

TEST(EvalServiceTest, TornTrailingLineIsIgnored) {
  TempDir dir;
  auto [a, b] = two_systems(10);
  std::string sid;
  {
    EvalService svc(dir / "log.jsonl");
    sid = svc.create_session(a, b, 5, 1).session_id;
    svc.submit_judgment(sid, svc.next_item(sid, "x")->item_id, Choice::LeftWin, "x");
  }
  {
    std::ofstream out(dir / "log.jsonl", std::ios::app | std::ios::binary);
    out << R"({"type": "judgment", "session_id": ")" << sid << R"(", "item_)";
  }
  EvalService svc(dir / "log.jsonl");
  EXPECT_EQ(svc.tally(sid).total(), 1u);
}

TEST(EvalServiceTest, TallyMatchesIndependentLogRecount) {
  TempDir dir;
  auto [a, b] = two_systems(200, 4);
  EvalService svc(dir / "log.jsonl");
  const std::string sid = svc.create_session(a, b, 150, 17).session_id;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 150; ++i) {
    auto it = svc.next_item(sid, "ann");
    svc.submit_judgment(sid, it->item_id, static_cast<Choice>(rng() % 4), "ann");
  }
  // Recount straight from the log file, unblinding with the logged session.
  std::map<std::string, bool> side;
  EvalSummary recount;
  for (const auto& line : testing_support::read_lines(dir / "log.jsonl")) {
    const auto ev = json::parse(line);
    if (ev.at("type") == "session") {
      for (const auto& it : ev.at("session").at("items")) side[it.at("item_id")] = it.at("left_is_a");
      continue;
    }
    const std::string c = ev.at("choice");
    const bool la = side.at(ev.at("item_id"));
    if (c == "SimilarQuality") ++recount.similar;
    else if (c == "NearlyIdentical") ++recount.identical;
    else if ((c == "LeftWin") == la) ++recount.a_win;
    else ++recount.b_win;
  }
  EXPECT_EQ(svc.tally(sid), recount);
  EXPECT_EQ(recount.total(), 150u);
}

TEST(EvalServiceTest, ReproducesBundledHumanEvaluationLog) {
  TempDir dir;
  fs::copy_file(testing_support::data_dir() / "human_eval_judgments.jsonl", dir / "log.jsonl");
  EvalService svc(dir / "log.jsonl");
  const auto t = svc.tally("s-human-eval");
  EXPECT_EQ(t.a_win, 20u);
  EXPECT_EQ(t.b_win, 15u);
  EXPECT_EQ(t.similar, 46u);
  EXPECT_EQ(t.identical, 19u);
  EXPECT_EQ(t.total(), 100u);
  EXPECT_EQ(svc.session("s-human-eval").system_a_name, "ChatGPT");
}

TEST(EvalServiceTest, MirroredSessionsGiveMirroredTallies) {
  auto [a, b] = two_systems(300, 6);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = create_session(a, b, 100, seed);
    const auto m = create_session(b, a, 100, mirror_seed(seed));
    ASSERT_EQ(s.items.size(), m.items.size());
    std::vector<JudgmentRecord> js, jm;
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      const auto ps = item_payload(s.items[i]);
      const auto pm = item_payload(m.items[i]);
      ASSERT_EQ(ps, pm);  // the annotator sees exactly the same thing
      // Judge by content only: prefer whichever side mentions "A says".
      const auto h = digest64(ps.at("item_id").get<std::string>(), seed) % 4;
      const Choice c = h == 0 ? Choice::SimilarQuality : h == 1 ? Choice::NearlyIdentical
                       : (h == 2) == ps.at("left").get<std::string>().starts_with("A says") ? Choice::LeftWin
                                                                                          : Choice::RightWin;
      js.push_back({s.items[i].item_id, c, "ann", 0});
      jm.push_back({m.items[i].item_id, c, "ann", 0});
    }
    const auto ts = tally(s, js), tm = tally(m, jm);
    EXPECT_EQ(ts.a_win, tm.b_win);
    EXPECT_EQ(ts.b_win, tm.a_win);
    EXPECT_EQ(ts.similar, tm.similar);
    EXPECT_EQ(ts.identical, tm.identical);
  }
}

TEST(EvalServiceTest, ConcurrentSubmissionsAreAllRecorded) {
  TempDir dir;
  auto [a, b] = two_systems(100);
  EvalService svc(dir / "log.jsonl");
  const auto s = svc.create_session(a, b, 100, 2);
  std::vector<std::thread> workers;
  for (int w = 0; w < 4; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = static_cast<std::size_t>(w); i < s.items.size(); i += 4)
        svc.submit_judgment(s.session_id, s.items[i].item_id, Choice::SimilarQuality, "ann");
    });
  }
  for (auto& t : workers) t.join();
  EXPECT_EQ(svc.tally(s.session_id).similar, 100u);
  EvalService reopened(dir / "log.jsonl");
  EXPECT_EQ(reopened.tally(s.session_id).similar, 100u);
}

TEST(EvalHttp, FullAnnotationRoundTrip) {
  TempDir dir;
  auto [a, b] = two_systems(60);
  EvalService svc(dir / "log.jsonl");
  httplib::Server server;
  install_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  json outs_a = json::array(), outs_b = json::array();
  for (const auto& r : a) outs_a.push_back(json::parse(to_line(r)));
  for (const auto& r : b) outs_b.push_back(json::parse(to_line(r)));
  auto created = cli.Post("/sessions",
                          json{{"outputs_a", outs_a}, {"outputs_b", outs_b}, {"sample_n", 20}, {"seed", 11},
                               {"system_a_name", "ChatGPT"}, {"system_b_name", "CapsFus-LLaMA"}}
                              .dump(),
                          "application/json");
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 201);
  const std::string sid = json::parse(created->body).at("session_id");
  EXPECT_EQ(sid, create_session(a, b, 20, 11, "ChatGPT", "CapsFus-LLaMA").session_id);

  int served = 0;
  std::string first_item;
  for (;;) {
    auto next = cli.Get("/sessions/" + sid + "/next?annotator=ann");
    ASSERT_TRUE(next);
    ASSERT_EQ(next->status, 200);
    const auto body = json::parse(next->body);
    if (body.at("done")) break;
    EXPECT_FALSE(next->body.find("left_is_a") != std::string::npos);
    const auto& item = body.at("item");
    if (first_item.empty()) first_item = item.at("item_id");
    auto r = cli.Post("/sessions/" + sid + "/judgments",
                      json{{"item_id", item.at("item_id")}, {"choice", std::string(to_string(simulated_judgment(item)))},
                           {"annotator", "ann"}}
                          .dump(),
                      "application/json");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 201);
    ++served;
  }
  EXPECT_EQ(served, 20);

  auto dup = cli.Post("/sessions/" + sid + "/judgments",
                      json{{"item_id", first_item}, {"choice", "LeftWin"}, {"annotator", "ann"}}.dump(), "application/json");
  EXPECT_EQ(dup->status, 409);
  auto unknown_item = cli.Post("/sessions/" + sid + "/judgments",
                               json{{"item_id", "nope"}, {"choice", "LeftWin"}, {"annotator", "ann"}}.dump(),
                               "application/json");
  EXPECT_EQ(unknown_item->status, 404);
  auto bad_choice = cli.Post("/sessions/" + sid + "/judgments",
                             json{{"item_id", first_item}, {"choice", "Tie"}}.dump(), "application/json");
  EXPECT_EQ(bad_choice->status, 400);
  EXPECT_EQ(cli.Get("/sessions/s-missing/tally")->status, 404);

  auto t = cli.Get("/sessions/" + sid + "/tally");
  ASSERT_EQ(t->status, 200);
  const auto tj = json::parse(t->body);
  EXPECT_EQ(tj.at("total"), 20);
  EXPECT_EQ(tj.at("system_a_name"), "ChatGPT");
  const auto direct = svc.tally(sid);
  EXPECT_EQ(tj.at("a_win"), direct.a_win);
  EXPECT_EQ(tj.at("b_win"), direct.b_win);

  auto gap = cli.Post("/sessions", json{{"outputs_a", outs_a}, {"outputs_b", json::array()}, {"sample_n", 5}}.dump(),
                      "application/json");
  EXPECT_EQ(gap->status, 422);
  auto root = cli.Get("/");
  EXPECT_EQ(root->status, 200);

  server.stop();
  th.join();
}
