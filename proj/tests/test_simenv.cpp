#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace m2;

namespace {

const json kKeyEnv = json::parse(R"({
  "schema": "m2env/1", "name": "keys", "initial_screen": "a",
  "screens": [
    {"id": "a", "widgets": [{"id": "go", "rect": [0, 0, 200, 200], "target": "b"}],
     "keys": {"volume_up": {"set": {"volume": "up"}}}},
    {"id": "b", "buttons": {"Back": "a"}}
  ]
})");

Point random_inside(const Rect& r, std::mt19937_64& rng) {
  return {std::uniform_int_distribution<int>(r.x0, r.x1 - 1)(rng), std::uniform_int_distribution<int>(r.y0, r.y1 - 1)(rng)};
}

}  // namespace

TEST(LoadEnvironment, Chain3) {
  auto g = m2t::load("chain3.json");
  EXPECT_EQ(g->screens.size(), 3u);
  EXPECT_EQ(g->latent_goals().size(), 1u);
  EXPECT_EQ(g->initial_screen, "s0");
}

TEST(LoadEnvironment, DanglingReferenceNamesTarget) {
  try {
    load_environment_file(m2t::test_fixture("dangling.json"));
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("\"X\""), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("screens[a].widgets[0].target"), std::string::npos) << e.what();
  }
}

TEST(LoadEnvironment, RejectsBadDefinitions) {
  EXPECT_THROW(load_environment_file(m2t::test_fixture("bad_schema.json")), SchemaError);
  EXPECT_THROW(load_environment_file(m2t::test_fixture("latent_unreachable.json")), ValidationError);
  EXPECT_THROW(load_environment_file(m2t::test_fixture("out_of_bounds.json")), ValidationError);
  EXPECT_THROW(load_environment_file(m2t::test_fixture("no_such_file.json")), NotFoundError);
}

TEST(LoadEnvironment, HotelMainGoalAtDistanceNine) {
  auto g = m2t::load("hotel-booking.json");
  const GoalDecl* goal = g->find_goal("book_hotel");
  ASSERT_NE(goal, nullptr);
  EXPECT_EQ(m2t::bfs_distance(*g, g->initial_state(), goal->predicate), 9u);
  EXPECT_EQ(g->distance_from_initial(goal->predicate), 9u);
  EXPECT_EQ(g->latent_goals().size(), 2u);
}

TEST(LoadEnvironment, DistancesAgreeWithIndependentBfs) {
  for (const char* name : {"chain3.json", "hotel-booking.json", "map-app.json"}) {
    auto g = m2t::load(name);
    for (const auto& goal : g->goals)
      EXPECT_EQ(g->distance_from_initial(goal.predicate), m2t::bfs_distance(*g, g->initial_state(), goal.predicate))
          << name << " " << goal.id;
  }
}

TEST(LoadEnvironment, ShortestPathsRealizeTheirDistance) {
  for (const char* name : {"chain3.json", "hotel-booking.json", "map-app.json"}) {
    auto g = m2t::load(name);
    for (const auto& goal : g->goals) {
      const auto path = g->shortest_path(g->initial_state(), goal.predicate);
      ASSERT_TRUE(path) << goal.id;
      EXPECT_EQ(path->size(), *g->distance_from_initial(goal.predicate));
      SyntheticEnvironment env(g);
      auto s = env.open_session();
      for (const auto& a : *path) EXPECT_EQ(s.execute(a).second, TransitionOutcome::moved);
      EXPECT_EQ(goal_check(*g, goal.predicate, s.state()), GoalStatus::satisfied) << name << " " << goal.id;
      EXPECT_EQ(s.state().step_count, path->size());
    }
  }
}

TEST(Session, FingerprintIsHashOfCanonicalState) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  auto s = env.open_session();
  const Observation o = s.observe();
  EXPECT_EQ(o.fingerprint, to_hex(fnv1a64(canonical_state("s0", {}))));
  EXPECT_EQ(s.observe().fingerprint, o.fingerprint);
  EXPECT_EQ(o.screen_id, "s0");
}

TEST(Session, ExecuteClickAndMiss) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  auto s = env.open_session();
  const auto before = s.observe().fingerprint;
  auto [fp0, miss] = s.execute(GuiAction::click({0, 0}));
  EXPECT_EQ(miss, TransitionOutcome::no_op);
  EXPECT_EQ(fp0, before);
  EXPECT_EQ(s.state().step_count, 1u);
  auto [fp1, hit] = s.execute(GuiAction::click(Rect{340, 2000, 740, 2200}.center()));
  EXPECT_EQ(hit, TransitionOutcome::moved);
  EXPECT_EQ(s.state().screen, "s1");
  EXPECT_EQ(fp1, fingerprint("s1", {}));
  EXPECT_EQ(s.env_steps(), 2u);
}

TEST(Session, SameHitRegionGivesSameSuccessor) {
  auto g = m2t::load("hotel-booking.json");
  std::mt19937_64 rng(31);
  for (const auto& [id, screen] : g->screens) {
    for (const auto& w : screen.widgets) {
      if (w.kind != WidgetKind::click) continue;
      EnvState s{id, {}, 0, false};
      const auto ref = step(*g, s, GuiAction::click(random_inside(w.rect, rng)));
      for (int i = 0; i < 10; ++i) {
        const auto other = step(*g, s, GuiAction::click(random_inside(w.rect, rng)));
        ASSERT_EQ(fingerprint(other.next), fingerprint(ref.next)) << id << "/" << w.id;
        ASSERT_EQ(other.outcome, ref.outcome);
      }
    }
  }
}

TEST(Session, SnapshotRestoreRoundTripKeepsStepCounter) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  auto s = env.open_session();
  const auto tok = s.snapshot();
  const auto pre = s.observe().fingerprint;
  const auto [after, _] = s.execute(GuiAction::click({540, 2100}));
  s.restore(tok);
  EXPECT_EQ(s.observe().fingerprint, pre);
  EXPECT_EQ(s.env_steps(), 1u);
  EXPECT_EQ(s.execute(GuiAction::click({540, 2100})).first, after);
  EXPECT_EQ(s.env_steps(), 2u);
}

TEST(Session, ForeignTokenClosedSessionAndTerminate) {
  auto chain = m2t::load("chain3.json");
  auto hotel = m2t::load("hotel-booking.json");
  SyntheticEnvironment a(chain), b(hotel);
  auto sa = a.open_session();
  auto sb = b.open_session();
  EXPECT_THROW(sb.restore(sa.snapshot()), TokenError);
  EXPECT_EQ(sa.execute(GuiAction::terminate(TerminateStatus::success)).second, TransitionOutcome::terminated);
  EXPECT_THROW(sa.execute(GuiAction::click({1, 1})), SessionError);
  sb.close();
  EXPECT_THROW(sb.observe(), SessionError);
  EXPECT_THROW(sb.execute(GuiAction::wait(1)), SessionError);
}

TEST(Session, WaitAndKeySemantics) {
  auto g = load_environment(kKeyEnv);
  SyntheticEnvironment env(g);
  auto s = env.open_session();
  EXPECT_EQ(s.execute(GuiAction::wait(2)).second, TransitionOutcome::no_op);
  EXPECT_EQ(s.state().step_count, 1u);
  EXPECT_EQ(s.execute(GuiAction::key("volume_up")).second, TransitionOutcome::moved);
  EXPECT_EQ(s.state().bindings.at("volume"), "up");
  EXPECT_EQ(s.execute(GuiAction::key("mute")).second, TransitionOutcome::no_op);
  EXPECT_EQ(s.execute(GuiAction::click({10, 10})).second, TransitionOutcome::moved);
  EXPECT_EQ(s.execute(GuiAction::press(SystemButton::back)).second, TransitionOutcome::moved);
  EXPECT_EQ(s.state().screen, "a");
  EXPECT_EQ(s.env_steps(), 5u);
}

TEST(Session, RandomInterleavingsMatchScriptedReplay) {
  auto g = m2t::load("hotel-booking.json");
  SyntheticEnvironment env(g);
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    auto s = env.open_session();
    std::vector<std::pair<SnapshotToken, std::vector<GuiAction>>> snaps;
    std::vector<GuiAction> prefix;
    std::uint64_t executed = 0;
    for (int op = 0; op < 30; ++op) {
      const int kind = std::uniform_int_distribution<int>(0, 9)(rng);
      if (kind < 6) {
        auto legal = legal_actions(*g, s.state());
        if (legal.empty()) continue;
        const auto& a = legal[std::uniform_int_distribution<std::size_t>(0, legal.size() - 1)(rng)].action;
        s.execute(a);
        prefix.push_back(a);
        ++executed;
      } else if (kind < 8) {
        snaps.emplace_back(s.snapshot(), prefix);
      } else if (!snaps.empty()) {
        const auto& [tok, pre] = snaps[std::uniform_int_distribution<std::size_t>(0, snaps.size() - 1)(rng)];
        s.restore(tok);
        prefix = pre;
      }
      const auto [expect, _] = m2t::replay_all(*g, prefix);
      ASSERT_EQ(s.observe().fingerprint, fingerprint(expect));
      ASSERT_EQ(s.env_steps(), executed);
    }
  }
}

TEST(Session, TwoSessionsSameActionsSameFingerprints) {
  auto g = m2t::load("map-app.json");
  SyntheticEnvironment env(g);
  auto a = env.open_session();
  auto b = env.open_session();
  EXPECT_NE(a.id(), b.id());
  std::mt19937_64 rng(33);
  for (int i = 0; i < 50; ++i) {
    auto legal = legal_actions(*g, a.state());
    const auto& act = legal[std::uniform_int_distribution<std::size_t>(0, legal.size() - 1)(rng)].action;
    ASSERT_EQ(a.execute(act).first, b.execute(act).first);
  }
}

TEST(GoalCheck, SatisfiedOpenViolatedUnknown) {
  auto chain = m2t::load("chain3.json");
  const IntentRecord finish = chain->seed_intent("finish");
  EXPECT_EQ(goal_check(*chain, finish, EnvState{"s2", {}, 0, false}), GoalStatus::satisfied);
  EXPECT_EQ(goal_check(*chain, finish, chain->initial_state()), GoalStatus::open);
  auto pit = load_environment_file(m2t::test_fixture("dead_end.json"));
  EXPECT_EQ(goal_check(*pit, pit->seed_intent("goal"), EnvState{"pit", {}, 0, false}), GoalStatus::violated);
  EXPECT_THROW(goal_check(*chain, make_seed_intent("order a pizza"), chain->initial_state()), UnknownIntentError);
  // an intent without an attached predicate resolves through its declared text
  EXPECT_EQ(goal_check(*chain, make_seed_intent("complete the setup wizard"), EnvState{"s2", {}, 0, false}),
            GoalStatus::satisfied);
}
