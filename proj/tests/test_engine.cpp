#include <gtest/gtest.h>

#include <random>
#include <set>

#include "support.hpp"

using namespace m2;

namespace {

constexpr double kSigmoidOne = 0.7310585786300048792511592418;

const json kFeedEnv = json::parse(R"({
  "schema": "m2env/1", "name": "feed", "initial_screen": "home",
  "screens": [
    {"id": "home", "title": "Home", "widgets": [
      {"id": "search", "label": "Search", "rect": [100, 100, 980, 300], "target": "results"},
      {"id": "feed", "label": "Feed", "kind": "swipe", "direction": "up", "rect": [0, 600, 1080, 2200], "set": {"scrolled": "yes"}}
    ]},
    {"id": "results", "title": "Results", "buttons": {"Back": "home"}}
  ],
  "goals": [{"id": "search", "intent": "open search results", "predicate": {"screen": "results"}}]
})");

// Two taps on one widget, a wait and a swipe.
const std::vector<GuiAction> kFourCandidates{GuiAction::click({200, 200}), GuiAction::click({700, 250}), GuiAction::wait(1),
                                             GuiAction::swipe({540, 1800}, {540, 900})};

AgentSuite scripted_suite(const std::shared_ptr<const ScreenGraph>& g, std::vector<std::vector<GuiAction>> script) {
  AgentSuite s = m2t::oracle(g);
  s.infer = std::make_shared<ScriptedInferAgent>(std::move(script));
  return s;
}

// Wraps an agent suite so that every first attempt of a call fails with a retryable error.
class FlakyInfer final : public InferAgent {
 public:
  explicit FlakyInfer(std::shared_ptr<InferAgent> inner) : inner_(std::move(inner)) {}
  std::vector<CandidateAction> infer_candidates(const Observation& o, const IntentRecord& i, std::span<const GuiAction> h,
                                                std::span<const GuiAction> a, unsigned k) override {
    if (fail_next_) {
      fail_next_ = false;
      throw AgentError("transient", true);
    }
    fail_next_ = true;
    return inner_->infer_candidates(o, i, h, a, k);
  }

 private:
  std::shared_ptr<InferAgent> inner_;
  bool fail_next_ = true;
};

class BrokenJudge final : public JudgeAgent {
 public:
  JudgeVerdict judge(const Observation&, const IntentRecord&, const TrajectoryView&) override {
    throw AgentError("judge offline", false);
  }
};

IntentTree two_children(double q_a) {
  IntentTree t("t", m2t::intent("x"), "s0");
  const NodeId a = t.add_child(0, GuiAction::click({1, 1}), "a", 0, prior_bonus(0, 1, 0.5));
  t.add_child(0, GuiAction::click({2, 2}), "b", 1, prior_bonus(1, 1, 0.5));
  t.materialize(a, "sa", TransitionOutcome::moved);
  backpropagate(t, a, q_a);
  return t;
}

void expect_tree_invariants(const IntentTree& t, bool ranked) {
  t.check_invariants();
  for (const auto& n : t.nodes()) {
    std::uint64_t child_visits = 0;
    std::set<unsigned> ranks;
    std::set<std::string> states;
    for (NodeId c : n.children) {
      const TreeNode& ch = t.node(c);
      child_visits += ch.visit_count;
      ranks.insert(ch.prior_rank);
      if (ranked && ch.materialized && ch.outcome != TransitionOutcome::terminated) {
        EXPECT_TRUE(states.insert(ch.state_ref).second) << "equivalent siblings under node " << n.node_id;
      }
    }
    EXPECT_GE(n.visit_count, child_visits);
    if (n.node_id == t.root()) {
      EXPECT_EQ(n.visit_count, child_visits);
    }
    if (!n.children.empty()) {
      EXPECT_EQ(ranks.size(), n.children.size());
      EXPECT_EQ(*ranks.rbegin(), n.children.size() - 1) << "ranks are not dense";
    }
  }
}

}  // namespace

TEST(SelectLeaf, FreshRootIsExpandable) {
  IntentTree t("t", m2t::intent("x"), "s0");
  EXPECT_EQ(select_leaf(t, MiningConfig{}), std::optional<NodeId>(0));
}

TEST(SelectLeaf, PendingChildCompetesByPrior) {
  MiningConfig cfg;
  // q=0.2 with N_parent=1 scores 0.2 against the pending sibling's bonus 0.5.
  EXPECT_EQ(select_leaf(two_children(0.2), cfg), std::optional<NodeId>(0));
  // q=0.9 beats 0.5, so the walk descends into the visited child.
  EXPECT_EQ(select_leaf(two_children(0.9), cfg), std::optional<NodeId>(1));
  cfg.selection = SelectionPolicy::visit_first;
  EXPECT_EQ(select_leaf(two_children(0.9), cfg), std::optional<NodeId>(0));
}

TEST(SelectLeaf, ExhaustedTreeAndFailureNodes) {
  IntentTree t("t", m2t::intent("x"), "s0");
  t.set_fully_expanded(0, true);
  EXPECT_FALSE(select_leaf(t, MiningConfig{}).has_value());

  // A failure child stays selectable (and is re-scored) while the tree has live nodes.
  IntentTree f("t", m2t::intent("x"), "s0");
  const NodeId c = f.add_child(0, GuiAction::click({1, 1}), "c", 0, 1.0);
  const NodeId x = f.add_child(0, GuiAction::click({2, 2}), "x", 1, 0.5);
  f.materialize(c, "sc", TransitionOutcome::moved);
  f.materialize(x, "sx", TransitionOutcome::moved);
  f.set_status(c, NodeStatus::failure);
  backpropagate(f, c, 0.0);
  backpropagate(f, x, 0.0);
  f.set_fully_expanded(0, true);
  EXPECT_EQ(select_leaf(f, MiningConfig{}), std::optional<NodeId>(c));
  // Once only failure leaves remain, the tree is exhausted.
  f.set_fully_expanded(x, true);
  EXPECT_FALSE(select_leaf(f, MiningConfig{}).has_value());
}

TEST(SelectLeaf, NeverReturnsPendingOrExhausted) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    IntentTree t = m2t::random_tree(rng, 2 + rng() % 20);
    for (const auto& n : t.nodes()) {
      if (rng() % 3 == 0) t.set_fully_expanded(n.node_id, true);
      backpropagate(t, n.node_id, std::uniform_real_distribution<double>(0, 1)(rng));
    }
    MiningConfig cfg;
    cfg.selection = i % 2 ? SelectionPolicy::visit_first : SelectionPolicy::prior_competes;
    const auto v = select_leaf(t, cfg);
    if (!v) {
      EXPECT_TRUE(t.node(0).exhausted);
      continue;
    }
    const TreeNode& n = t.node(*v);
    EXPECT_TRUE(n.materialized);
    EXPECT_TRUE(n.expandable() || n.status != NodeStatus::intermediate);
  }
}

TEST(Expansion, MergesAndExecutesTopRankedFirst) {
  auto g = load_environment(kFeedEnv);
  SyntheticEnvironment env(g);
  MiningConfig cfg;
  cfg.k_candidates = 4;
  Miner<SyntheticEnvironment> m(env, scripted_suite(g, {kFourCandidates}), cfg, g->seed_intent("search"));
  const auto c = m.expand(0);
  ASSERT_TRUE(c);
  const IntentTree& t = m.tree();
  ASSERT_EQ(t.node(0).children.size(), 3u);
  EXPECT_EQ(t.node(*c).prior_rank, 0u);
  EXPECT_EQ(*t.node(*c).action, GuiAction::click({200, 200}));
  EXPECT_TRUE(t.node(*c).materialized);
  EXPECT_EQ(m.session().env_steps(), 1u);
  for (NodeId id : t.node(0).children)
    if (id != *c) {
      EXPECT_TRUE(t.node(id).pending());
    }

  std::set<NodeId> executed{*c};
  for (unsigned rank = 1; rank < 3; ++rank) {
    const auto next = m.expand(0);
    ASSERT_TRUE(next);
    EXPECT_EQ(t.node(*next).prior_rank, rank);
    EXPECT_TRUE(executed.insert(*next).second);
  }
  EXPECT_EQ(t.node(0).children.size(), 3u);
  EXPECT_TRUE(t.node(0).fully_expanded);
  EXPECT_FALSE(m.expand(0).has_value());
}

TEST(Expansion, VanillaAddsOneChildPerCall) {
  auto g = m2t::load("hotel-booking.json");
  SyntheticEnvironment env(g);
  Miner<SyntheticEnvironment> m(env, AgentSuite{}, m2t::config(1, MiningMode::vanilla), g->seed_intent("book_hotel"));
  const std::size_t legal = legal_actions(*g, g->initial_state()).size();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < legal; ++i) {
    const auto c = m.expand(0);
    ASSERT_TRUE(c);
    EXPECT_EQ(m.tree().node(0).children.size(), i + 1);
    EXPECT_TRUE(seen.insert(m.tree().node(*c).action->summary()).second);
  }
  EXPECT_TRUE(m.tree().node(0).fully_expanded);
  EXPECT_FALSE(m.expand(0).has_value());
}

TEST(Simulation, JudgeRewardAfterOneStep) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  Miner<SyntheticEnvironment> m(env, m2t::oracle(g), m2t::config(0), g->seed_intent("finish"));
  const auto c = m.expand(0);
  ASSERT_TRUE(c);
  EXPECT_EQ(*m.tree().node(*c).action, GuiAction::click({540, 2100}));
  EXPECT_NEAR(m.simulate(*c), kSigmoidOne, 1e-12);
  EXPECT_EQ(m.tree().node(*c).status, NodeStatus::intermediate);
}

TEST(Simulation, VanillaWithoutRolloutScoresZero) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  MiningConfig cfg = m2t::config(0, MiningMode::vanilla);
  cfg.max_rollout_steps = 0;
  Miner<SyntheticEnvironment> m(env, AgentSuite{}, cfg, g->seed_intent("finish"));
  const auto c = m.expand(0);
  ASSERT_TRUE(c);
  ASSERT_EQ(m.tree().node(*c).status, NodeStatus::intermediate);
  EXPECT_EQ(m.simulate(*c), 0.0);
}

TEST(Backpropagation, RunningMeansAlongPath) {
  IntentTree t("t", m2t::intent("x"), "s0");
  const NodeId a = t.add_child(0, GuiAction::click({1, 1}), "a", 0, 1.0);
  t.materialize(a, "sa", TransitionOutcome::moved);
  const NodeId b = t.add_child(a, GuiAction::click({2, 2}), "b", 0, 1.0);
  t.materialize(b, "sb", TransitionOutcome::moved);
  backpropagate(t, a, 0.5);
  backpropagate(t, b, 1.0);
  backpropagate(t, b, 0.0);
  EXPECT_EQ(t.node(b).visit_count, 2u);
  EXPECT_DOUBLE_EQ(t.node(b).q_value, 0.5);
  EXPECT_EQ(t.node(a).visit_count, 3u);
  EXPECT_DOUBLE_EQ(t.node(a).q_value, 0.5);
  backpropagate(t, a, 1.0);
  EXPECT_DOUBLE_EQ(t.node(0).q_value, 2.5 / 4.0);
}

TEST(Mine, ChainThreeSucceedsInTwoSteps) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  const auto r = mine(g->seed_intent("finish"), env, m2t::oracle(g), m2t::config(0));
  ASSERT_EQ(r.outcome, MiningOutcome::success);
  ASSERT_TRUE(r.trajectory);
  EXPECT_EQ(r.trajectory->steps.size(), 2u);
  EXPECT_EQ(r.verified, std::optional<bool>(true));
  const auto [end, moved] = m2t::replay_all(*g, r.trajectory->actions());
  EXPECT_TRUE(moved);
  EXPECT_EQ(end.screen, "s2");
  ASSERT_EQ(r.tree.intents().size(), 1u);
  EXPECT_EQ(r.tree.intents()[0].endpoint, r.trajectory->endpoint);
}

TEST(Mine, UnreachableGoalExhaustsBudget) {
  auto g = load_environment_file(m2t::test_fixture("unreachable_goal.json"));
  SyntheticEnvironment env(g);
  for (MiningMode mode : {MiningMode::accelerated, MiningMode::vanilla, MiningMode::infer_only}) {
    MiningConfig cfg = m2t::config(3, mode);
    cfg.max_iterations = 60;
    cfg.max_depth = 4;
    const auto r = mine(g->seed_intent("vault"), env, m2t::oracle(g), cfg);
    EXPECT_EQ(r.outcome, MiningOutcome::budget_exhausted) << to_string(mode);
    EXPECT_FALSE(r.trajectory);
    EXPECT_LE(r.iterations_used, 60u);
    EXPECT_TRUE(r.tree.intents().empty());
  }
}

TEST(Mine, TreeInvariantsAcrossSeedsAndModes) {
  auto g = m2t::load("hotel-booking.json");
  SyntheticEnvironment env(g);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    for (MiningMode mode : {MiningMode::accelerated, MiningMode::vanilla, MiningMode::infer_only}) {
      MiningConfig cfg = m2t::config(seed, mode);
      cfg.max_iterations = 80;
      const auto r = mine(g->seed_intent("pick_dates"), env, m2t::oracle(g, 0.3, seed), cfg);
      EXPECT_EQ(r.tree.node(0).visit_count, r.iterations_used);
      expect_tree_invariants(r.tree, mode == MiningMode::accelerated);
      EXPECT_LE(r.iterations_used, cfg.max_iterations);
      if (r.outcome == MiningOutcome::success) {
        const auto [end, moved] = m2t::replay_all(*g, r.trajectory->actions());
        EXPECT_TRUE(g->resolve_goal(g->seed_intent("pick_dates")).holds(end.screen, end.bindings));
        EXPECT_LE(r.trajectory->steps.size(), cfg.max_depth);
      }
    }
  }
}

TEST(Mine, DeterministicForFixedSeed) {
  auto g = m2t::load("hotel-booking.json");
  SyntheticEnvironment env(g);
  for (MiningMode mode : {MiningMode::accelerated, MiningMode::vanilla}) {
    MiningConfig cfg = m2t::config(17, mode);
    cfg.max_iterations = 150;
    const auto a = mine(g->seed_intent("book_hotel"), env, m2t::oracle(g, 0.3, 17), cfg);
    const auto b = mine(g->seed_intent("book_hotel"), env, m2t::oracle(g, 0.3, 17), cfg);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(to_json(a.tree).dump(), to_json(b.tree).dump());
  }
}

TEST(Mine, RespectsBudgets) {
  auto g = m2t::load("hotel-booking.json");
  SyntheticEnvironment env(g);
  MiningConfig cfg = m2t::config(2, MiningMode::vanilla);
  cfg.max_iterations = 5;
  auto r = mine(g->seed_intent("book_hotel"), env, AgentSuite{}, cfg);
  EXPECT_LE(r.iterations_used, 5u);
  cfg.max_iterations = 1'000'000;
  cfg.wall_clock_cap_s = 0.05;
  r = mine(g->seed_intent("book_hotel"), env, AgentSuite{}, cfg);
  EXPECT_TRUE(r.timed_out || r.outcome == MiningOutcome::success);
  EXPECT_LT(r.wall_time_s, 5.0);
}

TEST(Mine, RetryableAgentErrorsAreTransparent) {
  auto g = m2t::load("hotel-booking.json");
  SyntheticEnvironment env(g);
  MiningConfig cfg = m2t::config(9);
  const auto plain = mine(g->seed_intent("book_hotel"), env, m2t::oracle(g, 0.3, 9), cfg);
  AgentSuite flaky = m2t::oracle(g, 0.3, 9);
  flaky.infer = std::make_shared<FlakyInfer>(flaky.infer);
  const auto retried = mine(g->seed_intent("book_hotel"), env, flaky, cfg);
  EXPECT_EQ(retried.aborted_iterations, 0u);
  EXPECT_EQ(to_json(plain.tree).dump(), to_json(retried.tree).dump());
}

TEST(Mine, FatalAgentErrorsRollBack) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  AgentSuite s = m2t::oracle(g);
  s.judge = std::make_shared<BrokenJudge>();
  MiningConfig cfg = m2t::config(0);
  cfg.max_iterations = 10;
  const auto r = mine(g->seed_intent("finish"), env, s, cfg);
  EXPECT_EQ(r.outcome, MiningOutcome::budget_exhausted);
  EXPECT_EQ(r.iterations_used, 0u);
  EXPECT_GT(r.aborted_iterations, 0u);
  EXPECT_EQ(r.tree.size(), 1u);
  r.tree.check_invariants();
}

TEST(Mine, MissingAgentsRejected) {
  auto g = m2t::load("chain3.json");
  SyntheticEnvironment env(g);
  EXPECT_THROW(mine(g->seed_intent("finish"), env, AgentSuite{}, m2t::config(0)), ContractError);
  MiningConfig bad;
  bad.k_candidates = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Config, JsonRoundTrip) {
  MiningConfig c;
  c.k_candidates = 5;
  c.mode = MiningMode::infer_only;
  c.selection = SelectionPolicy::visit_first;
  c.rng_seed = 123;
  const MiningConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_THROW(config_from_json(json{{"mode", "greedy"}}), ValidationError);
}

TEST(Ablate, RowsPerModeAndLength) {
  auto g = m2t::load("hotel-booking.json");
  SyntheticEnvironment env(g);
  const auto tasks = ablation_tasks(*g, {1, 3, 5});
  for (const auto& t : tasks) EXPECT_EQ(m2t::bfs_distance(*g, g->initial_state(), *t.intent.goal), t.length);
  MiningConfig base = ablation_defaults();
  base.wall_clock_cap_s = 60;
  const auto rows = ablate(env, tasks, {MiningMode::accelerated, MiningMode::vanilla}, {1, 2}, base,
                           [&](std::uint64_t s) { return m2t::oracle(g, 0.0, s); });
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.runs.size(), 2u);
    EXPECT_EQ(r.msr, 1.0);
  }
  for (unsigned len : {1u, 3u, 5u}) EXPECT_FALSE(std::isnan(speedup(rows, len)));
  const std::string csv = ablation_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_THROW(ablation_tasks(*g, {42}), ValidationError);
}
