#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <m2miner/m2miner.hpp>

namespace m2t {

inline std::string fixture(const std::string& name) { return std::string(M2_FIXTURE_DIR) + "/" + name; }
inline std::string test_fixture(const std::string& name) { return std::string(M2_TEST_FIXTURE_DIR) + "/" + name; }

inline std::shared_ptr<const m2::ScreenGraph> load(const std::string& name) {
  return m2::load_environment_file(fixture(name));
}

/// Plain BFS over the transition function, independent of the graph's own distance tables.
inline std::optional<unsigned> bfs_distance(const m2::ScreenGraph& g, const m2::EnvState& from,
                                            const m2::GoalPredicate& goal) {
  std::map<std::string, unsigned> seen;
  std::deque<m2::EnvState> q;
  seen[m2::fingerprint(from)] = 0;
  q.push_back(from);
  while (!q.empty()) {
    m2::EnvState s = q.front();
    q.pop_front();
    const unsigned d = seen[m2::fingerprint(s)];
    if (goal.holds(s.screen, s.bindings)) return d;
    for (const auto& la : m2::legal_actions(g, s)) {
      auto t = m2::step(g, s, la.action);
      if (t.outcome != m2::TransitionOutcome::moved) continue;
      const std::string fp = m2::fingerprint(t.next);
      if (seen.count(fp)) continue;
      seen[fp] = d + 1;
      q.push_back(t.next);
    }
  }
  return std::nullopt;
}

inline m2::AgentSuite oracle(const std::shared_ptr<const m2::ScreenGraph>& g, double eps = 0.0, std::uint64_t seed = 0,
                             double redundancy = 0.25) {
  m2::OracleParams p;
  p.epsilon = eps;
  p.redundancy = redundancy;
  p.seed = seed;
  return m2::make_oracle_agents(g, p);
}

inline m2::MiningConfig config(std::uint64_t seed, m2::MiningMode mode = m2::MiningMode::accelerated) {
  m2::MiningConfig c;
  c.rng_seed = seed;
  c.mode = mode;
  return c;
}

/// Replays `actions` from the initial state; returns the end state and whether every step moved.
inline std::pair<m2::EnvState, bool> replay_all(const m2::ScreenGraph& g, const std::vector<m2::GuiAction>& actions) {
  m2::EnvState s = g.initial_state();
  bool moved = true;
  for (const auto& a : actions) {
    auto t = m2::step(g, s, a);
    moved &= t.outcome == m2::TransitionOutcome::moved;
    s = t.next;
  }
  return {s, moved};
}

inline m2::IntentRecord intent(const std::string& text) { return m2::make_seed_intent(text); }

/// Random rooted tree with `n` materialized nodes built through the public mutators.
inline m2::IntentTree random_tree(std::mt19937_64& rng, std::size_t n) {
  m2::IntentTree t("t-rand", intent("explore"), "s0");
  for (std::size_t i = 1; i < n; ++i) {
    std::vector<m2::NodeId> open;
    for (const auto& node : t.nodes())
      if (node.status == m2::NodeStatus::intermediate) open.push_back(node.node_id);
    const m2::NodeId p = open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
    const unsigned rank = static_cast<unsigned>(t.node(p).children.size());
    const auto c = t.add_child(p, m2::GuiAction::click({static_cast<int>(i), static_cast<int>(rank)}), "step " + std::to_string(i),
                               rank, m2::prior_bonus(rank, 1.0, 0.5));
    t.materialize(c, "s" + std::to_string(i), m2::TransitionOutcome::moved);
  }
  return t;
}

}  // namespace m2t
