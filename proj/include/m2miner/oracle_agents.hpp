#pragma once

#include <algorithm>
#include <limits>
#include <memory>
#include <numeric>

#include "agents.hpp"
#include "trajectory.hpp"

namespace m2 {

/// Knobs of the ground-truth agents. epsilon: chance a candidate slot or a ranking is random.
/// redundancy: chance a later slot re-taps an earlier candidate's widget at another pixel.
/// judge_error: chance an open state is misjudged as success.
struct OracleParams {
  double epsilon = 0.0;
  double redundancy = 0.25;
  double judge_error = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::uint64_t call_seed(std::uint64_t seed, std::string_view role, const Observation& obs, const IntentRecord& intent,
                               std::span<const GuiAction> a = {}, std::span<const GuiAction> b = {}, std::uint64_t extra = 0) {
  std::uint64_t h = fnv1a64(role);
  h = fnv1a64(obs.fingerprint, h);
  h = fnv1a64(intent.intent_id, h);
  h = fnv1a64(intent.text, h);
  for (const auto& x : a) h = fnv1a64(x.summary(), h);
  h = fnv1a64("|", h);
  for (const auto& x : b) h = fnv1a64(x.summary(), h);
  return mix_seed(mix_seed(seed, h), extra);
}

/// Distance used for ordering; unreachable sorts last.
inline unsigned order_distance(const ScreenGraph& g, const EnvState& s, const GoalPredicate& goal) {
  if (g.screen(s.screen).dead_end && !goal.holds(s.screen, s.bindings)) return std::numeric_limits<unsigned>::max();
  return g.distance(s, goal).value_or(std::numeric_limits<unsigned>::max() - 1);
}

}  // namespace detail

/// Proposes legal actions ordered by true BFS progress, with epsilon-random slots.
class OracleInferAgent final : public InferAgent {
 public:
  OracleInferAgent(std::shared_ptr<const ScreenGraph> graph, OracleParams p) : g_(std::move(graph)), p_(p) {}

  std::vector<CandidateAction> infer_candidates(const Observation& obs, const IntentRecord& intent,
                                                std::span<const GuiAction> history,
                                                std::span<const GuiAction> already, unsigned k) override {
    if (k == 0) throw ContractError("infer_candidates: k must be >= 1");
    const EnvState s = state_of(obs);
    const GoalPredicate goal = g_->resolve_goal(intent);
    Rng rng(detail::call_seed(p_.seed, "infer", obs, intent, history, already, k));

    auto legal = legal_actions(*g_, s);
    std::vector<unsigned> dist;
    for (const auto& la : legal) dist.push_back(detail::order_distance(*g_, step(*g_, s, la.action).next, goal));
    std::vector<std::size_t> order(legal.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });

    std::vector<GuiAction> taken(already.begin(), already.end());
    auto is_taken = [&](const GuiAction& a) { return std::find(taken.begin(), taken.end(), a) != taken.end(); };

    std::vector<CandidateAction> out;
    for (unsigned slot = 0; slot < k; ++slot) {
      const CandidateSource src =
          taken.empty() ? CandidateSource::primary_model : CandidateSource::diversity_model;
      if (!out.empty() && rng.bernoulli(p_.redundancy)) {
        if (auto alt = jitter(s, out[rng.index(out.size())], rng); alt && !is_taken(alt->action)) {
          alt->source = src;
          taken.push_back(alt->action);
          out.push_back(std::move(*alt));
          continue;
        }
      }
      std::vector<std::size_t> free;
      for (std::size_t i : order)
        if (!is_taken(legal[i].action)) free.push_back(i);
      if (free.empty()) break;
      const std::size_t pick = rng.bernoulli(p_.epsilon) ? free[rng.index(free.size())] : free.front();
      taken.push_back(legal[pick].action);
      out.push_back({legal[pick].action, legal[pick].label + " on " + g_->screen(s.screen).title, src});
    }
    return out;
  }

 private:
  // Same widget, different pixel: an equivalent action the orchestrator has to merge.
  std::optional<CandidateAction> jitter(const EnvState& s, const CandidateAction& c, Rng& rng) const {
    const auto at = c.action.coordinate();
    if (!at || (c.action.kind() != ActionKind::click && c.action.kind() != ActionKind::long_press)) return std::nullopt;
    const Widget* w = detail::hit_test(g_->screen(s.screen), c.action);
    if (!w) return std::nullopt;
    Point p{w->rect.x0 + static_cast<int>(rng.index(static_cast<std::size_t>(w->rect.x1 - w->rect.x0))),
            w->rect.y0 + static_cast<int>(rng.index(static_cast<std::size_t>(w->rect.y1 - w->rect.y0)))};
    if (p == *at) return std::nullopt;
    GuiAction a = c.action.kind() == ActionKind::click ? GuiAction::click(p) : GuiAction::long_press(p, c.action.as<action::LongPress>()->seconds);
    return CandidateAction{a, c.rationale + " (alternate point)", c.source};
  }

  std::shared_ptr<const ScreenGraph> g_;
  OracleParams p_;
};

/// Merges candidates with identical successor states, then ranks by BFS progress.
class OracleOrchestraAgent final : public OrchestraAgent {
 public:
  OracleOrchestraAgent(std::shared_ptr<const ScreenGraph> graph, OracleParams p) : g_(std::move(graph)), p_(p) {}

  RankedActions orchestrate(const Observation& obs, const IntentRecord& intent,
                            std::span<const CandidateAction> cands) override {
    if (cands.empty()) throw ContractError("orchestrate: candidates must be non-empty");
    const EnvState s = state_of(obs);
    const GoalPredicate goal = g_->resolve_goal(intent);
    std::vector<GuiAction> acts;
    for (const auto& c : cands) acts.push_back(c.action);
    Rng rng(detail::call_seed(p_.seed, "orchestrate", obs, intent, acts));

    RankedActions r;
    std::vector<std::string> keys;
    std::vector<unsigned> dist;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const Transition t = step(*g_, s, cands[i].action);
      std::string key = fingerprint(t.next) + (t.outcome == TransitionOutcome::terminated ? "#T" : "");
      auto it = std::find(keys.begin(), keys.end(), key);
      if (it != keys.end()) {
        r.merged_groups[static_cast<std::size_t>(it - keys.begin())].push_back(i);
        continue;
      }
      keys.push_back(std::move(key));
      r.merged_groups.push_back({i});
      dist.push_back(detail::order_distance(*g_, t.next, goal));
    }
    std::vector<std::size_t> order(keys.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    if (order.size() > 1 && rng.bernoulli(p_.epsilon))
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
    for (std::size_t gi : order) r.actions.push_back(cands[r.merged_groups[gi].front()]);
    return r;
  }

 private:
  std::shared_ptr<const ScreenGraph> g_;
  OracleParams p_;
};

/// Ground-truth status; intermediate logits (d0 - d, 0) with d0 the distance at the trajectory start.
class OracleJudgeAgent final : public JudgeAgent {
 public:
  OracleJudgeAgent(std::shared_ptr<const ScreenGraph> graph, OracleParams p) : g_(std::move(graph)), p_(p) {}

  JudgeVerdict judge(const Observation& obs, const IntentRecord& intent, const TrajectoryView& traj) override {
    const EnvState s = state_of(obs);
    const GoalPredicate goal = g_->resolve_goal(intent);
    switch (goal_check(*g_, goal, s)) {
      case GoalStatus::satisfied: return JudgeVerdict::terminal(NodeStatus::success);
      case GoalStatus::violated: return JudgeVerdict::terminal(NodeStatus::failure);
      case GoalStatus::open: break;
    }
    if (p_.judge_error > 0.0) {
      Rng rng(detail::call_seed(p_.seed, "judge", obs, intent, traj.actions));
      if (rng.bernoulli(p_.judge_error)) return JudgeVerdict::terminal(NodeStatus::success);
    }
    const double far = static_cast<double>(g_->reachable_state_count());
    auto d_of = [&](const EnvState& st) {
      auto d = g_->distance(st, goal);
      return d ? static_cast<double>(*d) : far;
    };
    return JudgeVerdict::intermediate(d_of(state_of(traj.start)) - d_of(s), 0.0);
  }

 private:
  std::shared_ptr<const ScreenGraph> g_;
  OracleParams p_;
};

/// 1.0 iff the path replays with every step moving, has no failure node, and ends on a latent goal.
class OracleRecycleFilter final : public RecycleFilter {
 public:
  explicit OracleRecycleFilter(std::shared_ptr<const ScreenGraph> graph) : g_(std::move(graph)) {}

  double score(const TrajectoryView& traj, const Observation& end) override {
    if (traj.contains_failure || traj.actions.empty()) return 0.0;
    const Replay r = replay(*g_, state_of(traj.start), traj.actions);
    if (!r.all_moved || fingerprint(r.end) != end.fingerprint) return 0.0;
    for (const GoalDecl* goal : g_->latent_goals())
      if (goal->predicate.holds(r.end.screen, r.end.bindings)) return 1.0;
    return 0.0;
  }

 private:
  std::shared_ptr<const ScreenGraph> g_;
};

/// Names the first latent goal the endpoint satisfies, with its predicate attached.
class OracleIntentGenerator final : public IntentGenerator {
 public:
  explicit OracleIntentGenerator(std::shared_ptr<const ScreenGraph> graph) : g_(std::move(graph)) {}

  GeneratedIntent generate(const TrajectoryView&, const Observation& end) override {
    for (const GoalDecl* goal : g_->latent_goals())
      if (goal->predicate.holds(end.screen_id, end.bindings)) return {goal->intent, goal->predicate};
    return {};
  }

 private:
  std::shared_ptr<const ScreenGraph> g_;
};

inline AgentSuite make_oracle_agents(std::shared_ptr<const ScreenGraph> graph, OracleParams p) {
  AgentSuite s;
  s.infer = std::make_shared<OracleInferAgent>(graph, p);
  s.orchestra = std::make_shared<OracleOrchestraAgent>(graph, p);
  s.judge = std::make_shared<OracleJudgeAgent>(graph, p);
  s.filter = std::make_shared<OracleRecycleFilter>(graph);
  s.generator = std::make_shared<OracleIntentGenerator>(graph);
  return s;
}

/// Test double: returns a fixed candidate list per call, in order; the last list repeats.
class ScriptedInferAgent final : public InferAgent {
 public:
  explicit ScriptedInferAgent(std::vector<std::vector<GuiAction>> script) : script_(std::move(script)) {}

  std::vector<CandidateAction> infer_candidates(const Observation&, const IntentRecord&, std::span<const GuiAction>,
                                                std::span<const GuiAction> already, unsigned k) override {
    std::lock_guard lock(mu_);
    if (script_.empty()) return {};
    const auto& list = script_[std::min(calls_, script_.size() - 1)];
    ++calls_;
    std::vector<CandidateAction> out;
    for (const auto& a : list) {
      if (out.size() >= k) break;
      if (std::find(already.begin(), already.end(), a) != already.end()) continue;
      out.push_back({a, "scripted " + a.summary(), CandidateSource::scripted});
    }
    return out;
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }

 private:
  std::vector<std::vector<GuiAction>> script_;
  std::size_t calls_ = 0;
  mutable std::mutex mu_;
};

}  // namespace m2
