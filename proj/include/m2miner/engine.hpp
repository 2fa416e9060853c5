#pragma once

#include <chrono>
#include <concepts>
#include <functional>
#include <limits>
#include <optional>

#include "agents.hpp"
#include "parallel.hpp"
#include "trajectory.hpp"
#include "tree.hpp"

namespace m2 {

enum class MiningMode { accelerated, vanilla, infer_only };
enum class SelectionPolicy { prior_competes, visit_first };
enum class MiningOutcome { success, budget_exhausted };

inline const char* to_string(MiningMode m) {
  switch (m) {
    case MiningMode::accelerated: return "accelerated";
    case MiningMode::vanilla: return "vanilla";
    case MiningMode::infer_only: return "infer_only";
  }
  return "?";
}

inline MiningMode mining_mode_from_string(const std::string& s) {
  for (auto m : {MiningMode::accelerated, MiningMode::vanilla, MiningMode::infer_only})
    if (s == to_string(m)) return m;
  throw ValidationError("unknown mining mode '" + s + "' (expected accelerated|vanilla|infer_only)");
}

inline const char* to_string(SelectionPolicy p) { return p == SelectionPolicy::prior_competes ? "prior_competes" : "visit_first"; }

inline SelectionPolicy selection_policy_from_string(const std::string& s) {
  if (s == "prior_competes") return SelectionPolicy::prior_competes;
  if (s == "visit_first") return SelectionPolicy::visit_first;
  throw ValidationError("unknown selection policy '" + s + "'");
}

inline const char* to_string(MiningOutcome o) { return o == MiningOutcome::success ? "success" : "budget_exhausted"; }

struct MiningConfig {
  unsigned k_candidates = 3;
  double exploration_c = 1.0;
  double prior_B = 1.0;
  double prior_gamma = 0.5;
  std::uint64_t max_iterations = 200;
  unsigned max_depth = 15;
  unsigned max_rollout_steps = 20;
  MiningMode mode = MiningMode::accelerated;
  std::uint64_t rng_seed = 0;
  unsigned agent_retries = 2;
  SelectionPolicy selection = SelectionPolicy::prior_competes;
  double wall_clock_cap_s = 0.0;  // 0 disables the cap

  void validate() const {
    if (k_candidates < 1) throw ValidationError("k_candidates must be >= 1");
    if (!(exploration_c >= 0.0) || !std::isfinite(exploration_c)) throw ValidationError("exploration_c must be >= 0");
    if (!(prior_B >= 0.0) || !std::isfinite(prior_B)) throw ValidationError("prior_B must be >= 0");
    if (!(prior_gamma > 0.0 && prior_gamma < 1.0)) throw ValidationError("prior_gamma must lie in (0,1)");
    if (max_iterations < 1) throw ValidationError("max_iterations must be >= 1");
    if (max_depth < 1) throw ValidationError("max_depth must be >= 1");
    if (!(wall_clock_cap_s >= 0.0)) throw ValidationError("wall_clock_cap_s must be >= 0");
  }
};

inline json to_json(const MiningConfig& c) {
  return {{"k_candidates", c.k_candidates},   {"exploration_c", c.exploration_c},
          {"prior_B", c.prior_B},             {"prior_gamma", c.prior_gamma},
          {"max_iterations", c.max_iterations}, {"max_depth", c.max_depth},
          {"max_rollout_steps", c.max_rollout_steps}, {"mode", to_string(c.mode)},
          {"rng_seed", c.rng_seed},           {"agent_retries", c.agent_retries},
          {"selection", to_string(c.selection)}, {"wall_clock_cap_s", c.wall_clock_cap_s}};
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline MiningConfig config_from_json(const json& j, MiningConfig c = {}, const std::string& where = "mining") {
  if (!j.is_object()) throw ValidationError(where + ": expected object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const json& v = it.value();
      if (k == "k_candidates") c.k_candidates = v.get<unsigned>();
      else if (k == "exploration_c") c.exploration_c = v.get<double>();
      else if (k == "prior_B") c.prior_B = v.get<double>();
      else if (k == "prior_gamma") c.prior_gamma = v.get<double>();
      else if (k == "max_iterations") c.max_iterations = v.get<std::uint64_t>();
      else if (k == "max_depth") c.max_depth = v.get<unsigned>();
      else if (k == "max_rollout_steps") c.max_rollout_steps = v.get<unsigned>();
      else if (k == "mode") c.mode = mining_mode_from_string(v.get<std::string>());
      else if (k == "rng_seed") c.rng_seed = v.get<std::uint64_t>();
      else if (k == "agent_retries") c.agent_retries = v.get<unsigned>();
      else if (k == "selection") c.selection = selection_policy_from_string(v.get<std::string>());
      else if (k == "wall_clock_cap_s") c.wall_clock_cap_s = v.get<double>();
      else throw ValidationError(where + "." + k + ": unknown key");
    }
  } catch (const json::exception& e) {
    throw ValidationError(where + ": " + e.what());
  }
  c.validate();
  return c;
}

template <class E>
concept MiningEnvironment = requires(const E& env, typename E::Session& s, const GuiAction& a, const Observation& o,
                                     const IntentRecord& i) {
  { env.open_session() } -> std::same_as<typename E::Session>;
  { s.observe() } -> std::same_as<Observation>;
  { s.execute(a) } -> std::same_as<std::pair<std::string, TransitionOutcome>>;
  s.restore(s.snapshot());
  { s.env_steps() } -> std::convertible_to<std::uint64_t>;
  { env.legal_actions(o) } -> std::same_as<std::vector<LabeledAction>>;
  { env.goal_check(i, o) } -> std::same_as<GoalStatus>;
  { env.bounds() } -> std::convertible_to<ScreenBounds>;
};

struct MiningResult {
  IntentTree tree;
  MiningOutcome outcome = MiningOutcome::budget_exhausted;
  std::optional<MinedTrajectory> trajectory;
  std::uint64_t iterations_used = 0;  // completed iterations; equals root visit count
  std::uint64_t aborted_iterations = 0;
  std::uint64_t env_steps_used = 0;
  double wall_time_s = 0.0;
  bool timed_out = false;
  bool exhausted = false;         // nothing left to expand
  std::optional<bool> verified;   // ground-truth check of the judged success, when available
};

/// Everything except wall time, so equal runs serialize identically.
inline json to_json(const MiningResult& r) {
  json j{{"outcome", to_string(r.outcome)},
         {"tree_id", r.tree.tree_id()},
         {"intent", to_json(r.tree.original_intent())},
         {"iterations_used", r.iterations_used},
         {"aborted_iterations", r.aborted_iterations},
         {"env_steps_used", r.env_steps_used},
         {"nodes", r.tree.size()},
         {"timed_out", r.timed_out},
         {"exhausted", r.exhausted}};
  j["verified"] = r.verified ? json(*r.verified) : json(nullptr);
  j["trajectory"] = r.trajectory ? to_json(*r.trajectory) : json(nullptr);
  return j;
}

/// Walks from the root to the node the next iteration works on: an expandable node, or a
/// terminal node that is simply re-scored. nullopt when the whole tree is exhausted.
///
/// prior_competes: pending children compete with visited siblings, scored by prior_bonus against
/// UCT. visit_first: every unvisited child is taken before any UCT comparison.
inline std::optional<NodeId> select_leaf(const IntentTree& t, const MiningConfig& cfg) {
  NodeId v = t.root();
  if (t.node(v).exhausted) return std::nullopt;
  for (;;) {
    const TreeNode& n = t.node(v);
    if (n.status != NodeStatus::intermediate) return v;

    bool has_pending = false;
    for (NodeId c : n.children) has_pending |= t.node(c).pending();
    if (n.expandable() && !has_pending) {
      if (cfg.selection == SelectionPolicy::prior_competes || n.children.empty()) return v;
    }

    std::optional<NodeId> best;
    double best_score = -std::numeric_limits<double>::infinity();
    auto consider = [&](NodeId id, double score) {
      const TreeNode& c = t.node(id);
      if (!best || score > best_score ||
          (score == best_score && (c.prior_rank < t.node(*best).prior_rank ||
                                   (c.prior_rank == t.node(*best).prior_rank && id < *best)))) {
        best = id;
        best_score = score;
      }
    };
    auto viable = [&](const TreeNode& c) { return c.pending() || !c.exhausted || c.status == NodeStatus::failure; };

    if (cfg.selection == SelectionPolicy::visit_first) {
      for (NodeId id : n.children) {
        const TreeNode& c = t.node(id);
        if (c.visit_count == 0 && viable(c)) consider(id, c.prior_bonus);
      }
      if (!best && n.expandable()) return v;
    }
    if (!best) {
      for (NodeId id : n.children) {
        const TreeNode& c = t.node(id);
        if (!viable(c)) continue;
        const double s = c.visit_count == 0 ? c.prior_bonus
                                            : uct_score(c.q_value, std::max<std::uint64_t>(n.visit_count, 1), c.visit_count,
                                                        cfg.exploration_c);
        consider(id, s);
      }
    }
    if (!best) return n.expandable() ? std::optional<NodeId>(v) : std::nullopt;
    if (t.node(*best).pending()) return v;
    v = *best;
  }
}

/// Adds `reward` to every node on the root path of `id`.
inline void backpropagate(IntentTree& t, NodeId id, double reward) {
  for (std::optional<NodeId> v = id; v; v = t.node(*v).parent) t.record_reward(*v, reward);
}

inline std::string make_tree_id(const IntentRecord& intent, const MiningConfig& cfg) {
  std::uint64_t h = fnv1a64(intent.intent_id);
  h = fnv1a64(to_string(cfg.mode), h);
  return "t-" + to_hex(mix_seed(cfg.rng_seed, h)).substr(0, 12);
}

/// One MCTS run over one intent. The phases are public so tests can drive them individually.
template <MiningEnvironment Env>
class Miner {
 public:
  using Session = typename Env::Session;
  using Snapshot = decltype(std::declval<Session&>().snapshot());

  Miner(const Env& env, AgentSuite agents, MiningConfig cfg, IntentRecord intent)
      : env_(env),
        agents_(std::move(agents)),
        cfg_(cfg),
        intent_(std::move(intent)),
        session_(env.open_session()),
        rng_(mix_seed(cfg.rng_seed, fnv1a64(intent_.intent_id))) {
    cfg_.validate();
    intent_.validate();
    if (cfg_.mode != MiningMode::vanilla && !agents_.infer) throw ContractError("mode requires an InferAgent");
    if (cfg_.mode == MiningMode::accelerated && (!agents_.orchestra || !agents_.judge))
      throw ContractError("accelerated mode requires OrchestraAgent and JudgeAgent");
    root_obs_ = session_.observe();
    tree_ = IntentTree(make_tree_id(intent_, cfg_), intent_, root_obs_.fingerprint);
    work_.resize(1);
    work_[0].snap = session_.snapshot();
  }

  const IntentTree& tree() const { return tree_; }
  IntentTree& tree() { return tree_; }
  const MiningConfig& config() const { return cfg_; }
  Session& session() { return session_; }

  std::optional<NodeId> select() const { return select_leaf(tree_, cfg_); }

  /// Grows the tree below `v` by one executed action. nullopt when `v` turned out to have nothing
  /// left to try (it is then marked fully expanded).
  std::optional<NodeId> expand(NodeId v) {
    undo_ = Undo{};
    undo_->parent = v;
    undo_->parent_was_full = tree_.node(v).fully_expanded;
    switch (cfg_.mode) {
      case MiningMode::accelerated: return expand_accelerated(v);
      case MiningMode::vanilla: return expand_vanilla(v);
      case MiningMode::infer_only: return expand_infer_only(v);
    }
    return std::nullopt;
  }

  /// Reward of a freshly expanded node, or the fixed reward of a terminal node.
  double simulate(NodeId c) {
    const TreeNode& n = tree_.node(c);
    if (n.status != NodeStatus::intermediate) return terminal_reward(n.status);
    restore(c);
    if (cfg_.mode == MiningMode::accelerated) {
      const Observation obs = session_.observe();
      const TrajectoryView view = view_of(tree_, c, root_obs_);
      const JudgeVerdict v = with_retries([&] { return agents_.judge->judge(obs, intent_, view); });
      const double reward = is_terminal(v.status) ? terminal_reward(v.status)
                                                  : normalize_intermediate_reward(v.logit_valid, v.logit_invalid);
      tree_.set_status(c, v.status);
      if (v.status == NodeStatus::success) {
        try {
          verified_ = env_.goal_check(intent_, obs) == GoalStatus::satisfied;
        } catch (const UnknownIntentError&) {
          verified_.reset();
        }
      }
      return reward;
    }
    return rollout(c);
  }

  void backpropagate(NodeId id, double reward) { m2::backpropagate(tree_, id, reward); }

  /// Runs iterations until success, exhaustion, the iteration budget or the wall-clock cap.
  MiningResult run() {
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
    MiningResult r;
    std::optional<NodeId> success;
    while (iterations_ < cfg_.max_iterations) {
      if (cfg_.wall_clock_cap_s > 0.0 && elapsed() > cfg_.wall_clock_cap_s) {
        r.timed_out = true;
        break;
      }
      const auto leaf = select();
      if (!leaf) {
        r.exhausted = true;
        break;
      }
      try {
        NodeId target = *leaf;
        undo_.reset();
        if (tree_.node(*leaf).status == NodeStatus::intermediate) {
          const auto c = expand(*leaf);
          if (!c) continue;
          target = *c;
        }
        backpropagate(target, simulate(target));
        ++iterations_;
        if (tree_.node(target).status == NodeStatus::success) {
          success = target;
          break;
        }
      } catch (const IterationAborted&) {
        rollback();
        if (++aborted_ > cfg_.max_iterations) break;
      }
    }
    if (success) {
      r.outcome = MiningOutcome::success;
      tree_.attach_intent(intent_, *success);
      r.trajectory = trajectory_to(tree_, *success, intent_);
      r.verified = verified_;
    }
    r.iterations_used = iterations_;
    r.aborted_iterations = aborted_;
    r.env_steps_used = session_.env_steps();
    r.wall_time_s = elapsed();
    r.tree = tree_;
    return r;
  }

 private:
  struct IterationAborted {};

  struct NodeWork {
    std::optional<Snapshot> snap;
    bool generated = false;
    std::vector<GuiAction> tried;
    std::vector<CandidateAction> pool;
  };

  // Tree mutations of the current expansion, reverted if the iteration aborts.
  struct Undo {
    NodeId parent = 0;
    bool parent_was_full = false;
    std::size_t created = 0;
    std::optional<NodeId> materialized;
    bool generated = false;
    bool tried = false;
    std::optional<std::pair<std::size_t, CandidateAction>> pool_taken;
  };

  template <class F>
  auto with_retries(F&& f) -> decltype(f()) {
    for (unsigned attempt = 0;; ++attempt) {
      try {
        return f();
      } catch (const AgentError& e) {
        if (!e.retryable() || attempt >= cfg_.agent_retries) throw IterationAborted{};
      }
    }
  }

  void restore(NodeId id) {
    if (!work_[id].snap) throw ContractError("no snapshot for node " + std::to_string(id));
    session_.restore(*work_[id].snap);
  }

  std::vector<GuiAction> history(NodeId id) const {
    std::vector<GuiAction> h;
    for (auto& s : path_to(tree_, id).steps) h.push_back(std::move(s.action));
    return h;
  }

  bool valid(const GuiAction& a) const {
    try {
      a.validate(env_.bounds());
      return true;
    } catch (const ValidationError&) {
      return false;
    }
  }

  void grow_work() { work_.resize(tree_.size()); }

  // Executes a materialized-to-be child and records its state.
  void execute_child(NodeId c) {
    const auto [fp, outcome] = session_.execute(*tree_.node(c).action);
    tree_.materialize(c, fp, outcome);
    undo_->materialized = c;
    grow_work();
    work_[c].snap = session_.snapshot();
  }

  // Depth-capped or terminated nodes get no children.
  void cap_depth(NodeId c) {
    const TreeNode& n = tree_.node(c);
    if (n.depth >= cfg_.max_depth || n.outcome == TransitionOutcome::terminated) tree_.set_fully_expanded(c, true);
  }

  void mark_full(NodeId v) { tree_.set_fully_expanded(v, true); }

  std::optional<NodeId> expand_accelerated(NodeId v) {
    restore(v);
    if (!work_[v].generated) {
      const Observation obs = session_.observe();
      const auto hist = history(v);
      auto cands = with_retries([&] {
        return agents_.infer->infer_candidates(obs, intent_, hist, std::span<const GuiAction>{}, cfg_.k_candidates);
      });
      std::erase_if(cands, [&](const CandidateAction& c) { return !valid(c.action); });
      if (cands.empty()) {
        mark_full(v);
        return std::nullopt;
      }
      RankedActions ranked = with_retries([&] { return agents_.orchestra->orchestrate(obs, intent_, cands); });
      std::erase_if(ranked.actions, [&](const CandidateAction& c) { return !valid(c.action); });
      if (ranked.actions.empty()) {
        mark_full(v);
        return std::nullopt;
      }
      for (unsigned i = 0; i < ranked.actions.size(); ++i) {
        tree_.add_child(v, ranked.actions[i].action, ranked.actions[i].rationale, i,
                        prior_bonus(i, cfg_.prior_B, cfg_.prior_gamma));
        ++undo_->created;
      }
      grow_work();
      work_[v].generated = true;
      undo_->generated = true;
    }
    std::optional<NodeId> pick;
    std::size_t pending = 0;
    for (NodeId c : tree_.node(v).children) {
      const TreeNode& n = tree_.node(c);
      if (!n.pending()) continue;
      ++pending;
      if (!pick || n.prior_bonus > tree_.node(*pick).prior_bonus ||
          (n.prior_bonus == tree_.node(*pick).prior_bonus && n.prior_rank < tree_.node(*pick).prior_rank))
        pick = c;
    }
    if (!pick) {
      mark_full(v);
      return std::nullopt;
    }
    execute_child(*pick);
    if (pending == 1) mark_full(v);
    cap_depth(*pick);
    return pick;
  }

  // Child for an action chosen without ranking; status comes from the environment's goal check.
  NodeId add_unranked(NodeId v, const GuiAction& a, const std::string& meta) {
    const unsigned rank = static_cast<unsigned>(tree_.node(v).children.size());
    const NodeId c = tree_.add_child(v, a, meta, rank, prior_bonus(rank, cfg_.prior_B, cfg_.prior_gamma));
    ++undo_->created;
    execute_child(c);
    switch (env_.goal_check(intent_, session_.observe())) {
      case GoalStatus::satisfied: tree_.set_status(c, NodeStatus::success); break;
      case GoalStatus::violated: tree_.set_status(c, NodeStatus::failure); break;
      case GoalStatus::open: break;
    }
    cap_depth(c);
    return c;
  }

  std::optional<NodeId> expand_vanilla(NodeId v) {
    restore(v);
    std::vector<LabeledAction> untried;
    for (auto& la : env_.legal_actions(session_.observe())) {
      const auto& tried = work_[v].tried;
      if (valid(la.action) && std::find(tried.begin(), tried.end(), la.action) == tried.end()) untried.push_back(std::move(la));
    }
    if (untried.empty()) {
      mark_full(v);
      return std::nullopt;
    }
    const LabeledAction& pick = untried[rng_.index(untried.size())];
    work_[v].tried.push_back(pick.action);
    undo_->tried = true;
    if (untried.size() == 1) mark_full(v);
    return add_unranked(v, pick.action, pick.label);
  }

  std::optional<NodeId> expand_infer_only(NodeId v) {
    restore(v);
    if (!work_[v].generated) {
      const Observation obs = session_.observe();
      const auto hist = history(v);
      auto pool = with_retries([&] {
        return agents_.infer->infer_candidates(obs, intent_, hist, std::span<const GuiAction>{}, cfg_.k_candidates);
      });
      std::erase_if(pool, [&](const CandidateAction& c) { return !valid(c.action); });
      work_[v].pool = std::move(pool);
      work_[v].generated = true;
      undo_->generated = true;
    }
    auto& pool = work_[v].pool;
    if (pool.empty()) {
      mark_full(v);
      return std::nullopt;
    }
    const std::size_t i = rng_.index(pool.size());
    CandidateAction pick = pool[i];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
    undo_->pool_taken = std::make_pair(i, pick);
    if (pool.empty()) mark_full(v);
    return add_unranked(v, pick.action, pick.rationale);
  }

  double rollout(NodeId c) {
    std::vector<GuiAction> hist = cfg_.mode == MiningMode::infer_only ? history(c) : std::vector<GuiAction>{};
    Observation obs = session_.observe();
    for (unsigned i = 0; i < cfg_.max_rollout_steps; ++i) {
      GuiAction a;
      if (cfg_.mode == MiningMode::vanilla) {
        auto legal = env_.legal_actions(obs);
        if (legal.empty()) break;
        a = legal[rng_.index(legal.size())].action;
      } else {
        auto top = with_retries([&] {
          return agents_.infer->infer_candidates(obs, intent_, hist, std::span<const GuiAction>{}, 1);
        });
        if (top.empty()) break;
        a = top.front().action;
      }
      if (!valid(a)) break;
      const auto outcome = session_.execute(a).second;
      hist.push_back(a);
      if (outcome == TransitionOutcome::terminated) break;
      obs = session_.observe();
      switch (env_.goal_check(intent_, obs)) {
        case GoalStatus::satisfied: return 1.0;
        case GoalStatus::violated: return 0.0;
        case GoalStatus::open: break;
      }
    }
    return 0.0;
  }

  void rollback() {
    if (!undo_) return;
    Undo& u = *undo_;
    if (u.created > 0) {
      tree_.pop_nodes(u.created);
      work_.resize(tree_.size());
    } else if (u.materialized) {
      tree_.unmaterialize(*u.materialized);
      work_[*u.materialized] = NodeWork{};
    }
    if (u.generated) {
      work_[u.parent].generated = false;
      work_[u.parent].pool.clear();
    }
    if (u.tried) work_[u.parent].tried.pop_back();
    if (u.pool_taken) {
      auto& pool = work_[u.parent].pool;
      pool.insert(pool.begin() + static_cast<std::ptrdiff_t>(u.pool_taken->first), u.pool_taken->second);
    }
    tree_.set_fully_expanded(u.parent, u.parent_was_full);
    undo_.reset();
  }

  const Env& env_;
  AgentSuite agents_;
  MiningConfig cfg_;
  IntentRecord intent_;
  Session session_;
  Rng rng_;
  Observation root_obs_;
  IntentTree tree_;
  std::vector<NodeWork> work_;
  std::optional<Undo> undo_;
  std::optional<bool> verified_;
  std::uint64_t iterations_ = 0;
  std::uint64_t aborted_ = 0;
};

template <MiningEnvironment Env>
MiningResult mine(const IntentRecord& intent, const Env& env, const AgentSuite& agents, const MiningConfig& cfg) {
  return Miner<Env>(env, agents, cfg, intent).run();
}

}  // namespace m2
