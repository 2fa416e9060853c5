#pragma once

#include <optional>
#include <string>
#include <vector>

#include "agents.hpp"
#include "engine.hpp"
#include "log.hpp"
#include "trajectory.hpp"

namespace m2 {

struct RecycleCandidate {
  std::string tree_id;
  NodeId endpoint = 0;
  MinedTrajectory trajectory;
  double filter_score = 0.0;
  bool evaluated = false;
  std::optional<IntentRecord> generated_intent;
  std::optional<JudgeVerdict> verdict;
  bool accepted = false;
  bool attached = false;  // false for an accepted pair the tree already carried
  std::string note;
};

struct RecycleOptions {
  double threshold = 0.5;
  Stage stage = Stage::stage3;
  unsigned judge_retries = 1;
};

struct RecycleReport {
  std::vector<RecycleCandidate> candidates;
  std::size_t accepted = 0;
  std::size_t attached = 0;
};

/// One candidate per materialized non-root node, in node-id order. Pending nodes have no state and
/// are skipped.
inline std::vector<RecycleCandidate> enumerate_paths(const IntentTree& tree) {
  std::vector<RecycleCandidate> out;
  for (const auto& n : tree.nodes()) {
    if (!n.parent || n.pending()) continue;
    RecycleCandidate c;
    c.tree_id = tree.tree_id();
    c.endpoint = n.node_id;
    c.trajectory = trajectory_to(tree, n.node_id, IntentRecord{});
    out.push_back(std::move(c));
  }
  return out;
}

/// True when the endpoint already carries the tree's original intent.
inline bool is_original_endpoint(const IntentTree& tree, NodeId id) {
  for (const auto& b : tree.intents())
    if (b.endpoint == id && b.intent.intent_id == tree.original_intent().intent_id) return true;
  return false;
}

/// Replays root paths in a private session to recover agent-facing observations.
template <MiningEnvironment Env>
class PathReplayer {
 public:
  explicit PathReplayer(const Env& env) : session_(env.open_session()), root_(session_.snapshot()) {
    start_ = session_.observe();
  }

  const Observation& start() const { return start_; }

  Observation end_of(const MinedTrajectory& t) {
    session_.restore(root_);
    for (const auto& s : t.steps) session_.execute(s.action);
    return session_.observe();
  }

 private:
  typename Env::Session session_;
  decltype(std::declval<typename Env::Session&>().snapshot()) root_;
  Observation start_;
};

inline TrajectoryView view_of(const IntentTree& tree, const RecycleCandidate& c, const Observation& start) {
  return view_of(tree, c.endpoint, start);
}

/// Scores every candidate; survivors (score >= threshold) are returned. Backend failures leave the
/// candidate unevaluated and excluded.
template <MiningEnvironment Env>
std::vector<RecycleCandidate*> filter_candidates(const IntentTree& tree, std::vector<RecycleCandidate>& cands,
                                                 RecycleFilter& filter, double threshold, const Env& env,
                                                 const Logger& log = Logger::null()) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("recycle threshold must lie in [0,1]");
  PathReplayer<Env> replayer(env);
  std::vector<RecycleCandidate*> out;
  for (auto& c : cands) {
    try {
      const Observation end = replayer.end_of(c.trajectory);
      c.filter_score = std::clamp(filter.score(view_of(tree, c, replayer.start()), end), 0.0, 1.0);
      c.evaluated = true;
    } catch (const AgentError& e) {
      c.note = std::string("filter failed: ") + e.what();
      log.warn("recycle.filter_failed", {{"endpoint", c.endpoint}, {"error", e.what()}});
      continue;
    }
    if (c.filter_score >= threshold) out.push_back(&c);
  }
  return out;
}

/// Asks the generator for the intent a trajectory realizes. nullopt (with a note) when it fails or
/// returns nothing.
inline std::optional<IntentRecord> generate_intent(const IntentTree& tree, RecycleCandidate& c, IntentGenerator& gen,
                                                   const TrajectoryView& view, const Observation& end, Stage stage,
                                                   const Logger& log = Logger::null()) {
  GeneratedIntent g;
  try {
    g = gen.generate(view, end);
  } catch (const AgentError& e) {
    c.note = std::string("generator failed: ") + e.what();
    log.warn("recycle.generate_failed", {{"endpoint", c.endpoint}, {"error", e.what()}});
    return std::nullopt;
  }
  if (g.text.empty()) {
    c.note = "generator returned no intent";
    log.info("recycle.empty_intent", {{"endpoint", c.endpoint}});
    return std::nullopt;
  }
  IntentRecord r;
  r.text = g.text;
  r.origin = IntentOrigin::recycled;
  r.stage = stage;
  r.source_tree = tree.tree_id();
  r.parent_intent = tree.original_intent().intent_id;
  r.goal = g.goal;
  r.intent_id = make_intent_id(IntentOrigin::recycled, r.text, tree.tree_id() + "#" + std::to_string(c.endpoint));
  return r;
}

/// Judges the generated intent at the endpoint and attaches it on success.
inline bool verify_and_attach(IntentTree& tree, RecycleCandidate& c, JudgeAgent& judge, const TrajectoryView& view,
                              const Observation& end, unsigned retries = 1, const Logger& log = Logger::null()) {
  if (!c.generated_intent) throw ContractError("verify_and_attach: candidate has no generated intent");
  for (unsigned attempt = 0;; ++attempt) {
    try {
      c.verdict = judge.judge(end, *c.generated_intent, view);
      break;
    } catch (const AgentError& e) {
      if (attempt >= retries) {
        c.note = std::string("judge failed: ") + e.what();
        log.warn("recycle.judge_failed", {{"endpoint", c.endpoint}, {"error", e.what()}});
        return false;
      }
    }
  }
  c.accepted = c.verdict->status == NodeStatus::success;
  if (!c.accepted) {
    c.note = std::string("judge status ") + to_string(c.verdict->status);
    return false;
  }
  c.attached = tree.attach_intent(*c.generated_intent, c.endpoint, NodeStatus::success);
  if (!c.attached) c.note = "already attached";
  c.trajectory.intent = *c.generated_intent;
  c.trajectory.terminal_status = NodeStatus::success;
  return true;
}

/// Full pass: enumerate, skip the original intent's endpoint, filter, generate, verify, attach.
/// Running it twice attaches nothing new.
template <MiningEnvironment Env>
RecycleReport recycle(IntentTree& tree, const Env& env, const AgentSuite& agents, const RecycleOptions& opt = {},
                      const Logger& log = Logger::null()) {
  if (!agents.filter || !agents.generator || !agents.judge)
    throw ContractError("recycling needs a RecycleFilter, an IntentGenerator and a JudgeAgent");
  RecycleReport rep;
  rep.candidates = enumerate_paths(tree);
  std::erase_if(rep.candidates, [&](const RecycleCandidate& c) { return is_original_endpoint(tree, c.endpoint); });
  auto survivors = filter_candidates(tree, rep.candidates, *agents.filter, opt.threshold, env, log);
  PathReplayer<Env> replayer(env);
  for (RecycleCandidate* c : survivors) {
    const Observation end = replayer.end_of(c->trajectory);
    const TrajectoryView view = view_of(tree, *c, replayer.start());
    c->generated_intent = generate_intent(tree, *c, *agents.generator, view, end, opt.stage, log);
    if (!c->generated_intent) continue;
    if (verify_and_attach(tree, *c, *agents.judge, view, end, opt.judge_retries, log)) {
      ++rep.accepted;
      if (c->attached) ++rep.attached;
    }
  }
  tree.check_invariants();
  return rep;
}

inline json to_json(const RecycleCandidate& c) {
  json j{{"endpoint", c.endpoint},
         {"depth", c.trajectory.steps.size()},
         {"score", c.filter_score},
         {"evaluated", c.evaluated},
         {"accepted", c.accepted},
         {"attached", c.attached},
         {"note", c.note}};
  j["intent"] = c.generated_intent ? json(c.generated_intent->text) : json(nullptr);
  j["verdict"] = c.verdict ? to_json(*c.verdict) : json(nullptr);
  return j;
}

inline json to_json(const RecycleReport& r) {
  json cands = json::array();
  for (const auto& c : r.candidates) cands.push_back(to_json(c));
  return {{"accepted", r.accepted}, {"attached", r.attached}, {"candidates", std::move(cands)}};
}

}  // namespace m2
