#pragma once

#include <string>
#include <vector>

#include "agents.hpp"
#include "tree.hpp"

namespace m2 {

struct TrajectoryStep {
  std::string state_ref;  // state before the action
  GuiAction action;
  std::string meta;
  friend bool operator==(const TrajectoryStep&, const TrajectoryStep&) = default;
};

/// Root-to-endpoint path of a tree, labeled with the intent it realizes.
struct MinedTrajectory {
  IntentRecord intent;
  std::vector<TrajectoryStep> steps;
  NodeStatus terminal_status = NodeStatus::intermediate;
  std::string source_tree;
  NodeId endpoint = 0;
  std::string end_state;

  friend bool operator==(const MinedTrajectory&, const MinedTrajectory&) = default;

  std::vector<GuiAction> actions() const {
    std::vector<GuiAction> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.action);
    return out;
  }
};

inline MinedTrajectory trajectory_to(const IntentTree& tree, NodeId endpoint, IntentRecord intent) {
  MinedTrajectory t;
  t.intent = std::move(intent);
  t.source_tree = tree.tree_id();
  t.endpoint = endpoint;
  t.terminal_status = tree.node(endpoint).status;
  t.end_state = tree.node(endpoint).state_ref;
  for (auto& s : path_to(tree, endpoint).steps) t.steps.push_back({std::move(s.from_state), std::move(s.action), std::move(s.meta)});
  return t;
}

/// What the agents see of a root path ending at `id`.
inline TrajectoryView view_of(const IntentTree& tree, NodeId id, const Observation& start) {
  TrajectoryView v;
  v.start = start;
  for (const auto& s : path_to(tree, id).steps) {
    v.actions.push_back(s.action);
    v.descriptions.push_back(s.meta);
    if (tree.node(s.to_node).status == NodeStatus::failure) v.contains_failure = true;
  }
  return v;
}

inline json to_json(const MinedTrajectory& t) {
  json steps = json::array();
  for (const auto& s : t.steps) steps.push_back({{"state_ref", s.state_ref}, {"action", to_json(s.action)}, {"meta", s.meta}});
  return {{"intent", to_json(t.intent)},
          {"steps", std::move(steps)},
          {"terminal_status", to_string(t.terminal_status)},
          {"source_tree", t.source_tree},
          {"endpoint", t.endpoint},
          {"end_state", t.end_state}};
}

inline MinedTrajectory trajectory_from_json(const json& j, const std::string& where = "trajectory") {
  MinedTrajectory t;
  try {
    t.intent = intent_from_json(j.at("intent"), where + ".intent");
    const json& steps = j.at("steps");
    for (std::size_t i = 0; i < steps.size(); ++i)
      t.steps.push_back({steps[i].at("state_ref").get<std::string>(),
                         action_from_json(steps[i].at("action"), where + ".steps[" + std::to_string(i) + "].action"),
                         steps[i].at("meta").get<std::string>()});
    t.terminal_status = node_status_from_string(j.at("terminal_status").get<std::string>());
    t.source_tree = j.at("source_tree").get<std::string>();
    t.endpoint = j.at("endpoint").get<NodeId>();
    t.end_state = j.at("end_state").get<std::string>();
  } catch (const json::exception& e) {
    throw SchemaError(where + ": " + e.what());
  }
  return t;
}

/// Replays actions from `start` in the pure transition function.
struct Replay {
  EnvState end;
  bool all_moved = true;
  std::size_t steps = 0;
};

inline Replay replay(const ScreenGraph& g, EnvState start, std::span<const GuiAction> actions) {
  Replay r{std::move(start)};
  for (const auto& a : actions) {
    if (r.end.terminated) {
      r.all_moved = false;
      break;
    }
    try {
      a.validate(g.bounds);
    } catch (const ValidationError&) {
      r.all_moved = false;
      break;
    }
    Transition t = step(g, r.end, a);
    if (t.outcome != TransitionOutcome::moved) r.all_moved = false;
    r.end = std::move(t.next);
    ++r.steps;
  }
  return r;
}

}  // namespace m2
