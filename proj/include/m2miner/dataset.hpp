#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "engine.hpp"
#include "io.hpp"
#include "trajectory.hpp"

namespace m2 {

inline constexpr const char* kDataSchema = "m2data/1";

// ---------------------------------------------------------------------------------------------
// Trajectories and preference pairs

/// Every (intent, endpoint) binding of the tree as a trajectory, in binding order.
inline std::vector<MinedTrajectory> collect_trajectories(const IntentTree& tree) {
  std::vector<MinedTrajectory> out;
  for (const auto& b : tree.intents()) {
    MinedTrajectory t = trajectory_to(tree, b.endpoint, b.intent);
    t.terminal_status = b.judged;
    out.push_back(std::move(t));
  }
  return out;
}

struct PreferencePair {
  IntentRecord intent;
  std::string source_tree;
  NodeId parent = 0;
  std::string state_ref;
  std::vector<GuiAction> history;
  GuiAction chosen;
  NodeId chosen_node = 0;
  GuiAction rejected;
  NodeId rejected_node = 0;
  double rejected_q = 0.0;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

/// For each step of the trajectory, up to `cap` executed siblings of the chosen child whose
/// status is not success, lowest Q first (ties by node id).
inline std::vector<PreferencePair> preference_pairs(const IntentTree& tree, const MinedTrajectory& t,
                                                    std::size_t cap = 3) {
  std::vector<PreferencePair> out;
  if (t.terminal_status != NodeStatus::success) return out;
  const Path path = path_to(tree, t.endpoint);
  std::vector<GuiAction> history;
  std::vector<GuiAction> on_path;
  for (const auto& s : path.steps) on_path.push_back(s.action);
  NodeId from = tree.root();
  for (const auto& s : path.steps) {
    const TreeNode& parent = tree.node(from);
    std::vector<const TreeNode*> negs;
    for (NodeId c : parent.children) {
      if (c == s.to_node) continue;
      const TreeNode& n = tree.node(c);
      if (n.pending() || n.status == NodeStatus::success) continue;
      if (!n.action || std::find(on_path.begin(), on_path.end(), *n.action) != on_path.end()) continue;
      negs.push_back(&n);
    }
    std::sort(negs.begin(), negs.end(), [](const TreeNode* a, const TreeNode* b) {
      if (a->q_value != b->q_value) return a->q_value < b->q_value;
      return a->node_id < b->node_id;
    });
    if (negs.size() > cap) negs.resize(cap);
    for (const TreeNode* n : negs) {
      PreferencePair p;
      p.intent = t.intent;
      p.source_tree = tree.tree_id();
      p.parent = from;
      p.state_ref = s.from_state;
      p.history = history;
      p.chosen = s.action;
      p.chosen_node = s.to_node;
      p.rejected = *n->action;
      p.rejected_node = n->node_id;
      p.rejected_q = n->q_value;
      out.push_back(std::move(p));
    }
    history.push_back(s.action);
    from = s.to_node;
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// JSONL export

enum class Channel { ACT, DES, PREF };

inline const char* to_string(Channel c) {
  switch (c) {
    case Channel::ACT: return "ACT";
    case Channel::DES: return "DES";
    case Channel::PREF: return "PREF";
  }
  return "?";
}

inline Channel channel_from_string(const std::string& s) {
  for (auto c : {Channel::ACT, Channel::DES, Channel::PREF})
    if (s == to_string(c)) return c;
  throw ValidationError("unknown channel '" + s + "' (expected ACT, DES or PREF)");
}

inline const char* channel_file(Channel c) {
  switch (c) {
    case Channel::ACT: return "act.jsonl";
    case Channel::DES: return "des.jsonl";
    case Channel::PREF: return "pref.jsonl";
  }
  return "?";
}

/// Compact dump; nlohmann objects keep keys sorted and doubles print as shortest round-trip text,
/// so equal inputs give equal bytes.
inline std::string canonical_line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::strict) + "\n"; }

inline json act_row(const MinedTrajectory& t, std::size_t i, bool with_meta) {
  json j{{"schema", kDataSchema},
         {"channel", with_meta ? "DES" : "ACT"},
         {"intent", to_json(t.intent)},
         {"source_tree", t.source_tree},
         {"endpoint", t.endpoint},
         {"end_state", t.end_state},
         {"terminal_status", to_string(t.terminal_status)},
         {"step", i},
         {"steps", t.steps.size()},
         {"state_ref", t.steps[i].state_ref},
         {"action", to_json(t.steps[i].action)}};
  if (with_meta) j["meta"] = t.steps[i].meta;
  return j;
}

inline json to_json(const PreferencePair& p) {
  json hist = json::array();
  for (const auto& a : p.history) hist.push_back(to_json(a));
  return {{"schema", kDataSchema},
          {"channel", "PREF"},
          {"intent", to_json(p.intent)},
          {"source_tree", p.source_tree},
          {"node", p.parent},
          {"state_ref", p.state_ref},
          {"history", std::move(hist)},
          {"chosen", to_json(p.chosen)},
          {"chosen_node", p.chosen_node},
          {"rejected", to_json(p.rejected)},
          {"rejected_node", p.rejected_node},
          {"rejected_q", p.rejected_q}};
}

struct ExportOptions {
  std::vector<Channel> channels{Channel::ACT, Channel::DES, Channel::PREF};
  std::size_t pref_cap = 3;
};

struct ExportResult {
  std::map<std::string, std::string> files;  // channel -> file contents
  json manifest;
};

/// Builds every channel in memory. Only successful, non-empty trajectories become rows.
inline ExportResult build_export(std::span<const IntentTree> trees, const ExportOptions& opt = {}) {
  std::map<Channel, std::string> body;
  std::map<Channel, std::size_t> rows;
  std::size_t n_traj = 0;
  for (Channel c : opt.channels) body[c], rows[c] = 0;
  for (const auto& tree : trees) {
    for (const auto& t : collect_trajectories(tree)) {
      if (t.terminal_status != NodeStatus::success || t.steps.empty()) continue;
      ++n_traj;
      for (Channel c : opt.channels) {
        if (c == Channel::PREF) {
          for (const auto& p : preference_pairs(tree, t, opt.pref_cap)) {
            body[c] += canonical_line(to_json(p));
            ++rows[c];
          }
          continue;
        }
        for (std::size_t i = 0; i < t.steps.size(); ++i) {
          body[c] += canonical_line(act_row(t, i, c == Channel::DES));
          ++rows[c];
        }
      }
    }
  }
  ExportResult r;
  json files = json::object();
  for (Channel c : opt.channels) {
    r.files[channel_file(c)] = body[c];
    files[to_string(c)] = {{"file", channel_file(c)}, {"rows", rows[c]}, {"fnv1a64", to_hex(fnv1a64(body[c]))}};
  }
  r.manifest = {{"schema", kDataSchema}, {"trees", trees.size()}, {"trajectories", n_traj}, {"channels", files},
                {"pref_cap", opt.pref_cap}};
  return r;
}

inline json export_trajectories(std::span<const IntentTree> trees, const std::filesystem::path& out_dir,
                                const ExportOptions& opt = {}) {
  ExportResult r = build_export(trees, opt);
  for (const auto& [name, content] : r.files) write_file_atomic(out_dir / name, content);
  write_file_atomic(out_dir / "manifest.json", r.manifest.dump(2) + "\n");
  return r.manifest;
}

/// Rebuilds trajectories from DES rows (the channel that carries every step field).
inline std::vector<MinedTrajectory> import_trajectories(const std::string& des_jsonl) {
  std::vector<MinedTrajectory> out;
  std::istringstream in(des_jsonl);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
    try {
      if (j.at("schema") != kDataSchema) throw SchemaError(where + ": schema must be " + std::string(kDataSchema));
      if (j.at("channel") != "DES") throw SchemaError(where + ": expected a DES row");
      const std::size_t step = j.at("step").get<std::size_t>();
      if (step == 0) {
        MinedTrajectory t;
        t.intent = intent_from_json(j.at("intent"), where + ".intent");
        t.source_tree = j.at("source_tree").get<std::string>();
        t.endpoint = j.at("endpoint").get<NodeId>();
        t.end_state = j.at("end_state").get<std::string>();
        t.terminal_status = node_status_from_string(j.at("terminal_status").get<std::string>());
        out.push_back(std::move(t));
      }
      if (out.empty() || out.back().steps.size() != step)
        throw SchemaError(where + ": step " + std::to_string(step) + " out of sequence");
      out.back().steps.push_back({j.at("state_ref").get<std::string>(),
                                  action_from_json(j.at("action"), where + ".action"), j.at("meta").get<std::string>()});
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Metrics

struct StepMetrics {
  double sr = 0.0;
  double tp = 0.0;
};

/// SR counts exact action matches, TP counts matching action kinds.
inline StepMetrics compute_sr_tp(std::span<const GuiAction> predicted, std::span<const GuiAction> truth) {
  if (predicted.size() != truth.size())
    throw ValidationError("compute_sr_tp: " + std::to_string(predicted.size()) + " predictions for " +
                          std::to_string(truth.size()) + " labels");
  if (truth.empty()) throw ValidationError("compute_sr_tp: no steps");
  std::size_t exact = 0, type = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i].kind() == truth[i].kind()) ++type;
    if (predicted[i] == truth[i]) ++exact;
  }
  const double n = static_cast<double>(truth.size());
  return {static_cast<double>(exact) / n, static_cast<double>(type) / n};
}

inline double compute_msr(std::span<const MiningOutcome> outcomes) {
  if (outcomes.empty()) throw ValidationError("compute_msr: no mining attempts");
  const auto ok = std::count(outcomes.begin(), outcomes.end(), MiningOutcome::success);
  return static_cast<double>(ok) / static_cast<double>(outcomes.size());
}

inline double compute_msr(std::span<const MiningResult> results) {
  std::vector<MiningOutcome> o;
  for (const auto& r : results) o.push_back(r.outcome);
  return compute_msr(o);
}

/// Replays the trajectory from the initial state: correct iff every action moves the state and the
/// final state satisfies the intent.
inline bool trajectory_correct(const ScreenGraph& g, const MinedTrajectory& t) {
  const Replay r = replay(g, g.initial_state(), t.actions());
  if (!r.all_moved || r.steps != t.steps.size()) return false;
  return goal_check(g, t.intent, r.end) == GoalStatus::satisfied;
}

inline double compute_dqa(std::span<const MinedTrajectory> trajectories, const ScreenGraph& g) {
  if (trajectories.empty()) throw ValidationError("compute_dqa: no trajectories");
  std::size_t ok = 0;
  for (const auto& t : trajectories) ok += trajectory_correct(g, t);
  return static_cast<double>(ok) / static_cast<double>(trajectories.size());
}

// ---------------------------------------------------------------------------------------------
// Cost

struct ComputeBudget {
  double hours = 0.0;
  double gpus = 0.0;
  double price_per_gpu_hour = 0.0;
  double cost() const { return hours * gpus * price_per_gpu_hour; }
};

struct CostParams {
  double r_wage = 7.0;
  double t_annot = 0.05;
  double t_inspect = 0.0014;
  ComputeBudget train{24.0, 8.0, 0.924};
  ComputeBudget mine{26.7, 8.0, 0.433};

  void validate() const {
    for (double v : {r_wage, t_annot, t_inspect, train.hours, train.gpus, train.price_per_gpu_hour, mine.hours,
                     mine.gpus, mine.price_per_gpu_hour})
      if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("cost parameters must be finite and non-negative");
  }
};

enum class Pipeline { manual, mined };

inline const char* to_string(Pipeline p) { return p == Pipeline::manual ? "manual" : "mined"; }

inline Pipeline pipeline_from_string(const std::string& s) {
  if (s == "manual") return Pipeline::manual;
  if (s == "mined") return Pipeline::mined;
  throw ValidationError("unknown pipeline '" + s + "' (expected manual or mined)");
}

struct CostBreakdown {
  Pipeline pipeline = Pipeline::manual;
  double n_img = 0;
  double annotation = 0.0;
  double inspection = 0.0;
  double compute = 0.0;
  double total = 0.0;
};

/// Manual: every image is annotated and inspected at the wage rate. Mined: only inspection is
/// paid by the hour, plus training and mining GPU time.
inline CostBreakdown estimate_cost(const CostParams& p, double n_img, Pipeline pipeline) {
  p.validate();
  if (!(n_img >= 0.0) || !std::isfinite(n_img)) throw ValidationError("n_img must be finite and non-negative");
  CostBreakdown b;
  b.pipeline = pipeline;
  b.n_img = n_img;
  b.inspection = n_img * p.t_inspect * p.r_wage;
  if (pipeline == Pipeline::manual) {
    b.annotation = n_img * p.t_annot * p.r_wage;
    b.total = n_img * (p.t_annot + p.t_inspect) * p.r_wage;
  } else {
    b.compute = p.train.cost() + p.mine.cost();
    b.total = b.inspection + b.compute;
  }
  return b;
}

inline std::string cost_csv_header() { return "label,pipeline,n_img,annotation,inspection,compute,total,total_rounded\n"; }

inline std::string cost_csv_row(const std::string& label, const CostBreakdown& b) {
  std::ostringstream o;
  o << csv_field(label) << ',' << to_string(b.pipeline) << ',' << fixed(b.n_img, 0) << ',' << fixed(b.annotation, 4)
    << ',' << fixed(b.inspection, 4) << ',' << fixed(b.compute, 4) << ',' << fixed(b.total, 4) << ','
    << fixed(std::round(b.total), 0) << '\n';
  return o.str();
}

inline json to_json(const CostBreakdown& b) {
  return {{"pipeline", to_string(b.pipeline)}, {"n_img", b.n_img},       {"annotation", b.annotation},
          {"inspection", b.inspection},        {"compute", b.compute},   {"total", b.total}};
}

}  // namespace m2
