#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "action.hpp"
#include "formulas.hpp"
#include "intent.hpp"
#include "util.hpp"

namespace m2 {

using NodeId = std::uint32_t;

inline constexpr const char* kTreeSchema = "m2tree/1";

/// One state of the intent-trajectory tree. A node is *pending* while the orchestrator has ranked its
/// action but the environment has not executed it yet; pending nodes have no state_ref.
struct TreeNode {
  NodeId node_id = 0;
  std::optional<NodeId> parent;
  std::optional<GuiAction> action;  // arriving action; absent on the root
  std::string state_ref;
  std::string meta;
  double q_value = 0.0;
  std::uint64_t visit_count = 0;
  NodeStatus status = NodeStatus::intermediate;
  unsigned prior_rank = 0;
  double prior_bonus = 0.0;
  unsigned depth = 0;
  bool materialized = false;
  bool fully_expanded = false;
  std::optional<TransitionOutcome> outcome;
  std::vector<NodeId> children;
  bool exhausted = false;  // derived: nothing in this subtree can still be expanded

  bool pending() const { return !materialized; }
  /// Can itself receive more children.
  bool expandable() const { return materialized && status == NodeStatus::intermediate && !fully_expanded; }
};

struct Edge {
  NodeId parent;
  GuiAction action;
  NodeId child;
};

/// The original intent's endpoint is a success node. A recycled intent's endpoint may be an interior
/// node (it was intermediate for the original intent); its success comes from the judge and is
/// recorded here.
struct IntentBinding {
  IntentRecord intent;
  NodeId endpoint;
  NodeStatus judged = NodeStatus::success;
};

struct PathStep {
  std::string from_state;
  GuiAction action;
  NodeId to_node;
  std::string meta;
};

/// Root-to-node route. `steps.size()` equals the node's depth.
struct Path {
  std::string root_state;
  std::vector<PathStep> steps;
};

class IntentTree {
 public:
  IntentTree() = default;

  IntentTree(std::string tree_id, IntentRecord original_intent, std::string root_state)
      : tree_id_(std::move(tree_id)), original_intent_(std::move(original_intent)) {
    TreeNode root;
    root.state_ref = std::move(root_state);
    root.materialized = true;
    root.meta = "initial state";
    nodes_.push_back(std::move(root));
  }

  const std::string& tree_id() const { return tree_id_; }
  const IntentRecord& original_intent() const { return original_intent_; }
  NodeId root() const { return 0; }
  std::size_t size() const { return nodes_.size(); }
  bool contains(NodeId id) const { return id < nodes_.size(); }

  const TreeNode& node(NodeId id) const {
    if (!contains(id)) throw NotFoundError("tree " + tree_id_ + ": no node " + std::to_string(id));
    return nodes_[id];
  }

  std::span<const TreeNode> nodes() const { return nodes_; }
  const std::vector<IntentBinding>& intents() const { return intents_; }

  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (const auto& n : nodes_)
      if (n.parent) out.push_back({*n.parent, *n.action, n.node_id});
    return out;
  }

  /// Appends a pending child. prior_rank must be the next dense rank among the parent's children.
  NodeId add_child(NodeId parent, GuiAction action, std::string meta, unsigned prior_rank, double bonus) {
    TreeNode& p = mut(parent);
    if (p.status == NodeStatus::success) throw ContractError("cannot add children to a success node");
    if (!p.materialized) throw ContractError("cannot add children to a pending node");
    TreeNode c;
    c.node_id = static_cast<NodeId>(nodes_.size());
    c.parent = parent;
    c.action = std::move(action);
    c.meta = std::move(meta);
    c.prior_rank = prior_rank;
    c.prior_bonus = bonus;
    c.depth = p.depth + 1;
    p.children.push_back(c.node_id);
    nodes_.push_back(std::move(c));
    refresh(parent);
    return nodes_.back().node_id;
  }

  void materialize(NodeId id, std::string state_ref, TransitionOutcome outcome) {
    TreeNode& n = mut(id);
    if (n.materialized) throw ContractError("node " + std::to_string(id) + " already materialized");
    n.state_ref = std::move(state_ref);
    n.outcome = outcome;
    n.materialized = true;
    refresh(id);
  }

  /// Undo of materialize for an aborted iteration. Only valid while the node is still unvisited.
  void unmaterialize(NodeId id) {
    TreeNode& n = mut(id);
    if (n.visit_count != 0 || !n.children.empty()) throw ContractError("cannot unmaterialize a visited node");
    n.state_ref.clear();
    n.outcome.reset();
    n.materialized = false;
    n.status = NodeStatus::intermediate;
    n.fully_expanded = false;
    refresh(id);
  }

  /// Removes the most recently appended nodes, which must be unvisited leaves. Used to undo an expansion.
  void pop_nodes(std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      if (nodes_.size() <= 1) throw ContractError("cannot remove the root");
      const TreeNode& last = nodes_.back();
      if (last.visit_count != 0 || !last.children.empty()) throw ContractError("cannot remove a visited node");
      auto& siblings = nodes_[*last.parent].children;
      siblings.erase(std::find(siblings.begin(), siblings.end(), last.node_id));
      const NodeId parent = *last.parent;
      nodes_.pop_back();
      refresh(parent);
    }
  }

  void set_status(NodeId id, NodeStatus s) {
    TreeNode& n = mut(id);
    if (s == NodeStatus::success && !n.children.empty()) throw ContractError("success node must be a leaf");
    n.status = s;
    refresh(id);
  }

  void set_meta(NodeId id, std::string meta) { mut(id).meta = std::move(meta); }
  void set_fully_expanded(NodeId id, bool v) {
    mut(id).fully_expanded = v;
    refresh(id);
  }

  /// Folds one reward into the node's running mean. Rewards are clamped into [0,1] here.
  void record_reward(NodeId id, double reward) {
    if (std::isnan(reward)) throw DomainError("reward is NaN");
    TreeNode& n = mut(id);
    auto u = update_q(n.q_value, n.visit_count, std::clamp(reward, 0.0, 1.0));
    n.q_value = u.q;
    n.visit_count = u.n;
  }

  /// Records that the root path to `endpoint` realizes `intent`. Returns false for an exact duplicate.
  /// Without `judged` the node itself must have success status; a recycled intent passes the
  /// judge's status for the endpoint instead, which must be success.
  bool attach_intent(IntentRecord intent, NodeId endpoint, std::optional<NodeStatus> judged = std::nullopt) {
    const TreeNode& n = node(endpoint);
    if (endpoint == root()) throw ContractError("intent endpoint must not be the root");
    const NodeStatus status = judged.value_or(n.status);
    if (status != NodeStatus::success)
      throw ContractError("intent endpoint " + std::to_string(endpoint) + " is not a success node");
    if (!n.materialized) throw ContractError("intent endpoint " + std::to_string(endpoint) + " is pending");
    for (const auto& b : intents_)
      if (b.endpoint == endpoint && b.intent.text == intent.text) return false;
    intents_.push_back({std::move(intent), endpoint, status});
    return true;
  }

  /// Throws ContractError describing the first violated structural invariant.
  void check_invariants() const {
    auto fail = [&](const std::string& msg) { throw ContractError("tree " + tree_id_ + ": " + msg); };
    if (nodes_.empty()) fail("no root");
    if (nodes_[0].parent) fail("root has a parent");
    std::vector<int> seen(nodes_.size(), 0);
    std::vector<NodeId> stack{0};
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      if (seen[id]++) fail("node " + std::to_string(id) + " reached twice (cycle or shared child)");
      const TreeNode& n = nodes_[id];
      if (n.node_id != id) fail("node id mismatch at " + std::to_string(id));
      if (n.visit_count >= 1 && !(n.q_value >= 0.0 && n.q_value <= 1.0)) fail("q out of range at " + std::to_string(id));
      if (n.status == NodeStatus::success && !n.children.empty()) fail("success node " + std::to_string(id) + " has children");
      std::set<unsigned> ranks;
      for (NodeId c : n.children) {
        if (c >= nodes_.size()) fail("dangling child " + std::to_string(c));
        const TreeNode& ch = nodes_[c];
        if (!ch.parent || *ch.parent != id) fail("child " + std::to_string(c) + " does not point back to " + std::to_string(id));
        if (!ch.action) fail("non-root node " + std::to_string(c) + " has no action");
        if (ch.depth != n.depth + 1) fail("depth mismatch at " + std::to_string(c));
        if (!ranks.insert(ch.prior_rank).second) fail("duplicate prior_rank under " + std::to_string(id));
        stack.push_back(c);
      }
      if (!ranks.empty() && *ranks.rbegin() != ranks.size() - 1) fail("sibling ranks under " + std::to_string(id) + " are not dense");
      if (n.exhausted != compute_exhausted(n)) fail("stale exhaustion flag at " + std::to_string(id));
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (!seen[i]) fail("node " + std::to_string(i) + " unreachable from root");
    for (const auto& b : intents_) {
      if (b.endpoint >= nodes_.size() || b.endpoint == 0) fail("intent endpoint out of range");
      if (b.judged != NodeStatus::success) fail("intent endpoint " + std::to_string(b.endpoint) + " is not success");
      if (b.intent.origin != IntentOrigin::recycled && nodes_[b.endpoint].status != NodeStatus::success)
        fail("intent endpoint " + std::to_string(b.endpoint) + " is not a success node");
      b.intent.validate();
    }
  }

  // serialization needs raw access
  friend IntentTree tree_from_json(const json& j);

 private:
  bool compute_exhausted(const TreeNode& n) const {
    if (n.pending() || n.expandable()) return false;
    return std::all_of(n.children.begin(), n.children.end(), [&](NodeId c) { return nodes_[c].exhausted; });
  }

  // Recomputes the exhaustion flag at `id` and upward while it changes.
  void refresh(NodeId id) {
    for (;;) {
      TreeNode& n = nodes_[id];
      const bool e = compute_exhausted(n);
      if (e == n.exhausted) return;
      n.exhausted = e;
      if (!n.parent) return;
      id = *n.parent;
    }
  }

  void refresh_all() {
    for (std::size_t i = nodes_.size(); i-- > 0;) nodes_[i].exhausted = compute_exhausted(nodes_[i]);
  }

  TreeNode& mut(NodeId id) {
    if (!contains(id)) throw NotFoundError("tree " + tree_id_ + ": no node " + std::to_string(id));
    return nodes_[id];
  }

  std::string tree_id_;
  IntentRecord original_intent_;
  std::vector<TreeNode> nodes_;
  std::vector<IntentBinding> intents_;
};

inline Path path_to(const IntentTree& tree, NodeId id) {
  std::vector<NodeId> chain;
  for (const TreeNode* n = &tree.node(id); n->parent; n = &tree.node(*n->parent)) chain.push_back(n->node_id);
  std::reverse(chain.begin(), chain.end());
  Path p;
  p.root_state = tree.node(tree.root()).state_ref;
  for (NodeId c : chain) {
    const TreeNode& n = tree.node(c);
    p.steps.push_back({tree.node(*n.parent).state_ref, *n.action, c, n.meta});
  }
  return p;
}

inline json to_json(const IntentTree& t) {
  json j;
  j["schema"] = kTreeSchema;
  j["tree_id"] = t.tree_id();
  j["root"] = t.root();
  j["original_intent"] = to_json(t.original_intent());
  json nodes = json::array();
  for (const auto& n : t.nodes()) {
    json jn;
    jn["id"] = n.node_id;
    jn["state_ref"] = n.state_ref;
    jn["meta"] = n.meta;
    jn["q"] = n.q_value;
    jn["n"] = n.visit_count;
    jn["status"] = to_string(n.status);
    jn["prior_rank"] = n.prior_rank;
    jn["prior_bonus"] = n.prior_bonus;
    jn["depth"] = n.depth;
    jn["materialized"] = n.materialized;
    jn["fully_expanded"] = n.fully_expanded;
    jn["outcome"] = n.outcome ? json(to_string(*n.outcome)) : json(nullptr);
    nodes.push_back(std::move(jn));
  }
  j["nodes"] = std::move(nodes);
  json edges = json::array();
  for (const auto& e : t.edges()) edges.push_back({{"parent", e.parent}, {"child", e.child}, {"action", to_json(e.action)}});
  j["edges"] = std::move(edges);
  json intents = json::array();
  for (const auto& b : t.intents())
    intents.push_back({{"intent", to_json(b.intent)}, {"endpoint", b.endpoint}, {"judged", to_string(b.judged)}});
  j["intents"] = std::move(intents);
  return j;
}

inline IntentTree tree_from_json(const json& j) {
  if (!j.is_object() || j.value("schema", "") != kTreeSchema) throw SchemaError("tree: expected schema \"m2tree/1\"");
  IntentTree t;
  try {
    t.tree_id_ = j.at("tree_id").get<std::string>();
    t.original_intent_ = intent_from_json(j.at("original_intent"), "tree.original_intent");
    const json& nodes = j.at("nodes");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const json& jn = nodes[i];
      TreeNode n;
      n.node_id = jn.at("id").get<NodeId>();
      if (n.node_id != i) throw SchemaError("tree.nodes[" + std::to_string(i) + "]: ids must be dense and ordered");
      n.state_ref = jn.at("state_ref").get<std::string>();
      n.meta = jn.at("meta").get<std::string>();
      n.q_value = jn.at("q").get<double>();
      n.visit_count = jn.at("n").get<std::uint64_t>();
      n.status = node_status_from_string(jn.at("status").get<std::string>());
      n.prior_rank = jn.at("prior_rank").get<unsigned>();
      n.prior_bonus = jn.at("prior_bonus").get<double>();
      n.depth = jn.at("depth").get<unsigned>();
      n.materialized = jn.at("materialized").get<bool>();
      n.fully_expanded = jn.at("fully_expanded").get<bool>();
      if (!jn.at("outcome").is_null()) n.outcome = outcome_from_string(jn.at("outcome").get<std::string>());
      t.nodes_.push_back(std::move(n));
    }
    const json& edges = j.at("edges");
    for (std::size_t i = 0; i < edges.size(); ++i) {
      const json& e = edges[i];
      auto parent = e.at("parent").get<NodeId>();
      auto child = e.at("child").get<NodeId>();
      if (parent >= t.nodes_.size() || child >= t.nodes_.size() || child == 0)
        throw SchemaError("tree.edges[" + std::to_string(i) + "]: dangling node reference");
      if (t.nodes_[child].parent) throw SchemaError("tree.edges[" + std::to_string(i) + "]: node has two parents");
      if (child <= parent) throw SchemaError("tree.edges[" + std::to_string(i) + "]: child id must exceed its parent's");
      t.nodes_[child].parent = parent;
      t.nodes_[child].action = action_from_json(e.at("action"), "tree.edges[" + std::to_string(i) + "].action");
      t.nodes_[parent].children.push_back(child);
    }
    for (const auto& b : j.at("intents"))
      t.intents_.push_back({intent_from_json(b.at("intent"), "tree.intents"), b.at("endpoint").get<NodeId>(),
                            node_status_from_string(b.at("judged").get<std::string>())});
  } catch (const json::exception& e) {
    throw SchemaError(std::string("tree: ") + e.what());
  }
  t.refresh_all();
  t.check_invariants();
  return t;
}

/// Graphviz rendering. Node label "id | Q=..,N=.. | status"; edge label is the action summary.
inline std::string to_dot(const IntentTree& t) {
  auto escape = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      if (c == '"' || c == '\\') o += '\\';
      o += c;
    }
    return o;
  };
  std::string out = "digraph \"" + escape(t.tree_id()) + "\" {\n  node [shape=box, fontname=\"Helvetica\"];\n";
  for (const auto& n : t.nodes()) {
    std::string label = std::to_string(n.node_id) + " | Q=" + fixed(n.q_value, 3) + ",N=" + std::to_string(n.visit_count) +
                        " | " + (n.materialized ? to_string(n.status) : "pending");
    out += "  n" + std::to_string(n.node_id) + " [label=\"" + escape(label) + "\"";
    if (n.status == NodeStatus::success) out += ", style=filled, fillcolor=\"#c8f7c5\"";
    else if (n.status == NodeStatus::failure) out += ", style=filled, fillcolor=\"#f7c5c5\"";
    else if (!n.materialized) out += ", style=dashed";
    out += "];\n";
  }
  for (const auto& e : t.edges())
    out += "  n" + std::to_string(e.parent) + " -> n" + std::to_string(e.child) + " [label=\"" + escape(e.action.summary()) + "\"];\n";
  out += "}\n";
  return out;
}

}  // namespace m2
