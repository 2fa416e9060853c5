#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "error.hpp"

namespace m2 {

enum class NodeStatus { success, failure, intermediate };

inline const char* to_string(NodeStatus s) {
  switch (s) {
    case NodeStatus::success: return "success";
    case NodeStatus::failure: return "failure";
    case NodeStatus::intermediate: return "intermediate";
  }
  return "?";
}

inline NodeStatus node_status_from_string(const std::string& s) {
  if (s == "success") return NodeStatus::success;
  if (s == "failure") return NodeStatus::failure;
  if (s == "intermediate") return NodeStatus::intermediate;
  throw SchemaError("unknown node status '" + s + "'");
}

inline bool is_terminal(NodeStatus s) { return s != NodeStatus::intermediate; }

/// Upper-confidence score of a visited child: child_q + c * sqrt(ln(parent_visits) / child_visits).
/// Unvisited children are ranked by prior_bonus instead and never reach this function.
inline double uct_score(double child_q, std::uint64_t parent_visits, std::uint64_t child_visits, double c) {
  if (parent_visits < 1) throw ContractError("uct_score: parent_visits must be >= 1");
  if (child_visits < 1) throw ContractError("uct_score: child_visits must be >= 1 (score unvisited children by prior_bonus)");
  if (!(c >= 0.0)) throw DomainError("uct_score: exploration constant must be >= 0");
  return child_q + c * std::sqrt(std::log(static_cast<double>(parent_visits)) / static_cast<double>(child_visits));
}

/// Two-way softmax of the judge's (valid, invalid) logits, i.e. sigmoid(logit_valid - logit_invalid).
inline double normalize_intermediate_reward(double logit_valid, double logit_invalid) {
  if (!std::isfinite(logit_valid) || !std::isfinite(logit_invalid))
    throw DomainError("normalize_intermediate_reward: logits must be finite");
  const double d = logit_valid - logit_invalid;
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

struct QUpdate {
  double q;
  std::uint64_t n;
};

/// Running-mean update of a node's value after one more reward.
inline QUpdate update_q(double q_prev, std::uint64_t n_prev, double reward) {
  if (!(reward >= 0.0 && reward <= 1.0)) throw DomainError("update_q: reward must lie in [0,1]");
  const double base = n_prev == 0 ? 0.0 : q_prev * static_cast<double>(n_prev);
  return {(base + reward) / static_cast<double>(n_prev + 1), n_prev + 1};
}

inline double terminal_reward(NodeStatus status) {
  switch (status) {
    case NodeStatus::success: return 1.0;
    case NodeStatus::failure: return 0.0;
    case NodeStatus::intermediate: break;
  }
  throw ContractError("terminal_reward: intermediate nodes are scored by the judge");
}

/// Selection score of an unvisited child that the orchestrator ranked at `rank`: B * gamma^rank.
inline double prior_bonus(unsigned rank, double base, double gamma) {
  return base * std::pow(gamma, static_cast<double>(rank));
}

}  // namespace m2
