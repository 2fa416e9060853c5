#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "action.hpp"
#include "formulas.hpp"
#include "intent.hpp"
#include "simenv.hpp"

namespace m2 {

enum class CandidateSource { primary_model, diversity_model, scripted };

inline const char* to_string(CandidateSource s) {
  switch (s) {
    case CandidateSource::primary_model: return "primary_model";
    case CandidateSource::diversity_model: return "diversity_model";
    case CandidateSource::scripted: return "scripted";
  }
  return "?";
}

struct CandidateAction {
  GuiAction action;
  std::string rationale;
  CandidateSource source = CandidateSource::scripted;
};

/// Orchestrator output. merged_groups partitions the input indices; the first index of each group is
/// the surviving representative.
struct RankedActions {
  std::vector<CandidateAction> actions;
  std::vector<std::vector<std::size_t>> merged_groups;
  unsigned queries = 0;
};

struct JudgeVerdict {
  NodeStatus status = NodeStatus::intermediate;
  double logit_valid = 0.0;
  double logit_invalid = 0.0;
  double reward = 0.5;

  static JudgeVerdict terminal(NodeStatus s) {
    JudgeVerdict v;
    v.status = s;
    v.reward = terminal_reward(s);
    v.logit_valid = s == NodeStatus::success ? 1.0 : 0.0;
    v.logit_invalid = s == NodeStatus::success ? 0.0 : 1.0;
    return v;
  }

  static JudgeVerdict intermediate(double logit_valid, double logit_invalid) {
    JudgeVerdict v;
    v.status = NodeStatus::intermediate;
    v.logit_valid = logit_valid;
    v.logit_invalid = logit_invalid;
    v.reward = normalize_intermediate_reward(logit_valid, logit_invalid);
    return v;
  }

  /// Recomputes the reward from the record alone.
  bool consistent(double tol = 1e-12) const {
    if (status != NodeStatus::intermediate) return reward == terminal_reward(status);
    if (!std::isfinite(logit_valid) || !std::isfinite(logit_invalid)) return false;
    return std::abs(reward - normalize_intermediate_reward(logit_valid, logit_invalid)) <= tol;
  }
};

inline json to_json(const JudgeVerdict& v) {
  return {{"status", to_string(v.status)}, {"logit_valid", v.logit_valid}, {"logit_invalid", v.logit_invalid}, {"reward", v.reward}};
}

/// A root path as the agents see it: the starting observation plus the executed actions.
struct TrajectoryView {
  Observation start;
  std::vector<GuiAction> actions;
  std::vector<std::string> descriptions;
  bool contains_failure = false;
};

struct GeneratedIntent {
  std::string text;
  std::optional<GoalPredicate> goal;
};

/// Proposes up to k candidate actions, none identical to `already_generated`.
class InferAgent {
 public:
  virtual ~InferAgent() = default;
  virtual std::vector<CandidateAction> infer_candidates(const Observation& obs, const IntentRecord& intent,
                                                        std::span<const GuiAction> history,
                                                        std::span<const GuiAction> already_generated, unsigned k) = 0;
};

/// Merges equivalent candidates and orders the survivors best-first.
class OrchestraAgent {
 public:
  virtual ~OrchestraAgent() = default;
  virtual RankedActions orchestrate(const Observation& obs, const IntentRecord& intent,
                                    std::span<const CandidateAction> candidates) = 0;
};

/// Outcome model (success / failure / not yet) followed by the process model for intermediate states.
class JudgeAgent {
 public:
  virtual ~JudgeAgent() = default;
  virtual JudgeVerdict judge(const Observation& obs, const IntentRecord& intent, const TrajectoryView& trajectory) = 0;
};

/// Quality score in [0,1] of a candidate trajectory for intent recycling.
class RecycleFilter {
 public:
  virtual ~RecycleFilter() = default;
  virtual double score(const TrajectoryView& trajectory, const Observation& end) = 0;
};

/// Writes an intent describing what a trajectory accomplishes. Empty text means "nothing".
class IntentGenerator {
 public:
  virtual ~IntentGenerator() = default;
  virtual GeneratedIntent generate(const TrajectoryView& trajectory, const Observation& end) = 0;
};

struct AgentSuite {
  std::shared_ptr<InferAgent> infer;
  std::shared_ptr<OrchestraAgent> orchestra;
  std::shared_ptr<JudgeAgent> judge;
  std::shared_ptr<RecycleFilter> filter;
  std::shared_ptr<IntentGenerator> generator;
};

}  // namespace m2
