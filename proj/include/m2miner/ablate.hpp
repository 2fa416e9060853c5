#pragma once

#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "engine.hpp"
#include "io.hpp"
#include "parallel.hpp"

namespace m2 {

/// A task whose length is its BFS distance from the initial state.
struct AblationTask {
  std::string goal_id;
  IntentRecord intent;
  unsigned length = 0;
};

/// First non-latent declared goal at each requested distance.
inline std::vector<AblationTask> ablation_tasks(const ScreenGraph& g, const std::vector<unsigned>& lengths) {
  std::vector<AblationTask> out;
  for (unsigned len : lengths) {
    const GoalDecl* hit = nullptr;
    for (const auto& goal : g.goals) {
      if (goal.latent) continue;
      const auto d = g.distance_from_initial(goal.predicate);
      if (d && *d == len) {
        hit = &goal;
        break;
      }
    }
    if (!hit) throw ValidationError("environment '" + g.name + "' has no goal at task length " + std::to_string(len));
    out.push_back({hit->id, g.seed_intent(hit->id), len});
  }
  return out;
}

/// Budgets for the ablation arms: effectively unbounded iterations, each arm bounded by wall clock.
inline MiningConfig ablation_defaults() {
  MiningConfig c;
  c.max_iterations = 1'000'000;
  c.wall_clock_cap_s = 120.0;
  return c;
}

struct AblationRun {
  std::uint64_t seed = 0;
  MiningOutcome outcome = MiningOutcome::budget_exhausted;
  std::uint64_t env_steps = 0;
  std::uint64_t iterations = 0;
  bool timed_out = false;
};

struct AblationRow {
  MiningMode mode = MiningMode::accelerated;
  unsigned length = 0;
  std::string goal_id;
  std::vector<AblationRun> runs;
  std::size_t successes = 0;
  std::size_t timed_out = 0;
  double msr = 0.0;
  double mean_env_steps = 0.0;
  double mean_iterations = 0.0;
};

using AgentFactory = std::function<AgentSuite(std::uint64_t seed)>;

/// Runs every (mode, task, seed) cell. Rows are ordered mode-major, then by task order.
template <MiningEnvironment Env>
std::vector<AblationRow> ablate(const Env& env, const std::vector<AblationTask>& tasks,
                                const std::vector<MiningMode>& modes, const std::vector<std::uint64_t>& seeds,
                                const MiningConfig& base, const AgentFactory& agents, unsigned workers = 1) {
  if (seeds.empty()) throw ValidationError("ablate: no seeds");
  base.validate();
  struct Cell {
    std::size_t row;
    std::size_t run;
  };
  std::vector<AblationRow> rows;
  std::vector<Cell> cells;
  for (MiningMode m : modes)
    for (const auto& t : tasks) {
      AblationRow r;
      r.mode = m;
      r.length = t.length;
      r.goal_id = t.goal_id;
      r.runs.resize(seeds.size());
      for (std::size_t s = 0; s < seeds.size(); ++s) cells.push_back({rows.size(), s});
      rows.push_back(std::move(r));
    }
  const std::size_t per_mode = tasks.size();
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    const Cell c = cells[i];
    AblationRow& row = rows[c.row];
    MiningConfig cfg = base;
    cfg.mode = row.mode;
    cfg.rng_seed = seeds[c.run];
    const MiningResult res = mine(tasks[c.row % per_mode].intent, env, agents(seeds[c.run]), cfg);
    row.runs[c.run] = {seeds[c.run], res.outcome, res.env_steps_used, res.iterations_used, res.timed_out};
  });
  for (auto& r : rows) {
    double steps = 0, iters = 0;
    for (const auto& run : r.runs) {
      r.successes += run.outcome == MiningOutcome::success;
      r.timed_out += run.timed_out;
      steps += static_cast<double>(run.env_steps);
      iters += static_cast<double>(run.iterations);
    }
    const double n = static_cast<double>(r.runs.size());
    r.msr = static_cast<double>(r.successes) / n;
    r.mean_env_steps = steps / n;
    r.mean_iterations = iters / n;
  }
  return rows;
}

/// Mean vanilla env steps over mean accelerated env steps for one length; NaN when either arm is
/// missing or any of its runs timed out.
inline double speedup(const std::vector<AblationRow>& rows, unsigned length) {
  const AblationRow* acc = nullptr;
  const AblationRow* van = nullptr;
  for (const auto& r : rows) {
    if (r.length != length) continue;
    if (r.mode == MiningMode::accelerated) acc = &r;
    if (r.mode == MiningMode::vanilla) van = &r;
  }
  if (!acc || !van || acc->timed_out || van->timed_out || acc->mean_env_steps <= 0)
    return std::numeric_limits<double>::quiet_NaN();
  return van->mean_env_steps / acc->mean_env_steps;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  o << "mode,length,goal,runs,successes,msr,mean_env_steps,mean_iterations,timed_out,vanilla_over_accelerated\n";
  for (const auto& r : rows) {
    const double s = speedup(rows, r.length);
    o << to_string(r.mode) << ',' << r.length << ',' << csv_field(r.goal_id) << ',' << r.runs.size() << ','
      << r.successes << ',' << fixed(r.msr, 4) << ',' << fixed(r.mean_env_steps, 2) << ',' << fixed(r.mean_iterations, 2)
      << ',' << r.timed_out << ',' << (std::isnan(s) ? std::string("NA") : fixed(s, 4)) << '\n';
  }
  return o.str();
}

inline json to_json(const AblationRow& r) {
  json runs = json::array();
  for (const auto& x : r.runs)
    runs.push_back({{"seed", x.seed}, {"outcome", to_string(x.outcome)}, {"env_steps", x.env_steps},
                    {"iterations", x.iterations}, {"timed_out", x.timed_out}});
  return {{"mode", to_string(r.mode)}, {"length", r.length},       {"goal", r.goal_id},
          {"msr", r.msr},              {"successes", r.successes}, {"timed_out", r.timed_out},
          {"mean_env_steps", r.mean_env_steps}, {"mean_iterations", r.mean_iterations}, {"runs", std::move(runs)}};
}

}  // namespace m2
