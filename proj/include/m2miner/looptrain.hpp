#pragma once

#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "engine.hpp"
#include "oracle_agents.hpp"
#include "parallel.hpp"
#include "recycle.hpp"

namespace m2 {

inline constexpr const char* kPlanSchema = "m2plan/1";

// ---------------------------------------------------------------------------------------------
// Templated intents and rewriting

/// An intent rendered from an environment template, remembering its slot assignment.
struct SlottedIntent {
  std::string template_id;
  std::map<std::string, std::string> values;  // slot -> value key
  IntentRecord record;
};

namespace detail {

inline std::string render(const IntentTemplate& t, const std::map<std::string, std::string>& values) {
  std::string out;
  for (std::size_t i = 0; i < t.pattern.size();) {
    if (t.pattern[i] == '{') {
      const auto close = t.pattern.find('}', i);
      if (close == std::string::npos) throw SchemaError("template '" + t.id + "': unclosed slot");
      const std::string slot = t.pattern.substr(i + 1, close - i - 1);
      const auto sv = values.find(slot);
      if (sv == values.end()) throw ValidationError("template '" + t.id + "': no value for slot '" + slot + "'");
      out += t.slots.at(slot).at(sv->second).text;
      i = close + 1;
    } else {
      out += t.pattern[i++];
    }
  }
  return out;
}

inline GoalPredicate slot_goal(const IntentTemplate& t, const std::map<std::string, std::string>& values) {
  GoalPredicate g = t.goal;
  for (const auto& [slot, key] : values)
    for (const auto& [k, v] : t.slots.at(slot).at(key).bindings) g.bindings[k] = v;
  return g;
}

inline void check_values(const IntentTemplate& t, const std::map<std::string, std::string>& values) {
  for (const auto& [slot, key] : values) {
    auto s = t.slots.find(slot);
    if (s == t.slots.end()) throw ValidationError("template '" + t.id + "' has no slot '" + slot + "'");
    if (!s->second.count(key))
      throw ValidationError("template '" + t.id + "': slot '" + slot + "' has no value '" + key + "'");
  }
}

}  // namespace detail

/// Renders the template with its defaults, overridden by `values`.
inline SlottedIntent instantiate(const IntentTemplate& t, const std::map<std::string, std::string>& values = {},
                                 Stage stage = Stage::warmup) {
  detail::check_values(t, values);
  SlottedIntent s;
  s.template_id = t.id;
  s.values = t.defaults;
  for (const auto& [k, v] : values) s.values[k] = v;
  s.record.text = detail::render(t, s.values);
  s.record.stage = stage;
  s.record.goal = detail::slot_goal(t, s.values);
  s.record.intent_id = make_intent_id(IntentOrigin::seed, s.record.text, t.id);
  return s;
}

/// Slot -> new value key. Slots not named keep their current value.
using RewriteRule = std::map<std::string, std::string>;

inline std::string describe(const RewriteRule& r) {
  std::string s;
  for (const auto& [k, v] : r) s += k + "=" + v + ";";
  return s;
}

inline SlottedIntent rewrite_intent(const IntentTemplate& t, const SlottedIntent& base, const RewriteRule& rule,
                                    Stage stage = Stage::stage1) {
  if (base.template_id != t.id)
    throw ValidationError("rewrite: intent comes from template '" + base.template_id + "', not '" + t.id + "'");
  detail::check_values(t, rule);
  SlottedIntent s = base;
  for (const auto& [k, v] : rule) s.values[k] = v;
  s.record.text = detail::render(t, s.values);
  s.record.origin = IntentOrigin::rewritten;
  s.record.stage = stage;
  s.record.source_tree.reset();
  s.record.parent_intent = base.record.intent_id;
  s.record.goal = detail::slot_goal(t, s.values);
  s.record.intent_id = make_intent_id(IntentOrigin::rewritten, s.record.text, base.record.intent_id + "|" + describe(rule));
  return s;
}

/// Every rewrite over the cartesian product of the grammar's slot values, in lexicographic order of
/// the grammar's slots.
inline std::vector<SlottedIntent> expand_rewrites(const IntentTemplate& t, const SlottedIntent& base,
                                                  const std::map<std::string, std::vector<std::string>>& grammar,
                                                  Stage stage = Stage::stage1) {
  std::vector<RewriteRule> rules{RewriteRule{}};
  for (const auto& [slot, keys] : grammar) {
    if (keys.empty()) throw ValidationError("rewrite grammar: slot '" + slot + "' lists no values");
    std::vector<RewriteRule> next;
    for (const auto& r : rules)
      for (const auto& k : keys) {
        RewriteRule x = r;
        x[slot] = k;
        next.push_back(std::move(x));
      }
    rules = std::move(next);
  }
  std::vector<SlottedIntent> out;
  for (const auto& r : rules) out.push_back(rewrite_intent(t, base, r, stage));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Combination

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::string strip_period(std::string s) {
  s = trim(s);
  while (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

inline std::optional<GoalPredicate> conjoin(const std::optional<GoalPredicate>& a, const std::optional<GoalPredicate>& b) {
  if (!a || !b) return std::nullopt;
  GoalPredicate g;
  g.screen = b->screen ? b->screen : a->screen;
  g.bindings = a->bindings;
  for (const auto& [k, v] : b->bindings) {
    auto [it, fresh] = g.bindings.emplace(k, v);
    if (!fresh && it->second != v)
      throw ValidationError("combined goals disagree on '" + k + "' ('" + it->second + "' vs '" + v + "')");
  }
  return g;
}

inline IntentRecord combined_record(std::string text, Stage stage, const std::string& salt) {
  IntentRecord r;
  r.text = std::move(text);
  r.origin = IntentOrigin::combined;
  r.stage = stage;
  r.intent_id = make_intent_id(IntentOrigin::combined, r.text, salt);
  return r;
}

}  // namespace detail

/// "a" then "b": text joined by the connective, goal ends on b's screen with both parts' bindings.
inline IntentRecord combine_intents(const IntentRecord& a, const IntentRecord& b, const std::string& connective = " and ",
                                    Stage stage = Stage::stage2) {
  a.validate();
  b.validate();
  IntentRecord r = detail::combined_record(detail::strip_period(a.text) + connective + detail::trim(b.text), stage,
                                           a.intent_id + "+" + b.intent_id);
  r.parent_intent = a.intent_id;
  r.goal = detail::conjoin(a.goal, b.goal);
  return r;
}

/// `a` with an extra condition clause and the bindings it implies.
inline IntentRecord combine_intents(const IntentRecord& a, const std::string& condition,
                                    const std::map<std::string, std::string>& bindings,
                                    const std::string& connective = " and ", Stage stage = Stage::stage2) {
  a.validate();
  const std::string cond = detail::trim(condition);
  if (cond.empty()) throw ValidationError("combine: empty condition");
  IntentRecord r = detail::combined_record(detail::strip_period(a.text) + connective + cond, stage, a.intent_id + "+" + cond);
  r.parent_intent = a.intent_id;
  if (a.goal) r.goal = detail::conjoin(a.goal, GoalPredicate{std::nullopt, bindings});
  return r;
}

// ---------------------------------------------------------------------------------------------
// Plans

struct StagePlan {
  Stage stage = Stage::stage1;
  std::vector<IntentRecord> intents;
  MiningConfig mining;
  bool requeue_failed = false;
  unsigned repeat = 1;
  std::optional<double> recycle_threshold;  // set: recycle every prior tree
  json upgrade = json::object();            // merge-patch onto the backend config, applied after the stage
};

struct LoopPlan {
  std::string name;
  json backend = json::object();
  std::vector<StagePlan> stages;
};

namespace detail {

inline void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok |= it.key() == k;
    if (!ok) throw ValidationError(where + ": unknown key '" + it.key() + "'");
  }
}

inline std::map<std::string, std::string> str_map(const json& j, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected object");
  std::map<std::string, std::string> m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_string()) throw ValidationError(where + "." + it.key() + ": expected string");
    m[it.key()] = it.value().get<std::string>();
  }
  return m;
}

/// {"goal": id} | {"text": ...} | {"template": id, "values": {...}}
inline IntentRecord intent_source(const ScreenGraph& g, const json& j, Stage stage, const std::string& where) {
  only_keys(j, {"goal", "text", "template", "values"}, where);
  if (j.contains("goal")) return g.seed_intent(j.at("goal").get<std::string>(), stage);
  if (j.contains("text")) {
    IntentRecord r = make_seed_intent(j.at("text").get<std::string>(), stage);
    r.goal = g.resolve_goal(r);
    return r;
  }
  if (j.contains("template")) {
    const auto values = j.contains("values") ? str_map(j["values"], where + ".values") : std::map<std::string, std::string>{};
    return instantiate(g.intent_template(j.at("template").get<std::string>()), values, stage).record;
  }
  throw ValidationError(where + ": intent source needs 'goal', 'text' or 'template'");
}

}  // namespace detail

inline LoopPlan plan_from_json(const json& j, const ScreenGraph& g, const MiningConfig& base = {}) {
  LoopPlan p;
  try {
    detail::only_keys(j, {"schema", "name", "backend", "mining", "stages"}, "plan");
    if (j.value("schema", "") != kPlanSchema) throw SchemaError("plan: schema must be \"" + std::string(kPlanSchema) + "\"");
    p.name = j.value("name", "");
    if (j.contains("backend")) p.backend = j["backend"];
    const MiningConfig plan_cfg = j.contains("mining") ? config_from_json(j["mining"], base, "plan.mining") : base;
    const json& stages = j.at("stages");
    if (!stages.is_array() || stages.empty()) throw ValidationError("plan.stages: expected a non-empty array");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string w = "plan.stages[" + std::to_string(i) + "]";
      const json& s = stages[i];
      detail::only_keys(s, {"stage", "intents", "rewrites", "combinations", "mining", "requeue_failed", "repeat",
                            "recycle", "upgrade"},
                        w);
      StagePlan sp;
      sp.stage = stage_from_string(s.at("stage").get<std::string>());
      sp.mining = s.contains("mining") ? config_from_json(s["mining"], plan_cfg, w + ".mining") : plan_cfg;
      sp.requeue_failed = s.value("requeue_failed", false);
      sp.repeat = s.value("repeat", 1u);
      if (sp.repeat < 1) throw ValidationError(w + ".repeat must be >= 1");
      if (s.contains("upgrade")) {
        if (!s["upgrade"].is_object()) throw ValidationError(w + ".upgrade: expected object");
        sp.upgrade = s["upgrade"];
      }
      if (s.contains("recycle")) {
        detail::only_keys(s["recycle"], {"threshold"}, w + ".recycle");
        sp.recycle_threshold = s["recycle"].value("threshold", 0.5);
        if (!(*sp.recycle_threshold >= 0.0 && *sp.recycle_threshold <= 1.0))
          throw ValidationError(w + ".recycle.threshold must lie in [0,1]");
      }
      for (std::size_t k = 0; s.contains("intents") && k < s["intents"].size(); ++k)
        sp.intents.push_back(detail::intent_source(g, s["intents"][k], sp.stage, w + ".intents[" + std::to_string(k) + "]"));
      for (std::size_t k = 0; s.contains("rewrites") && k < s["rewrites"].size(); ++k) {
        const std::string rw = w + ".rewrites[" + std::to_string(k) + "]";
        const json& r = s["rewrites"][k];
        detail::only_keys(r, {"template", "base", "grammar"}, rw);
        const IntentTemplate& t = g.intent_template(r.at("template").get<std::string>());
        const auto base_values = r.contains("base") ? detail::str_map(r["base"], rw + ".base") : std::map<std::string, std::string>{};
        std::map<std::string, std::vector<std::string>> grammar;
        for (auto it = r.at("grammar").begin(); it != r.at("grammar").end(); ++it)
          grammar[it.key()] = it.value().get<std::vector<std::string>>();
        for (auto& si : expand_rewrites(t, instantiate(t, base_values, sp.stage), grammar, sp.stage))
          sp.intents.push_back(std::move(si.record));
      }
      for (std::size_t k = 0; s.contains("combinations") && k < s["combinations"].size(); ++k) {
        const std::string cw = w + ".combinations[" + std::to_string(k) + "]";
        const json& c = s["combinations"][k];
        detail::only_keys(c, {"a", "b", "condition", "bindings", "connective"}, cw);
        const IntentRecord a = detail::intent_source(g, c.at("a"), sp.stage, cw + ".a");
        const std::string conn = c.value("connective", " and ");
        if (c.contains("b"))
          sp.intents.push_back(combine_intents(a, detail::intent_source(g, c["b"], sp.stage, cw + ".b"), conn, sp.stage));
        else
          sp.intents.push_back(combine_intents(a, c.value("condition", ""),
                                               c.contains("bindings") ? detail::str_map(c["bindings"], cw + ".bindings")
                                                                      : std::map<std::string, std::string>{},
                                               conn, sp.stage));
      }
      if (sp.stage == Stage::stage3 && sp.recycle_threshold && i == 0)
        throw ValidationError(w + ": stage3 recycling needs earlier stages to produce trees");
      p.stages.push_back(std::move(sp));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("plan: ") + e.what());
  }
  return p;
}

// ---------------------------------------------------------------------------------------------
// Stage execution

struct IntentRun {
  IntentRecord intent;
  MiningOutcome outcome = MiningOutcome::budget_exhausted;
  std::string tree_id;
  std::uint64_t iterations = 0;
  std::uint64_t env_steps = 0;
  std::optional<bool> verified;
};

struct StageReport {
  Stage stage = Stage::stage1;
  json backend;  // backend config the stage ran with
  std::vector<IntentRun> runs;
  std::vector<std::string> requeued;  // intent ids carried over from earlier failures
  double msr = 0.0;
  std::optional<double> dqa;          // over this stage's successful trajectories
  std::size_t recycled = 0;
  std::optional<double> recycled_dqa;
};

/// Builds the agents a stage runs with from the current backend config and a seed.
using BackendFactory = std::function<AgentSuite(const json& backend, std::uint64_t seed)>;

struct LoopState {
  std::vector<IntentTree> trees;
  std::vector<MinedTrajectory> trajectories;  // successful, mined and recycled
  std::vector<IntentRecord> failed;           // not yet mined successfully, in first-failure order
  json backend = json::object();
};

template <MiningEnvironment Env>
StageReport run_stage(const StagePlan& plan, const Env& env, const ScreenGraph& graph, const BackendFactory& backends,
                      LoopState& state, std::uint64_t seed, unsigned workers = 1, const Logger& log = Logger::null()) {
  plan.mining.validate();
  StageReport rep;
  rep.stage = plan.stage;
  rep.backend = state.backend;
  const AgentSuite agents = backends(state.backend, mix_seed(seed, static_cast<std::uint64_t>(plan.stage)));

  std::vector<IntentRecord> queue;
  if (plan.requeue_failed) {
    for (const auto& f : state.failed) rep.requeued.push_back(f.intent_id);
    queue = state.failed;
  }
  for (const auto& i : plan.intents) {
    bool dup = false;
    for (const auto& q : queue) dup |= q.intent_id == i.intent_id;
    if (!dup) queue.push_back(i);
  }

  const std::size_t prior_trees = state.trees.size();
  std::vector<MinedTrajectory> stage_traj;
  std::vector<MiningOutcome> outcomes;
  for (unsigned round = 0; round < plan.repeat && !queue.empty(); ++round) {
    std::vector<std::optional<MiningResult>> results(queue.size());
    parallel_for(queue.size(), workers, [&](std::size_t i) {
      MiningConfig cfg = plan.mining;
      cfg.rng_seed = mix_seed(mix_seed(mix_seed(seed, fnv1a64(queue[i].intent_id)), static_cast<std::uint64_t>(plan.stage)), round);
      results[i] = mine(queue[i], env, agents, cfg);
    });
    std::vector<IntentRecord> still_failed;
    for (std::size_t i = 0; i < queue.size(); ++i) {
      MiningResult& r = *results[i];
      outcomes.push_back(r.outcome);
      rep.runs.push_back({queue[i], r.outcome, r.tree.tree_id(), r.iterations_used, r.env_steps_used, r.verified});
      log.info("loop.mined", {{"stage", to_string(plan.stage)}, {"intent", queue[i].intent_id},
                              {"outcome", to_string(r.outcome)}, {"env_steps", r.env_steps_used}});
      if (r.outcome == MiningOutcome::success) {
        stage_traj.push_back(*r.trajectory);
        std::erase_if(state.failed, [&](const IntentRecord& f) { return f.intent_id == queue[i].intent_id; });
      } else {
        still_failed.push_back(queue[i]);
        bool known = false;
        for (const auto& f : state.failed) known |= f.intent_id == queue[i].intent_id;
        if (!known) state.failed.push_back(queue[i]);
      }
      state.trees.push_back(std::move(r.tree));
    }
    queue = std::move(still_failed);
  }
  if (!outcomes.empty()) rep.msr = compute_msr(outcomes);
  if (!stage_traj.empty()) rep.dqa = compute_dqa(stage_traj, graph);

  if (plan.recycle_threshold) {
    RecycleOptions opt;
    opt.threshold = *plan.recycle_threshold;
    opt.stage = plan.stage;
    std::vector<MinedTrajectory> recycled;
    for (std::size_t t = 0; t < prior_trees; ++t) {
      const RecycleReport rr = recycle(state.trees[t], env, agents, opt, log);
      for (const auto& c : rr.candidates)
        if (c.attached) recycled.push_back(c.trajectory);
    }
    rep.recycled = recycled.size();
    if (!recycled.empty()) rep.recycled_dqa = compute_dqa(recycled, graph);
    for (auto& r : recycled) stage_traj.push_back(std::move(r));
  }
  for (auto& t : stage_traj) state.trajectories.push_back(std::move(t));
  state.backend.merge_patch(plan.upgrade);
  return rep;
}

struct LoopResult {
  std::vector<StageReport> stages;
  LoopState state;
};

template <MiningEnvironment Env>
LoopResult run_plan(const LoopPlan& plan, const Env& env, const ScreenGraph& graph, const BackendFactory& backends,
                    std::uint64_t seed, unsigned workers = 1, const Logger& log = Logger::null()) {
  LoopResult out;
  out.state.backend = plan.backend;
  for (const auto& sp : plan.stages) out.stages.push_back(run_stage(sp, env, graph, backends, out.state, seed, workers, log));
  return out;
}

/// Oracle backend config: {"epsilon", "redundancy", "judge_error"} over OracleParams.
inline OracleParams oracle_params_from_json(const json& j, std::uint64_t seed) {
  detail::only_keys(j, {"kind", "epsilon", "redundancy", "judge_error"}, "backend");
  OracleParams p;
  p.epsilon = j.value("epsilon", p.epsilon);
  p.redundancy = j.value("redundancy", p.redundancy);
  p.judge_error = j.value("judge_error", p.judge_error);
  p.seed = seed;
  for (double v : {p.epsilon, p.redundancy, p.judge_error})
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("backend: rates must lie in [0,1]");
  return p;
}

inline BackendFactory oracle_backend(std::shared_ptr<const ScreenGraph> graph) {
  return [graph](const json& backend, std::uint64_t seed) {
    return make_oracle_agents(graph, oracle_params_from_json(backend, seed));
  };
}

// ---------------------------------------------------------------------------------------------
// Reporting

struct SignTest {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t ties = 0;
  double p_value = 1.0;  // P(at least `positive` successes | n untied pairs, fair coin)
};

/// One-sided sign test that `after` exceeds `before`.
inline SignTest sign_test(const std::vector<double>& before, const std::vector<double>& after) {
  if (before.size() != after.size()) throw ValidationError("sign_test: paired samples differ in length");
  SignTest s;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (after[i] > before[i]) ++s.positive;
    else if (after[i] < before[i]) ++s.negative;
    else ++s.ties;
  }
  const std::size_t n = s.positive + s.negative;
  double tail = 0.0;
  for (std::size_t k = s.positive; k <= n; ++k)
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - static_cast<double>(n) * std::log(2.0));
  s.p_value = n == 0 ? 1.0 : std::min(1.0, tail);
  return s;
}

inline json to_json(const StageReport& r) {
  json runs = json::array();
  for (const auto& x : r.runs) {
    json j{{"intent_id", x.intent.intent_id}, {"text", x.intent.text},     {"origin", to_string(x.intent.origin)},
           {"outcome", to_string(x.outcome)}, {"tree_id", x.tree_id},       {"iterations", x.iterations},
           {"env_steps", x.env_steps}};
    j["verified"] = x.verified ? json(*x.verified) : json(nullptr);
    runs.push_back(std::move(j));
  }
  return {{"stage", to_string(r.stage)},
          {"backend", r.backend},
          {"msr", r.msr},
          {"dqa", r.dqa ? json(*r.dqa) : json(nullptr)},
          {"recycled", r.recycled},
          {"recycled_dqa", r.recycled_dqa ? json(*r.recycled_dqa) : json(nullptr)},
          {"requeued", r.requeued},
          {"runs", std::move(runs)}};
}

inline std::string stage_csv(const std::vector<StageReport>& reports) {
  std::ostringstream o;
  o << "stage,attempts,successes,msr,dqa,recycled,recycled_dqa,requeued\n";
  for (const auto& r : reports) {
    std::size_t ok = 0;
    for (const auto& x : r.runs) ok += x.outcome == MiningOutcome::success;
    o << to_string(r.stage) << ',' << r.runs.size() << ',' << ok << ',' << fixed(r.msr, 4) << ','
      << (r.dqa ? fixed(*r.dqa, 4) : std::string("NA")) << ',' << r.recycled << ','
      << (r.recycled_dqa ? fixed(*r.recycled_dqa, 4) : std::string("NA")) << ',' << r.requeued.size() << '\n';
  }
  return o.str();
}

}  // namespace m2
