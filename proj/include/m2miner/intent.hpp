#pragma once

#include <map>
#include <optional>
#include <string>

#include "action.hpp"
#include "util.hpp"

namespace m2 {

enum class IntentOrigin { seed, rewritten, combined, recycled };
enum class Stage { warmup, stage1, stage2, stage3 };

inline const char* to_string(IntentOrigin o) {
  switch (o) {
    case IntentOrigin::seed: return "seed";
    case IntentOrigin::rewritten: return "rewritten";
    case IntentOrigin::combined: return "combined";
    case IntentOrigin::recycled: return "recycled";
  }
  return "?";
}

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::warmup: return "warmup";
    case Stage::stage1: return "stage1";
    case Stage::stage2: return "stage2";
    case Stage::stage3: return "stage3";
  }
  return "?";
}

inline IntentOrigin intent_origin_from_string(const std::string& s) {
  for (auto o : {IntentOrigin::seed, IntentOrigin::rewritten, IntentOrigin::combined, IntentOrigin::recycled})
    if (s == to_string(o)) return o;
  throw SchemaError("unknown intent origin '" + s + "'");
}

inline Stage stage_from_string(const std::string& s) {
  for (auto v : {Stage::warmup, Stage::stage1, Stage::stage2, Stage::stage3})
    if (s == to_string(v)) return v;
  throw SchemaError("unknown stage '" + s + "'");
}

/// Conjunction over an environment state: optional screen plus required bindings.
struct GoalPredicate {
  std::optional<std::string> screen;
  std::map<std::string, std::string> bindings;

  friend bool operator==(const GoalPredicate&, const GoalPredicate&) = default;

  bool holds(const std::string& screen_id, const std::map<std::string, std::string>& state) const {
    if (screen && *screen != screen_id) return false;
    for (const auto& [k, v] : bindings) {
      auto it = state.find(k);
      if (it == state.end() || it->second != v) return false;
    }
    return true;
  }

  /// Stable key, used for caching distance tables.
  std::string key() const {
    std::string s = screen.value_or("*");
    for (const auto& [k, v] : bindings) s += "\x1f" + k + "=" + v;
    return s;
  }
};

inline json to_json(const GoalPredicate& g) {
  json j = json::object();
  if (g.screen) j["screen"] = *g.screen;
  j["bindings"] = g.bindings;
  return j;
}

inline GoalPredicate goal_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": expected object");
  GoalPredicate g;
  if (j.contains("screen")) {
    if (!j["screen"].is_string()) throw SchemaError(where + ".screen: expected string");
    g.screen = j["screen"].get<std::string>();
  }
  if (j.contains("bindings")) {
    if (!j["bindings"].is_object()) throw SchemaError(where + ".bindings: expected object");
    for (auto it = j["bindings"].begin(); it != j["bindings"].end(); ++it) {
      if (!it.value().is_string()) throw SchemaError(where + ".bindings." + it.key() + ": expected string");
      g.bindings[it.key()] = it.value().get<std::string>();
    }
  }
  return g;
}

/// A natural-language task plus where it came from. `goal` is set when the intent was produced
/// from an environment template; otherwise the environment resolves it by text.
struct IntentRecord {
  std::string intent_id;
  std::string text;
  IntentOrigin origin = IntentOrigin::seed;
  Stage stage = Stage::warmup;
  std::optional<std::string> source_tree;
  std::optional<std::string> parent_intent;
  std::optional<GoalPredicate> goal;

  friend bool operator==(const IntentRecord&, const IntentRecord&) = default;

  void validate() const {
    if (text.empty()) throw ValidationError("intent '" + intent_id + "': empty text");
    if (intent_id.empty()) throw ValidationError("intent without id");
    if (origin == IntentOrigin::recycled && !source_tree)
      throw ValidationError("recycled intent '" + intent_id + "' has no source tree");
  }
};

/// Deterministic id from provenance so reruns produce identical files.
inline std::string make_intent_id(IntentOrigin origin, const std::string& text, const std::string& salt = {}) {
  std::uint64_t h = fnv1a64(to_string(origin));
  h = fnv1a64("\x1f" + text, h);
  h = fnv1a64("\x1f" + salt, h);
  return std::string("i-") + to_hex(h).substr(0, 12);
}

inline IntentRecord make_seed_intent(std::string text, Stage stage = Stage::warmup) {
  IntentRecord r;
  r.intent_id = make_intent_id(IntentOrigin::seed, text);
  r.text = std::move(text);
  r.stage = stage;
  return r;
}

inline json to_json(const IntentRecord& r) {
  json j;
  j["intent_id"] = r.intent_id;
  j["text"] = r.text;
  j["origin"] = to_string(r.origin);
  j["stage"] = to_string(r.stage);
  if (r.source_tree) j["source_tree"] = *r.source_tree;
  if (r.parent_intent) j["parent_intent"] = *r.parent_intent;
  if (r.goal) j["goal"] = to_json(*r.goal);
  return j;
}

inline IntentRecord intent_from_json(const json& j, const std::string& where = "intent") {
  if (!j.is_object()) throw SchemaError(where + ": expected object");
  auto str = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) throw SchemaError(where + "." + key + ": expected string");
    return j[key].get<std::string>();
  };
  IntentRecord r;
  r.intent_id = str("intent_id");
  r.text = str("text");
  r.origin = intent_origin_from_string(str("origin"));
  r.stage = stage_from_string(str("stage"));
  if (j.contains("source_tree")) r.source_tree = str("source_tree");
  if (j.contains("parent_intent")) r.parent_intent = str("parent_intent");
  if (j.contains("goal")) r.goal = goal_from_json(j["goal"], where + ".goal");
  return r;
}

}  // namespace m2
