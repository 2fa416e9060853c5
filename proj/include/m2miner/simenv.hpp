#pragma once

#include <atomic>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "action.hpp"
#include "intent.hpp"
#include "util.hpp"

namespace m2 {

inline constexpr const char* kEnvSchema = "m2env/1";

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Rect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(Point p) const { return p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1; }
  Point center() const { return {(x0 + x1) / 2, (y0 + y1) / 2}; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

enum class WidgetKind { click, long_press, swipe };
enum class SwipeDirection { up, down, left, right };

struct Widget {
  std::string id;
  std::string label;
  WidgetKind kind = WidgetKind::click;
  Rect rect;
  SwipeDirection direction = SwipeDirection::up;  // swipe widgets only
  std::optional<std::string> target;
  std::map<std::string, std::string> set;
};

struct TextField {
  std::string name;
  std::vector<std::string> options;  // values an explorer may type; any text is accepted
};

struct KeyBinding {
  std::map<std::string, std::string> set;
};

struct LabeledAction {
  GuiAction action;
  std::string label;
};

struct Screen {
  std::string id;
  std::string title;
  std::vector<Widget> widgets;
  std::optional<TextField> text_field;
  std::map<std::string, KeyBinding> keys;
  std::map<SystemButton, std::string> buttons;
  bool dead_end = false;
  bool terminal = false;
  // filled at load: canonical actions and widget descriptions
  std::shared_ptr<const std::vector<LabeledAction>> actions;
  std::shared_ptr<const std::vector<std::string>> descriptions;
};

struct GoalDecl {
  std::string id;
  std::string intent;
  GoalPredicate predicate;
  bool latent = false;
};

struct SlotValue {
  std::string text;
  std::map<std::string, std::string> bindings;
  friend bool operator==(const SlotValue&, const SlotValue&) = default;
};

/// Parameterized intent declared by an environment; the stand-in for summarizing an app's home screen.
struct IntentTemplate {
  std::string id;
  std::string pattern;  // text with {slot} placeholders
  GoalPredicate goal;
  std::map<std::string, std::map<std::string, SlotValue>> slots;  // slot -> value key -> value
  std::map<std::string, std::string> defaults;                      // slot -> value key
};

/// Environment state: the screen plus text/toggle bindings. step_count is excluded from the fingerprint.
struct EnvState {
  std::string screen;
  std::map<std::string, std::string> bindings;
  std::uint64_t step_count = 0;
  bool terminated = false;
  friend bool operator==(const EnvState&, const EnvState&) = default;
};

inline std::string canonical_state(const std::string& screen, const std::map<std::string, std::string>& bindings) {
  std::string s = screen;
  s += '\x1e';
  for (const auto& [k, v] : bindings) {
    s += k;
    s += '\x1f';
    s += v;
    s += '\x1e';
  }
  return s;
}

inline std::string fingerprint(const std::string& screen, const std::map<std::string, std::string>& bindings) {
  // streaming form of fnv1a64(canonical_state(screen, bindings))
  std::uint64_t h = fnv1a64(screen);
  h = fnv1a64("\x1e", h);
  for (const auto& [k, v] : bindings) {
    h = fnv1a64(k, h);
    h = fnv1a64("\x1f", h);
    h = fnv1a64(v, h);
    h = fnv1a64("\x1e", h);
  }
  return to_hex(h);
}

inline std::string fingerprint(const EnvState& s) { return fingerprint(s.screen, s.bindings); }

/// What the agents see: a screenshot stand-in (fingerprint) plus the visible widgets.
struct Observation {
  std::string fingerprint;
  std::string screen_id;
  std::string title;
  std::map<std::string, std::string> bindings;
  std::shared_ptr<const std::vector<std::string>> widgets;
  std::string screenshot_ref;
};

inline json to_json(const Observation& o) {
  json j{{"fingerprint", o.fingerprint}, {"screen_id", o.screen_id}, {"title", o.title},
         {"bindings", o.bindings},       {"widgets", o.widgets ? *o.widgets : std::vector<std::string>{}}};
  if (!o.screenshot_ref.empty()) j["screenshot_ref"] = o.screenshot_ref;
  return j;
}

struct Transition {
  EnvState next;
  TransitionOutcome outcome;
};


enum class GoalStatus { satisfied, violated, open };

inline const char* to_string(GoalStatus g) {
  switch (g) {
    case GoalStatus::satisfied: return "satisfied";
    case GoalStatus::violated: return "violated";
    case GoalStatus::open: return "open";
  }
  return "?";
}

class ScreenGraph;

namespace detail {
/// Every state reachable from the initial state under canonical actions, with its successor list.
struct StateSpace {
  std::vector<EnvState> states;
  std::unordered_map<std::string, std::size_t> index;  // fingerprint -> state index
  std::vector<std::vector<std::size_t>> successors;
};
}  // namespace detail

class ScreenGraph {
 public:
  static constexpr std::size_t kMaxStates = 200000;

  std::string name;
  ScreenBounds bounds;
  std::uint64_t rng_seed = 0;
  std::string initial_screen;
  std::map<std::string, Screen> screens;
  std::vector<GoalDecl> goals;
  std::vector<IntentTemplate> templates;
  std::string digest;

  const Screen& screen(const std::string& id) const {
    auto it = screens.find(id);
    if (it == screens.end()) throw NotFoundError("no screen '" + id + "'");
    return it->second;
  }

  EnvState initial_state() const { return EnvState{initial_screen, {}, 0, false}; }

  const GoalDecl* find_goal(const std::string& id) const {
    for (const auto& g : goals)
      if (g.id == id) return &g;
    return nullptr;
  }

  std::vector<const GoalDecl*> latent_goals() const {
    std::vector<const GoalDecl*> out;
    for (const auto& g : goals)
      if (g.latent) out.push_back(&g);
    return out;
  }

  const IntentTemplate& intent_template(const std::string& id) const {
    for (const auto& t : templates)
      if (t.id == id) return t;
    throw NotFoundError("environment '" + name + "' has no intent template '" + id + "'");
  }

  /// Goal predicate for an intent: its attached predicate, else a declared goal with identical text.
  GoalPredicate resolve_goal(const IntentRecord& intent) const {
    if (intent.goal) return *intent.goal;
    for (const auto& g : goals)
      if (g.intent == intent.text) return g.predicate;
    throw UnknownIntentError("environment '" + name + "' has no goal for intent \"" + intent.text + "\"");
  }

  IntentRecord seed_intent(const std::string& goal_id, Stage stage = Stage::warmup) const {
    const GoalDecl* g = find_goal(goal_id);
    if (!g) throw NotFoundError("environment '" + name + "' has no goal '" + goal_id + "'");
    IntentRecord r = make_seed_intent(g->intent, stage);
    r.goal = g->predicate;
    return r;
  }

  /// BFS distance from `from` to the nearest state satisfying `goal`; nullopt when unreachable.
  std::optional<unsigned> distance(const EnvState& from, const GoalPredicate& goal) const;
  std::optional<unsigned> distance_from_initial(const GoalPredicate& goal) const { return distance(initial_state(), goal); }

  /// One BFS-optimal canonical action sequence from `from` to `goal`.
  std::optional<std::vector<GuiAction>> shortest_path(const EnvState& from, const GoalPredicate& goal) const;

  std::size_t reachable_state_count() const { return space_->states.size(); }

  friend std::shared_ptr<const ScreenGraph> load_environment(const json& j, const std::string& source);

 private:
  std::shared_ptr<const detail::StateSpace> space_;
  struct DistanceCache {
    std::mutex mu;
    std::map<std::string, std::shared_ptr<const std::vector<int>>> tables;  // predicate key -> distance per state
  };
  std::shared_ptr<DistanceCache> cache_ = std::make_shared<DistanceCache>();

  std::shared_ptr<const std::vector<int>> distance_table(const GoalPredicate& goal) const;
  void build_state_space();
};

// ---------------------------------------------------------------------------------------------
// Transition function

namespace detail {

inline bool swipe_matches(const Widget& w, const action::Swipe& s) {
  if (!w.rect.contains(s.from)) return false;
  const int dx = s.to.x - s.from.x;
  const int dy = s.to.y - s.from.y;
  const int adx = dx < 0 ? -dx : dx;
  const int ady = dy < 0 ? -dy : dy;
  if (std::max(adx, ady) < 100) return false;
  switch (w.direction) {
    case SwipeDirection::up: return ady >= adx && dy < 0;
    case SwipeDirection::down: return ady >= adx && dy > 0;
    case SwipeDirection::left: return adx > ady && dx < 0;
    case SwipeDirection::right: return adx > ady && dx > 0;
  }
  return false;
}

inline const Widget* hit_test(const Screen& screen, const GuiAction& a) {
  for (const auto& w : screen.widgets) {
    if (auto* c = a.as<action::Click>(); c && w.kind == WidgetKind::click && w.rect.contains(c->at)) return &w;
    if (auto* l = a.as<action::LongPress>(); l && w.kind == WidgetKind::long_press && w.rect.contains(l->at)) return &w;
    if (auto* s = a.as<action::Swipe>(); s && w.kind == WidgetKind::swipe && swipe_matches(w, *s)) return &w;
  }
  return nullptr;
}

}  // namespace detail

/// Pure transition function of the synthetic environment. step_count always advances by one.
inline Transition step(const ScreenGraph& g, const EnvState& s, const GuiAction& a) {
  Transition t{s, TransitionOutcome::no_op};
  t.next.step_count = s.step_count + 1;
  const Screen& screen = g.screen(s.screen);
  auto apply = [&](const std::map<std::string, std::string>& set, const std::optional<std::string>& target) {
    for (const auto& [k, v] : set) t.next.bindings[k] = v;
    if (target) t.next.screen = *target;
    t.outcome = TransitionOutcome::moved;
  };
  switch (a.kind()) {
    case ActionKind::click:
    case ActionKind::long_press:
    case ActionKind::swipe:
      if (const Widget* w = detail::hit_test(screen, a)) apply(w->set, w->target);
      break;
    case ActionKind::type:
      if (screen.text_field) apply({{screen.text_field->name, a.as<action::Type>()->text}}, std::nullopt);
      break;
    case ActionKind::key:
      if (auto it = screen.keys.find(a.as<action::Key>()->name); it != screen.keys.end()) apply(it->second.set, std::nullopt);
      break;
    case ActionKind::wait:
      break;
    case ActionKind::system_button:
      if (auto it = screen.buttons.find(a.as<action::Button>()->button); it != screen.buttons.end())
        apply({}, it->second);
      break;
    case ActionKind::terminate:
      t.next.terminated = true;
      t.outcome = TransitionOutcome::terminated;
      break;
  }
  return t;
}

namespace detail {

inline std::vector<LabeledAction> canonical_actions(const ScreenBounds& bounds, const Screen& screen) {
  std::vector<LabeledAction> out;
  for (const auto& w : screen.widgets) {
    const Point c = w.rect.center();
    switch (w.kind) {
      case WidgetKind::click: out.push_back({GuiAction::click(c), "tap '" + w.label + "'"}); break;
      case WidgetKind::long_press: out.push_back({GuiAction::long_press(c, 1.0), "long press '" + w.label + "'"}); break;
      case WidgetKind::swipe: {
        Point to = c;
        const int dx = bounds.width * 3 / 10;
        const int dy = bounds.height * 3 / 10;
        switch (w.direction) {
          case SwipeDirection::up: to.y = std::max(0, c.y - dy); break;
          case SwipeDirection::down: to.y = std::min(bounds.height - 1, c.y + dy); break;
          case SwipeDirection::left: to.x = std::max(0, c.x - dx); break;
          case SwipeDirection::right: to.x = std::min(bounds.width - 1, c.x + dx); break;
        }
        out.push_back({GuiAction::swipe(c, to), "swipe '" + w.label + "'"});
        break;
      }
    }
  }
  if (screen.text_field)
    for (const auto& opt : screen.text_field->options)
      out.push_back({GuiAction::type(opt), "type '" + opt + "' into " + screen.text_field->name});
  for (const auto& [name, _] : screen.keys) out.push_back({GuiAction::key(name), "press key " + name});
  for (const auto& [button, _] : screen.buttons)
    out.push_back({GuiAction::press(button), std::string("press ") + to_string(button)});
  return out;
}

inline std::vector<std::string> widget_descriptions(const Screen& screen) {
  std::vector<std::string> out;
  for (const auto& w : screen.widgets) {
    out.push_back(w.id + " '" + w.label + "' [" +
                  (w.kind == WidgetKind::click ? "click" : w.kind == WidgetKind::long_press ? "long_press" : "swipe") +
                  "] rect=" + std::to_string(w.rect.x0) + "," + std::to_string(w.rect.y0) + "," +
                  std::to_string(w.rect.x1) + "," + std::to_string(w.rect.y1));
  }
  if (screen.text_field) out.push_back("text field '" + screen.text_field->name + "'");
  return out;
}

}  // namespace detail

/// Canonical action per interactive element of the current screen, in declaration order.
/// Wait and terminate are never listed.
inline std::vector<LabeledAction> legal_actions(const ScreenGraph& g, const EnvState& s) {
  if (s.terminated) return {};
  const Screen& screen = g.screen(s.screen);
  if (screen.actions) return *screen.actions;
  return detail::canonical_actions(g.bounds, screen);
}

inline GoalStatus goal_check(const ScreenGraph& g, const GoalPredicate& goal, const std::string& screen,
                             const std::map<std::string, std::string>& bindings) {
  if (goal.holds(screen, bindings)) return GoalStatus::satisfied;
  if (g.screen(screen).dead_end) return GoalStatus::violated;
  return GoalStatus::open;
}

inline GoalStatus goal_check(const ScreenGraph& g, const GoalPredicate& goal, const EnvState& s) {
  return goal_check(g, goal, s.screen, s.bindings);
}

/// Ground-truth check of an intent against a state. Throws UnknownIntentError when the environment
/// declares no predicate for the intent.
inline GoalStatus goal_check(const ScreenGraph& g, const IntentRecord& intent, const EnvState& s) {
  if (intent.goal) return goal_check(g, *intent.goal, s);
  return goal_check(g, g.resolve_goal(intent), s);
}

inline Observation observe_state(const ScreenGraph& g, const EnvState& s) {
  const Screen& screen = g.screen(s.screen);
  Observation o;
  o.fingerprint = fingerprint(s);
  o.screen_id = s.screen;
  o.title = screen.title;
  o.bindings = s.bindings;
  o.widgets = screen.descriptions ? screen.descriptions
                                  : std::make_shared<const std::vector<std::string>>(detail::widget_descriptions(screen));
  return o;
}

/// State reconstructed from what an observation shows. Step count is not observable.
inline EnvState state_of(const Observation& o) { return EnvState{o.screen_id, o.bindings, 0, false}; }

// ---------------------------------------------------------------------------------------------
// State space and distances

inline void ScreenGraph::build_state_space() {
  auto space = std::make_shared<detail::StateSpace>();
  std::deque<std::size_t> queue;
  auto intern = [&](EnvState s) -> std::size_t {
    s.step_count = 0;
    auto fp = fingerprint(s);
    auto [it, fresh] = space->index.try_emplace(fp, space->states.size());
    if (fresh) {
      if (space->states.size() >= kMaxStates)
        throw ValidationError("environment '" + name + "': reachable state space exceeds " + std::to_string(kMaxStates));
      space->states.push_back(std::move(s));
      space->successors.emplace_back();
      queue.push_back(it->second);
    }
    return it->second;
  };
  intern(initial_state());
  while (!queue.empty()) {
    std::size_t i = queue.front();
    queue.pop_front();
    const EnvState cur = space->states[i];
    std::vector<std::size_t> succ;
    for (const auto& la : legal_actions(*this, cur)) {
      Transition t = step(*this, cur, la.action);
      if (t.outcome != TransitionOutcome::moved) continue;
      succ.push_back(intern(std::move(t.next)));
    }
    space->successors[i] = std::move(succ);
  }
  space_ = std::move(space);
}

inline std::shared_ptr<const std::vector<int>> ScreenGraph::distance_table(const GoalPredicate& goal) const {
  const std::string key = goal.key();
  {
    std::lock_guard lock(cache_->mu);
    if (auto it = cache_->tables.find(key); it != cache_->tables.end()) return it->second;
  }
  const auto& sp = *space_;
  const std::size_t n = sp.states.size();
  std::vector<std::vector<std::size_t>> preds(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : sp.successors[i]) preds[j].push_back(i);
  auto dist = std::make_shared<std::vector<int>>(n, -1);
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < n; ++i)
    if (goal.holds(sp.states[i].screen, sp.states[i].bindings)) {
      (*dist)[i] = 0;
      queue.push_back(i);
    }
  while (!queue.empty()) {
    std::size_t j = queue.front();
    queue.pop_front();
    for (std::size_t i : preds[j])
      if ((*dist)[i] < 0) {
        (*dist)[i] = (*dist)[j] + 1;
        queue.push_back(i);
      }
  }
  std::lock_guard lock(cache_->mu);
  return cache_->tables.try_emplace(key, std::move(dist)).first->second;
}

inline std::optional<unsigned> ScreenGraph::distance(const EnvState& from, const GoalPredicate& goal) const {
  if (auto it = space_->index.find(fingerprint(from)); it != space_->index.end()) {
    int d = (*distance_table(goal))[it->second];
    if (d < 0) return std::nullopt;
    return static_cast<unsigned>(d);
  }
  // states outside the canonical space (free-form typed text) fall back to a direct search
  auto path = shortest_path(from, goal);
  if (!path) return std::nullopt;
  return static_cast<unsigned>(path->size());
}

inline std::optional<std::vector<GuiAction>> ScreenGraph::shortest_path(const EnvState& from, const GoalPredicate& goal) const {
  struct Visit {
    EnvState state;
    std::size_t parent;
    GuiAction via;
  };
  std::vector<Visit> visits;
  std::unordered_map<std::string, std::size_t> seen;
  EnvState start = from;
  start.step_count = 0;
  visits.push_back({start, SIZE_MAX, GuiAction{}});
  seen.emplace(fingerprint(start), 0);
  for (std::size_t head = 0; head < visits.size(); ++head) {
    if (goal.holds(visits[head].state.screen, visits[head].state.bindings)) {
      std::vector<GuiAction> out;
      for (std::size_t i = head; visits[i].parent != SIZE_MAX; i = visits[i].parent) out.push_back(visits[i].via);
      std::reverse(out.begin(), out.end());
      return out;
    }
    if (visits.size() > kMaxStates) break;
    const EnvState cur = visits[head].state;
    for (const auto& la : legal_actions(*this, cur)) {
      Transition t = step(*this, cur, la.action);
      if (t.outcome != TransitionOutcome::moved) continue;
      t.next.step_count = 0;
      if (seen.try_emplace(fingerprint(t.next), visits.size()).second) visits.push_back({std::move(t.next), head, la.action});
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------------------------
// Loading

namespace detail {

inline const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw SchemaError(where + ": missing '" + key + "'");
  return j[key];
}

inline std::string str_field(const json& j, const char* key, const std::string& where) {
  const json& v = field(j, key, where);
  if (!v.is_string()) throw SchemaError(where + "." + key + ": expected string");
  return v.get<std::string>();
}

inline std::map<std::string, std::string> string_map(const json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": expected object of strings");
  std::map<std::string, std::string> m;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_string()) throw SchemaError(where + "." + it.key() + ": expected string");
    m[it.key()] = it.value().get<std::string>();
  }
  return m;
}

inline WidgetKind widget_kind_from_string(const std::string& s, const std::string& where) {
  if (s == "click") return WidgetKind::click;
  if (s == "long_press") return WidgetKind::long_press;
  if (s == "swipe") return WidgetKind::swipe;
  throw SchemaError(where + ": widget kind must be click|long_press|swipe, got '" + s + "'");
}

inline SwipeDirection direction_from_string(const std::string& s, const std::string& where) {
  if (s == "up") return SwipeDirection::up;
  if (s == "down") return SwipeDirection::down;
  if (s == "left") return SwipeDirection::left;
  if (s == "right") return SwipeDirection::right;
  throw SchemaError(where + ": direction must be up|down|left|right");
}

inline Rect rect_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw SchemaError(where + ": expected [x0, y0, x1, y1]");
  for (const auto& v : j)
    if (!v.is_number_integer()) throw SchemaError(where + ": expected integer pixels");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace detail

/// Parses and validates an "m2env/1" document. `source` prefixes error messages.
inline std::shared_ptr<const ScreenGraph> load_environment(const json& j, const std::string& source = "env") {
  using namespace detail;
  auto g = std::make_shared<ScreenGraph>();
  if (!j.is_object()) throw SchemaError(source + ": expected JSON object");
  if (j.value("schema", "") != kEnvSchema) throw SchemaError(source + ".schema: expected \"m2env/1\"");
  g->name = str_field(j, "name", source);
  if (j.contains("screen")) {
    const json& b = j["screen"];
    if (!b.is_object() || !b.contains("width") || !b.contains("height") || !b["width"].is_number_integer() ||
        !b["height"].is_number_integer())
      throw SchemaError(source + ".screen: expected {width, height}");
    g->bounds = {b["width"].get<int>(), b["height"].get<int>()};
    if (g->bounds.width <= 0 || g->bounds.height <= 0) throw SchemaError(source + ".screen: bounds must be positive");
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw SchemaError(source + ".seed: expected non-negative integer");
    g->rng_seed = j["seed"].get<std::uint64_t>();
  }
  g->initial_screen = str_field(j, "initial_screen", source);

  const json& screens = field(j, "screens", source);
  if (!screens.is_array() || screens.empty()) throw SchemaError(source + ".screens: expected non-empty array");
  std::vector<std::pair<std::string, std::string>> references;  // (where, screen id)
  for (std::size_t i = 0; i < screens.size(); ++i) {
    const std::string where = source + ".screens[" + std::to_string(i) + "]";
    const json& js = screens[i];
    Screen s;
    s.id = str_field(js, "id", where);
    const std::string sw = source + ".screens[" + s.id + "]";
    s.title = js.value("title", s.id);
    s.dead_end = js.value("dead_end", false);
    s.terminal = js.value("terminal", false);
    if (js.contains("widgets")) {
      const json& ws = js["widgets"];
      if (!ws.is_array()) throw SchemaError(sw + ".widgets: expected array");
      for (std::size_t k = 0; k < ws.size(); ++k) {
        const std::string ww = sw + ".widgets[" + std::to_string(k) + "]";
        Widget w;
        w.id = str_field(ws[k], "id", ww);
        w.label = ws[k].value("label", w.id);
        w.kind = widget_kind_from_string(ws[k].value("kind", "click"), ww + ".kind");
        w.rect = rect_from_json(field(ws[k], "rect", ww), ww + ".rect");
        if (w.rect.x0 < 0 || w.rect.y0 < 0 || w.rect.x1 > g->bounds.width || w.rect.y1 > g->bounds.height ||
            w.rect.x0 >= w.rect.x1 || w.rect.y0 >= w.rect.y1)
          throw ValidationError(ww + ".rect: hit-region must be non-empty and inside the screen bounds");
        if (w.kind == WidgetKind::swipe) w.direction = direction_from_string(str_field(ws[k], "direction", ww), ww + ".direction");
        if (ws[k].contains("target")) {
          w.target = str_field(ws[k], "target", ww);
          references.emplace_back(ww + ".target", *w.target);
        }
        if (ws[k].contains("set")) w.set = string_map(ws[k]["set"], ww + ".set");
        s.widgets.push_back(std::move(w));
      }
    }
    if (js.contains("text_field")) {
      const json& tf = js["text_field"];
      TextField f;
      f.name = str_field(tf, "name", sw + ".text_field");
      if (tf.contains("options")) {
        if (!tf["options"].is_array()) throw SchemaError(sw + ".text_field.options: expected array");
        for (const auto& o : tf["options"]) {
          if (!o.is_string() || o.get<std::string>().empty()) throw SchemaError(sw + ".text_field.options: expected non-empty strings");
          f.options.push_back(o.get<std::string>());
        }
      }
      s.text_field = std::move(f);
    }
    if (js.contains("keys")) {
      if (!js["keys"].is_object()) throw SchemaError(sw + ".keys: expected object");
      for (auto it = js["keys"].begin(); it != js["keys"].end(); ++it)
        s.keys[it.key()] = KeyBinding{string_map(field(it.value(), "set", sw + ".keys." + it.key()), sw + ".keys." + it.key() + ".set")};
    }
    if (js.contains("buttons")) {
      if (!js["buttons"].is_object()) throw SchemaError(sw + ".buttons: expected object");
      for (auto it = js["buttons"].begin(); it != js["buttons"].end(); ++it) {
        SystemButton b;
        try {
          b = system_button_from_string(it.key());
        } catch (const SchemaError&) {
          throw SchemaError(sw + ".buttons." + it.key() + ": expected Back|Home|Menu|Enter");
        }
        if (!it.value().is_string()) throw SchemaError(sw + ".buttons." + it.key() + ": expected screen id");
        s.buttons[b] = it.value().get<std::string>();
        references.emplace_back(sw + ".buttons." + it.key(), s.buttons[b]);
      }
    }
    const bool interactive = !s.widgets.empty() || s.text_field || !s.keys.empty() || !s.buttons.empty();
    if (!interactive && !s.terminal && !s.dead_end)
      throw ValidationError(sw + ": non-terminal screen needs at least one widget");
    if (!g->screens.emplace(s.id, s).second) throw SchemaError(sw + ": duplicate screen id");
  }
  for (auto& [id, screen] : g->screens) {
    screen.actions = std::make_shared<const std::vector<LabeledAction>>(canonical_actions(g->bounds, screen));
    screen.descriptions = std::make_shared<const std::vector<std::string>>(widget_descriptions(screen));
  }
  if (!g->screens.count(g->initial_screen))
    throw ValidationError(source + ".initial_screen: dangling screen reference \"" + g->initial_screen + "\"");
  for (const auto& [where, id] : references)
    if (!g->screens.count(id)) throw ValidationError(where + ": dangling screen reference \"" + id + "\"");

  if (j.contains("goals")) {
    const json& gs = j["goals"];
    if (!gs.is_array()) throw SchemaError(source + ".goals: expected array");
    for (std::size_t i = 0; i < gs.size(); ++i) {
      const std::string where = source + ".goals[" + std::to_string(i) + "]";
      GoalDecl d;
      d.id = str_field(gs[i], "id", where);
      d.intent = str_field(gs[i], "intent", where);
      if (d.intent.empty()) throw SchemaError(where + ".intent: empty");
      d.predicate = goal_from_json(field(gs[i], "predicate", where), where + ".predicate");
      d.latent = gs[i].value("latent", false);
      if (d.predicate.screen && !g->screens.count(*d.predicate.screen))
        throw ValidationError(where + ".predicate.screen: dangling screen reference \"" + *d.predicate.screen + "\"");
      if (g->find_goal(d.id)) throw SchemaError(where + ": duplicate goal id");
      g->goals.push_back(std::move(d));
    }
  }

  if (j.contains("intent_templates")) {
    const json& ts = j["intent_templates"];
    if (!ts.is_array()) throw SchemaError(source + ".intent_templates: expected array");
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const std::string where = source + ".intent_templates[" + std::to_string(i) + "]";
      IntentTemplate t;
      t.id = str_field(ts[i], "id", where);
      t.pattern = str_field(ts[i], "pattern", where);
      t.goal = goal_from_json(field(ts[i], "goal", where), where + ".goal");
      const json& slots = field(ts[i], "slots", where);
      if (!slots.is_object()) throw SchemaError(where + ".slots: expected object");
      for (auto it = slots.begin(); it != slots.end(); ++it) {
        const std::string sw = where + ".slots." + it.key();
        const json& values = field(it.value(), "values", sw);
        if (!values.is_object() || values.empty()) throw SchemaError(sw + ".values: expected non-empty object");
        for (auto v = values.begin(); v != values.end(); ++v) {
          SlotValue sv;
          sv.text = str_field(v.value(), "text", sw + ".values." + v.key());
          if (v.value().contains("bindings")) sv.bindings = string_map(v.value()["bindings"], sw + ".values." + v.key() + ".bindings");
          t.slots[it.key()][v.key()] = std::move(sv);
        }
        std::string def = str_field(it.value(), "default", sw);
        if (!t.slots[it.key()].count(def)) throw SchemaError(sw + ".default: unknown value '" + def + "'");
        t.defaults[it.key()] = def;
      }
      g->templates.push_back(std::move(t));
    }
  }

  g->digest = to_hex(fnv1a64(j.dump()));
  g->build_state_space();
  for (const auto& goal : g->goals)
    if (goal.latent && !g->distance_from_initial(goal.predicate))
      throw ValidationError(source + ".goals[" + goal.id + "]: latent goal is unreachable from the initial state");
  return g;
}

inline std::shared_ptr<const ScreenGraph> load_environment_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open environment file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError(path + ": " + e.what());
  }
  return load_environment(j, path);
}

// ---------------------------------------------------------------------------------------------
// Sessions

struct SnapshotToken {
  std::string graph_digest;
  EnvState state;
};

/// Exclusive controller over one environment instance. Move-only.
class EnvSession {
 public:
  EnvSession(std::shared_ptr<const ScreenGraph> graph, std::uint64_t id)
      : graph_(std::move(graph)), id_(id), state_(graph_->initial_state()) {}

  EnvSession(EnvSession&&) noexcept = default;
  EnvSession& operator=(EnvSession&&) noexcept = default;
  EnvSession(const EnvSession&) = delete;
  EnvSession& operator=(const EnvSession&) = delete;

  std::uint64_t id() const { return id_; }
  const EnvState& state() const { return state_; }
  std::uint64_t env_steps() const { return env_steps_; }
  bool closed() const { return closed_; }
  const ScreenGraph& graph() const { return *graph_; }

  Observation observe() const {
    require_open();
    return observe_state(*graph_, state_);
  }

  /// Executes one action. Every call counts toward env_steps, including no-ops.
  std::pair<std::string, TransitionOutcome> execute(const GuiAction& a) {
    require_open();
    if (state_.terminated) throw SessionError("session " + std::to_string(id_) + " is frozen after terminate");
    a.validate(graph_->bounds);
    Transition t = step(*graph_, state_, a);
    state_ = std::move(t.next);
    ++env_steps_;
    return {fingerprint(state_), t.outcome};
  }

  SnapshotToken snapshot() const {
    require_open();
    return {graph_->digest, state_};
  }

  /// Restores a snapshot. The env_steps counter is not rolled back.
  void restore(const SnapshotToken& token) {
    require_open();
    if (token.graph_digest != graph_->digest) throw TokenError("snapshot token belongs to a different environment");
    state_ = token.state;
  }

  void close() { closed_ = true; }

 private:
  void require_open() const {
    if (closed_) throw SessionError("session " + std::to_string(id_) + " is closed");
  }

  std::shared_ptr<const ScreenGraph> graph_;
  std::uint64_t id_;
  EnvState state_;
  std::uint64_t env_steps_ = 0;
  bool closed_ = false;
};

/// Synthetic environment handle; sessions over one immutable graph may run on different threads.
class SyntheticEnvironment {
 public:
  using Session = EnvSession;

  explicit SyntheticEnvironment(std::shared_ptr<const ScreenGraph> graph) : graph_(std::move(graph)) {}

  EnvSession open_session() const { return EnvSession(graph_, next_id_->fetch_add(1) + 1); }
  std::vector<LabeledAction> legal_actions(const Observation& o) const {
    return m2::legal_actions(*graph_, EnvState{o.screen_id, {}, 0, false});
  }
  GoalStatus goal_check(const IntentRecord& intent, const Observation& o) const {
    if (intent.goal) return m2::goal_check(*graph_, *intent.goal, o.screen_id, o.bindings);
    return m2::goal_check(*graph_, graph_->resolve_goal(intent), o.screen_id, o.bindings);
  }
  const ScreenBounds& bounds() const { return graph_->bounds; }
  const ScreenGraph& graph() const { return *graph_; }
  std::shared_ptr<const ScreenGraph> graph_ptr() const { return graph_; }

 private:
  std::shared_ptr<const ScreenGraph> graph_;
  std::shared_ptr<std::atomic<std::uint64_t>> next_id_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

}  // namespace m2
