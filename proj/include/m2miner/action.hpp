#pragma once

#include <cmath>
#include <compare>
#include <optional>
#include <string>
#include <variant>

#include <json.hpp>

#include "error.hpp"

namespace m2 {

using json = nlohmann::json;

struct Point {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point&, const Point&) = default;
  friend auto operator<=>(const Point&, const Point&) = default;
};

/// Screen extent in pixels. Valid coordinates satisfy 0 <= x < width, 0 <= y < height.
struct ScreenBounds {
  int width = 1080;
  int height = 2400;
  bool contains(Point p) const { return p.x >= 0 && p.y >= 0 && p.x < width && p.y < height; }
};

enum class ActionKind { click, long_press, swipe, type, key, wait, system_button, terminate };
enum class SystemButton { back, home, menu, enter };
enum class TerminateStatus { success, failure };

namespace action {
struct Click {
  Point at;
  friend bool operator==(const Click&, const Click&) = default;
};
struct LongPress {
  Point at;
  double seconds = 1.0;
  friend bool operator==(const LongPress&, const LongPress&) = default;
};
struct Swipe {
  Point from;
  Point to;
  friend bool operator==(const Swipe&, const Swipe&) = default;
};
struct Type {
  std::string text;
  friend bool operator==(const Type&, const Type&) = default;
};
struct Key {
  std::string name;
  friend bool operator==(const Key&, const Key&) = default;
};
struct Wait {
  double seconds = 1.0;
  friend bool operator==(const Wait&, const Wait&) = default;
};
struct Button {
  SystemButton button = SystemButton::back;
  friend bool operator==(const Button&, const Button&) = default;
};
struct Terminate {
  TerminateStatus status = TerminateStatus::success;
  friend bool operator==(const Terminate&, const Terminate&) = default;
};
}  // namespace action

inline const char* to_string(ActionKind k) {
  switch (k) {
    case ActionKind::click: return "click";
    case ActionKind::long_press: return "long_press";
    case ActionKind::swipe: return "swipe";
    case ActionKind::type: return "type";
    case ActionKind::key: return "key";
    case ActionKind::wait: return "wait";
    case ActionKind::system_button: return "system_button";
    case ActionKind::terminate: return "terminate";
  }
  return "?";
}

inline const char* to_string(SystemButton b) {
  switch (b) {
    case SystemButton::back: return "Back";
    case SystemButton::home: return "Home";
    case SystemButton::menu: return "Menu";
    case SystemButton::enter: return "Enter";
  }
  return "?";
}

inline const char* to_string(TerminateStatus s) { return s == TerminateStatus::success ? "success" : "failure"; }

inline ActionKind action_kind_from_string(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(ActionKind::terminate); ++i) {
    auto k = static_cast<ActionKind>(i);
    if (s == to_string(k)) return k;
  }
  throw SchemaError("unknown action kind '" + s + "'");
}

inline SystemButton system_button_from_string(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(SystemButton::enter); ++i) {
    auto b = static_cast<SystemButton>(i);
    if (s == to_string(b)) return b;
  }
  throw SchemaError("unknown system button '" + s + "'");
}

/// What executing an action did to the environment.
enum class TransitionOutcome { moved, no_op, terminated };

inline const char* to_string(TransitionOutcome o) {
  switch (o) {
    case TransitionOutcome::moved: return "moved";
    case TransitionOutcome::no_op: return "no_op";
    case TransitionOutcome::terminated: return "terminated";
  }
  return "?";
}

inline TransitionOutcome outcome_from_string(const std::string& s) {
  if (s == "moved") return TransitionOutcome::moved;
  if (s == "no_op") return TransitionOutcome::no_op;
  if (s == "terminated") return TransitionOutcome::terminated;
  throw SchemaError("unknown transition outcome '" + s + "'");
}

/// One GUI operation. The variant makes the per-kind parameter set structural: a click cannot carry text.
class GuiAction {
 public:
  using Variant = std::variant<action::Click, action::LongPress, action::Swipe, action::Type, action::Key,
                               action::Wait, action::Button, action::Terminate>;

  GuiAction() : v_(action::Wait{}) {}
  GuiAction(Variant v) : v_(std::move(v)) {}  // NOLINT(google-explicit-constructor)

  static GuiAction click(Point p) { return Variant{action::Click{p}}; }
  static GuiAction long_press(Point p, double seconds) { return Variant{action::LongPress{p, seconds}}; }
  static GuiAction swipe(Point from, Point to) { return Variant{action::Swipe{from, to}}; }
  static GuiAction type(std::string text) { return Variant{action::Type{std::move(text)}}; }
  static GuiAction key(std::string name) { return Variant{action::Key{std::move(name)}}; }
  static GuiAction wait(double seconds) { return Variant{action::Wait{seconds}}; }
  static GuiAction press(SystemButton b) { return Variant{action::Button{b}}; }
  static GuiAction terminate(TerminateStatus s) { return Variant{action::Terminate{s}}; }

  ActionKind kind() const { return static_cast<ActionKind>(v_.index()); }
  const Variant& get() const { return v_; }

  template <class T>
  const T* as() const {
    return std::get_if<T>(&v_);
  }

  /// Primary coordinate for click, long_press and swipe.
  std::optional<Point> coordinate() const {
    if (auto* c = as<action::Click>()) return c->at;
    if (auto* l = as<action::LongPress>()) return l->at;
    if (auto* s = as<action::Swipe>()) return s->from;
    return std::nullopt;
  }

  friend bool operator==(const GuiAction&, const GuiAction&) = default;

  /// Throws ValidationError on out-of-bounds coordinates, negative durations or empty text.
  void validate(const ScreenBounds& bounds) const {
    auto check_point = [&](Point p, const char* what) {
      if (!bounds.contains(p))
        throw ValidationError(std::string(to_string(kind())) + ": " + what + " (" + std::to_string(p.x) + "," +
                              std::to_string(p.y) + ") outside screen " + std::to_string(bounds.width) + "x" +
                              std::to_string(bounds.height));
    };
    auto check_time = [&](double s) {
      if (!(s >= 0.0) || !std::isfinite(s)) throw ValidationError(std::string(to_string(kind())) + ": negative or non-finite time");
    };
    std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, action::Click>) {
            check_point(a.at, "coordinate");
          } else if constexpr (std::is_same_v<T, action::LongPress>) {
            check_point(a.at, "coordinate");
            check_time(a.seconds);
          } else if constexpr (std::is_same_v<T, action::Swipe>) {
            check_point(a.from, "coordinate");
            check_point(a.to, "coordinate2");
          } else if constexpr (std::is_same_v<T, action::Type>) {
            if (a.text.empty()) throw ValidationError("type: empty text");
          } else if constexpr (std::is_same_v<T, action::Key>) {
            if (a.name.empty()) throw ValidationError("key: empty key name");
          } else if constexpr (std::is_same_v<T, action::Wait>) {
            check_time(a.seconds);
          }
        },
        v_);
  }

  /// Short human-readable form, e.g. click(540,1200) or type("London").
  std::string summary() const {
    auto pt = [](Point p) { return std::to_string(p.x) + "," + std::to_string(p.y); };
    return std::visit(
        [&](const auto& a) -> std::string {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, action::Click>) return "click(" + pt(a.at) + ")";
          else if constexpr (std::is_same_v<T, action::LongPress>)
            return "long_press(" + pt(a.at) + "," + fmt_seconds(a.seconds) + "s)";
          else if constexpr (std::is_same_v<T, action::Swipe>) return "swipe(" + pt(a.from) + "->" + pt(a.to) + ")";
          else if constexpr (std::is_same_v<T, action::Type>) return "type(\"" + a.text + "\")";
          else if constexpr (std::is_same_v<T, action::Key>) return "key(" + a.name + ")";
          else if constexpr (std::is_same_v<T, action::Wait>) return "wait(" + fmt_seconds(a.seconds) + "s)";
          else if constexpr (std::is_same_v<T, action::Button>) return std::string("system_button(") + to_string(a.button) + ")";
          else return std::string("terminate(") + to_string(a.status) + ")";
        },
        v_);
  }

 private:
  static std::string fmt_seconds(double s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", s);
    return buf;
  }

  Variant v_;
};

inline json point_to_json(Point p) { return json::array({p.x, p.y}); }

inline Point point_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw SchemaError(where + ": expected [x, y]");
  auto to_int = [&](const json& v) {
    double d = v.get<double>();
    if (!std::isfinite(d)) throw SchemaError(where + ": non-finite coordinate");
    return static_cast<int>(std::lround(d));
  };
  return {to_int(j[0]), to_int(j[1])};
}

/// Canonical JSON form: {"kind": ..., <exactly the parameters of that kind>}.
inline json to_json(const GuiAction& a) {
  json j;
  j["kind"] = to_string(a.kind());
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, action::Click>) {
          j["coordinate"] = point_to_json(v.at);
        } else if constexpr (std::is_same_v<T, action::LongPress>) {
          j["coordinate"] = point_to_json(v.at);
          j["time"] = v.seconds;
        } else if constexpr (std::is_same_v<T, action::Swipe>) {
          j["coordinate"] = point_to_json(v.from);
          j["coordinate2"] = point_to_json(v.to);
        } else if constexpr (std::is_same_v<T, action::Type> || std::is_same_v<T, action::Key>) {
          if constexpr (std::is_same_v<T, action::Type>) j["text"] = v.text;
          else j["text"] = v.name;
        } else if constexpr (std::is_same_v<T, action::Wait>) {
          j["time"] = v.seconds;
        } else if constexpr (std::is_same_v<T, action::Button>) {
          j["button"] = to_string(v.button);
        } else {
          j["status"] = to_string(v.status);
        }
      },
      a.get());
  return j;
}

namespace detail {
inline void require_exact_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const char* k : keys)
    if (!j.contains(k)) throw SchemaError(where + ": missing '" + k + "'");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = it.key() == "kind";
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw SchemaError(where + ": unexpected parameter '" + it.key() + "'");
  }
}

inline double seconds_from_json(const json& j, const std::string& where) {
  if (!j.is_number()) throw SchemaError(where + ": expected number");
  return j.get<double>();
}

inline std::string string_from_json(const json& j, const std::string& where) {
  if (!j.is_string()) throw SchemaError(where + ": expected string");
  return j.get<std::string>();
}
}  // namespace detail

/// Strict parser for the canonical form. Rejects missing or extra parameters.
inline GuiAction action_from_json(const json& j, const std::string& where = "action") {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) throw SchemaError(where + ": expected object with 'kind'");
  ActionKind k = action_kind_from_string(j["kind"].get<std::string>());
  using detail::require_exact_keys;
  switch (k) {
    case ActionKind::click:
      require_exact_keys(j, {"coordinate"}, where);
      return GuiAction::click(point_from_json(j["coordinate"], where + ".coordinate"));
    case ActionKind::long_press:
      require_exact_keys(j, {"coordinate", "time"}, where);
      return GuiAction::long_press(point_from_json(j["coordinate"], where + ".coordinate"),
                                   detail::seconds_from_json(j["time"], where + ".time"));
    case ActionKind::swipe:
      require_exact_keys(j, {"coordinate", "coordinate2"}, where);
      return GuiAction::swipe(point_from_json(j["coordinate"], where + ".coordinate"),
                              point_from_json(j["coordinate2"], where + ".coordinate2"));
    case ActionKind::type:
      require_exact_keys(j, {"text"}, where);
      return GuiAction::type(detail::string_from_json(j["text"], where + ".text"));
    case ActionKind::key:
      require_exact_keys(j, {"text"}, where);
      return GuiAction::key(detail::string_from_json(j["text"], where + ".text"));
    case ActionKind::wait:
      require_exact_keys(j, {"time"}, where);
      return GuiAction::wait(detail::seconds_from_json(j["time"], where + ".time"));
    case ActionKind::system_button:
      require_exact_keys(j, {"button"}, where);
      return GuiAction::press(system_button_from_string(detail::string_from_json(j["button"], where + ".button")));
    case ActionKind::terminate: {
      require_exact_keys(j, {"status"}, where);
      auto s = detail::string_from_json(j["status"], where + ".status");
      if (s != "success" && s != "failure") throw SchemaError(where + ".status: expected success|failure");
      return GuiAction::terminate(s == "success" ? TerminateStatus::success : TerminateStatus::failure);
    }
  }
  throw SchemaError(where + ": unreachable");
}

}  // namespace m2
