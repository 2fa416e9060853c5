#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <memory>
#include <mutex>
#include <string>

#include <json.hpp>

namespace m2 {

enum class LogLevel { debug, info, warn, error };

inline const char* to_string(LogLevel l) {
  switch (l) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warn: return "warn";
    case LogLevel::error: return "error";
  }
  return "?";
}

/// Replaces every occurrence of `secret` with "***". Empty secrets are ignored.
inline std::string redact(std::string text, const std::string& secret) {
  if (secret.empty()) return text;
  for (std::size_t pos = text.find(secret); pos != std::string::npos; pos = text.find(secret, pos + 3))
    text.replace(pos, secret.size(), "***");
  return text;
}

/// One JSON object per line. The sink is injectable so tests can capture output.
class Logger {
 public:
  using Sink = std::function<void(const std::string&)>;

  explicit Logger(Sink sink = stderr_sink(), LogLevel min = LogLevel::info)
      : sink_(std::move(sink)), min_(min), mu_(std::make_shared<std::mutex>()) {}

  static Sink stderr_sink() {
    return [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
  }

  static Logger null() {
    return Logger([](const std::string&) {}, LogLevel::error);
  }

  /// Every emitted line passes through redact() for each registered secret.
  void add_secret(std::string s) {
    if (!s.empty()) secrets_.push_back(std::move(s));
  }

  void log(LogLevel level, const std::string& event, nlohmann::json fields = nlohmann::json::object()) const {
    if (level < min_ || !sink_) return;
    nlohmann::json j;
    j["ts"] = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    j["level"] = to_string(level);
    j["event"] = event;
    if (!fields.is_null()) j["fields"] = std::move(fields);
    std::string line = j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    for (const auto& s : secrets_) line = redact(std::move(line), s);
    std::lock_guard lock(*mu_);
    sink_(line);
  }

  void info(const std::string& e, nlohmann::json f = nlohmann::json::object()) const { log(LogLevel::info, e, std::move(f)); }
  void warn(const std::string& e, nlohmann::json f = nlohmann::json::object()) const { log(LogLevel::warn, e, std::move(f)); }
  void debug(const std::string& e, nlohmann::json f = nlohmann::json::object()) const { log(LogLevel::debug, e, std::move(f)); }

 private:
  Sink sink_;
  LogLevel min_;
  std::vector<std::string> secrets_;
  std::shared_ptr<std::mutex> mu_;
};

}  // namespace m2
