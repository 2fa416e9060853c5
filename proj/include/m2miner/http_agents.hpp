#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <memory>
#include <semaphore>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "agents.hpp"
#include "json_extract.hpp"
#include "log.hpp"

namespace m2 {

/// Prompt templates use {observation}, {intent}, {history}, {candidates} and role-specific slots.
inline std::map<std::string, std::string> default_prompt_templates() {
  return {
      {"system", "You operate an Android phone on behalf of a user. Reply with JSON only."},
      {"infer",
       "Task: {intent}\nCurrent screen: {observation}\nActions so far: {history}\nAlready proposed (do not repeat): "
       "{candidates}\nPropose the next action as {\"action\": {...}, \"rationale\": \"...\"}."},
      {"infer_more",
       "Task: {intent}\nCurrent screen: {observation}\nActions so far: {history}\nAlready proposed (do not repeat): "
       "{candidates}\nPropose {count} other plausible next actions as {\"actions\": [{\"action\": {...}, \"rationale\": \"...\"}]}."},
      {"rank",
       "Task: {intent}\nCurrent screen: {observation}\nOptions: {candidates}\nWhich option makes the most progress? "
       "Reply {\"choice\": <option index>}."},
      {"judge_outcome",
       "Task: {intent}\nActions so far: {history}\nCurrent screen: {observation}\nIs the task complete, impossible to "
       "complete, or still in progress? Reply {\"status\": \"success\" | \"failure\" | \"in_progress\"}."},
      {"judge_process",
       "Task: {intent}\nActions so far: {history}\nCurrent screen: {observation}\nIs the last action a valid step towards "
       "the task? Reply {\"verdict\": \"valid\" | \"invalid\", \"confidence\": <0..1>}."},
      {"filter",
       "Actions: {history}\nFinal screen: {observation}\nRate how coherent and purposeful this action sequence is. Reply "
       "{\"score\": <0..1>}."},
      {"generate",
       "Actions: {history}\nFinal screen: {observation}\nWrite the user request this sequence fulfils. Reply {\"intent\": "
       "\"...\"} or {\"intent\": \"\"} if it fulfils none."},
  };
}

inline std::string fill_template(const std::string& tmpl, const std::map<std::string, std::string>& slots) {
  std::string out;
  out.reserve(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close != std::string::npos) {
        auto it = slots.find(tmpl.substr(i + 1, close - i - 1));
        if (it != slots.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

struct HttpBackendConfig {
  std::string base_url;           // scheme://host[:port][/prefix]; requests go to {base_url}/chat/completions
  std::string model;
  std::string diversity_model;    // proposes the K-1 extra candidates; empty reuses `model`
  double temperature = 0.0;
  double timeout_s = 30.0;
  unsigned retries = 2;
  unsigned max_in_flight = 4;
  std::string api_key_env = "M2_API_KEY";
  double tau_px = 8.0;
  std::map<std::string, std::string> templates = default_prompt_templates();

  void validate() const {
    if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0)
      throw ValidationError("http backend: base_url must start with http:// or https://");
    if (model.empty()) throw ValidationError("http backend: model is required");
    if (!(timeout_s > 0.0)) throw ValidationError("http backend: timeout_s must be > 0");
    if (max_in_flight < 1) throw ValidationError("http backend: max_in_flight must be >= 1");
    if (!(tau_px >= 0.0)) throw ValidationError("http backend: tau_px must be >= 0");
  }
};

inline HttpBackendConfig http_config_from_json(const json& j) {
  HttpBackendConfig c;
  if (!j.is_object()) throw ValidationError("backend: expected object");
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k == "kind") continue;
      if (k == "base_url") c.base_url = it->get<std::string>();
      else if (k == "model") c.model = it->get<std::string>();
      else if (k == "diversity_model") c.diversity_model = it->get<std::string>();
      else if (k == "temperature") c.temperature = it->get<double>();
      else if (k == "timeout_s") c.timeout_s = it->get<double>();
      else if (k == "retries") c.retries = it->get<unsigned>();
      else if (k == "max_in_flight") c.max_in_flight = it->get<unsigned>();
      else if (k == "api_key_env") c.api_key_env = it->get<std::string>();
      else if (k == "tau_px") c.tau_px = it->get<double>();
      else if (k == "templates") {
        for (auto t = it->begin(); t != it->end(); ++t) c.templates[t.key()] = t->get<std::string>();
      } else {
        throw ValidationError("backend: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("backend: ") + e.what());
  }
  c.validate();
  return c;
}

/// Chat-completions client with bounded concurrency, retries and redacted JSON-line logs.
class ChatClient {
 public:
  ChatClient(HttpBackendConfig cfg, Logger log)
      : cfg_(std::move(cfg)), log_(std::move(log)), slots_(std::make_unique<std::counting_semaphore<>>(cfg_.max_in_flight)) {
    cfg_.validate();
    if (const char* k = std::getenv(cfg_.api_key_env.c_str())) key_ = k;
    log_.add_secret(key_);
    const auto scheme_end = cfg_.base_url.find("://") + 3;
    const auto slash = cfg_.base_url.find('/', scheme_end);
    origin_ = cfg_.base_url.substr(0, slash);
    prefix_ = slash == std::string::npos ? "" : cfg_.base_url.substr(slash);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  const HttpBackendConfig& config() const { return cfg_; }
  unsigned long attempts() const { return attempts_.load(); }

  /// Sends one prompt and hands the extracted JSON payload to `parse`. Server errors, timeouts,
  /// transport failures and replies that fail extraction or `parse` are retried; client errors are not.
  template <class F>
  auto request(const std::string& user, const std::string& model, const std::string& image_ref, F&& parse) const
      -> decltype(parse(std::declval<const json&>())) {
    std::optional<HttpError> last;
    for (unsigned attempt = 0; attempt <= cfg_.retries; ++attempt) {
      try {
        const std::string text = complete_once(user, model, image_ref);
        auto j = extract_json(text);
        if (!j) throw HttpError(HttpErrorKind::parse, "model reply contains no JSON payload");
        try {
          return parse(*j);
        } catch (const SchemaError& e) {
          throw HttpError(HttpErrorKind::parse, e.what());
        } catch (const json::exception& e) {
          throw HttpError(HttpErrorKind::parse, e.what());
        }
      } catch (const HttpError& e) {
        log_.warn("http.attempt_failed", {{"attempt", attempt + 1}, {"kind", to_string(e.kind())}, {"error", e.what()}});
        if (e.kind() == HttpErrorKind::client_status) throw;
        last = e;
      }
    }
    throw *last;
  }

  json complete_json(const std::string& user, const std::string& model, const std::string& image_ref = {}) const {
    return request(user, model, image_ref, [](const json& j) { return j; });
  }

 private:
  std::string complete_once(const std::string& user, const std::string& model, const std::string& image_ref) const {
    json content;
    if (image_ref.empty()) {
      content = user;
    } else {
      content = json::array({{{"type", "text"}, {"text", user}}, {{"type", "image_url"}, {"image_url", {{"url", image_ref}}}}});
    }
    const json body{{"model", model},
                    {"temperature", cfg_.temperature},
                    {"messages", json::array({{{"role", "system"}, {"content", cfg_.templates.at("system")}},
                                              {{"role", "user"}, {"content", content}}})}};
    const std::string payload = body.dump();

    slots_->acquire();
    struct Release {
      std::counting_semaphore<>* s;
      ~Release() { s->release(); }
    } release{slots_.get()};
    ++attempts_;

    httplib::Client cli(origin_);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);
    log_.info("http.request", {{"url", cfg_.base_url + "/chat/completions"}, {"model", model}, {"body", payload},
                               {"authorization", key_.empty() ? "none" : "Bearer " + key_}});
    auto res = cli.Post(prefix_ + "/chat/completions", headers, payload, "application/json");
    if (!res) {
      const auto err = res.error();
      const bool timeout = err == httplib::Error::Read || err == httplib::Error::Write ||
                           err == httplib::Error::ConnectionTimeout;
      throw HttpError(timeout ? HttpErrorKind::timeout : HttpErrorKind::transport,
                      "request failed: " + httplib::to_string(err));
    }
    log_.info("http.response", {{"status", res->status}, {"body", res->body}});
    if (res->status >= 500) throw HttpError(HttpErrorKind::server_status, "server returned " + std::to_string(res->status), res->status);
    if (res->status >= 400) throw HttpError(HttpErrorKind::client_status, "server returned " + std::to_string(res->status), res->status);
    auto j = json::parse(res->body, nullptr, false);
    if (j.is_discarded() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
      throw HttpError(HttpErrorKind::parse, "response is not a chat completion");
    const json& msg = j["choices"][0].value("message", json::object());
    if (!msg.contains("content") || !msg["content"].is_string())
      throw HttpError(HttpErrorKind::parse, "chat completion has no text content");
    return msg["content"].get<std::string>();
  }

  HttpBackendConfig cfg_;
  Logger log_;
  std::string key_;
  std::string origin_;
  std::string prefix_;
  std::unique_ptr<std::counting_semaphore<>> slots_;
  mutable std::atomic<unsigned long> attempts_{0};
};

// ---------------------------------------------------------------------------------------------
// Role adapters

namespace detail {

inline std::string actions_text(std::span<const GuiAction> actions) {
  json a = json::array();
  for (const auto& x : actions) a.push_back(to_json(x));
  return a.dump();
}

inline std::map<std::string, std::string> base_slots(const Observation& obs, const std::string& intent,
                                                     std::span<const GuiAction> history) {
  return {{"observation", to_json(obs).dump()}, {"intent", intent}, {"history", actions_text(history)}};
}

/// Reparses a model's action, turning schema errors into retryable parse errors.
inline CandidateAction candidate_from_json(const json& j, CandidateSource src) {
  try {
    if (j.is_object() && j.contains("action")) {
      return {action_from_json(j["action"], "reply.action"), j.value("rationale", ""), src};
    }
    return {action_from_json(j, "reply"), "", src};
  } catch (const SchemaError& e) {
    throw HttpError(HttpErrorKind::parse, e.what());
  }
}

inline bool within(Point a, Point b, double tau) { return std::hypot(a.x - b.x, a.y - b.y) <= tau; }

}  // namespace detail

/// Equivalence without a simulator: same kind, coordinates within tau pixels, identical other parameters.
inline bool equivalent_within(const GuiAction& a, const GuiAction& b, double tau) {
  if (a.kind() != b.kind()) return false;
  if (auto* x = a.as<action::Click>()) return detail::within(x->at, b.as<action::Click>()->at, tau);
  if (auto* x = a.as<action::LongPress>()) {
    auto* y = b.as<action::LongPress>();
    return detail::within(x->at, y->at, tau) && x->seconds == y->seconds;
  }
  if (auto* x = a.as<action::Swipe>()) {
    auto* y = b.as<action::Swipe>();
    return detail::within(x->from, y->from, tau) && detail::within(x->to, y->to, tau);
  }
  return a == b;
}

class HttpInferAgent : public InferAgent {
 public:
  explicit HttpInferAgent(std::shared_ptr<const ChatClient> chat) : chat_(std::move(chat)) {}

  std::vector<CandidateAction> infer_candidates(const Observation& obs, const IntentRecord& intent,
                                                std::span<const GuiAction> history,
                                                std::span<const GuiAction> already, unsigned k) override {
    if (k < 1) throw ContractError("infer_candidates: k must be >= 1");
    const auto& cfg = chat_->config();
    std::vector<GuiAction> seen(already.begin(), already.end());
    std::vector<CandidateAction> out;
    auto accept = [&](CandidateAction c) {
      if (out.size() >= k || std::find(seen.begin(), seen.end(), c.action) != seen.end()) return;
      seen.push_back(c.action);
      out.push_back(std::move(c));
    };
    auto slots = detail::base_slots(obs, intent.text, history);
    slots["candidates"] = detail::actions_text(seen);
    accept(chat_->request(fill_template(cfg.templates.at("infer"), slots), cfg.model, obs.screenshot_ref,
                          [](const json& j) { return detail::candidate_from_json(j, CandidateSource::primary_model); }));
    if (k > 1) {
      slots["candidates"] = detail::actions_text(seen);
      slots["count"] = std::to_string(k - out.size());
      const auto more = chat_->request(
          fill_template(cfg.templates.at("infer_more"), slots),
          cfg.diversity_model.empty() ? cfg.model : cfg.diversity_model, obs.screenshot_ref, [](const json& reply) {
            const json list = reply.is_array() ? reply : reply.value("actions", json::array());
            if (!list.is_array()) throw HttpError(HttpErrorKind::parse, "reply.actions: expected array");
            std::vector<CandidateAction> v;
            for (const auto& item : list) v.push_back(detail::candidate_from_json(item, CandidateSource::diversity_model));
            return v;
          });
      for (const auto& c : more) accept(c);
    }
    return out;
  }

 private:
  std::shared_ptr<const ChatClient> chat_;
};

/// Merges near-identical candidates, then ranks the survivors with one multiple-choice query per
/// position (|survivors| - 1 queries in total).
class HttpOrchestraAgent : public OrchestraAgent {
 public:
  explicit HttpOrchestraAgent(std::shared_ptr<const ChatClient> chat) : chat_(std::move(chat)) {}

  RankedActions orchestrate(const Observation& obs, const IntentRecord& intent,
                            std::span<const CandidateAction> cands) override {
    if (cands.empty()) throw ContractError("orchestrate: no candidates");
    const auto& cfg = chat_->config();
    RankedActions r;
    std::vector<std::size_t> reps;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      bool merged = false;
      for (std::size_t g = 0; g < reps.size() && !merged; ++g)
        if (equivalent_within(cands[reps[g]].action, cands[i].action, cfg.tau_px)) {
          r.merged_groups[g].push_back(i);
          merged = true;
        }
      if (!merged) {
        reps.push_back(i);
        r.merged_groups.push_back({i});
      }
    }
    std::vector<std::size_t> left = reps;
    while (left.size() > 1) {
      auto slots = detail::base_slots(obs, intent.text, {});
      json opts = json::array();
      for (std::size_t i = 0; i < left.size(); ++i)
        opts.push_back({{"index", i}, {"action", to_json(cands[left[i]].action)}, {"rationale", cands[left[i]].rationale}});
      slots["candidates"] = opts.dump();
      const std::size_t n = left.size();
      const std::size_t pick = chat_->request(fill_template(cfg.templates.at("rank"), slots), cfg.model, obs.screenshot_ref,
                                              [n](const json& reply) {
                                                if (!reply.is_object() || !reply.contains("choice") || !reply["choice"].is_number_integer())
                                                  throw HttpError(HttpErrorKind::parse, "rank reply needs an integer 'choice'");
                                                const auto c = reply["choice"].get<long long>();
                                                if (c < 0 || c >= static_cast<long long>(n))
                                                  throw HttpError(HttpErrorKind::parse, "rank reply chose option " + std::to_string(c) +
                                                                                            " of " + std::to_string(n));
                                                return static_cast<std::size_t>(c);
                                              });
      ++r.queries;
      r.actions.push_back(cands[left[pick]]);
      left.erase(left.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    r.actions.push_back(cands[left.front()]);
    return r;
  }

 private:
  std::shared_ptr<const ChatClient> chat_;
};

/// Confidence p that the step is valid becomes logits (ln(p/(1-p)), 0).
inline JudgeVerdict verdict_from_confidence(bool valid, double confidence) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) throw HttpError(HttpErrorKind::parse, "confidence must lie in [0,1]");
  double p = valid ? confidence : 1.0 - confidence;
  p = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return JudgeVerdict::intermediate(std::log(p / (1.0 - p)), 0.0);
}

/// Outcome query first; only in-progress states get the process (valid/invalid) query.
class HttpJudgeAgent : public JudgeAgent {
 public:
  explicit HttpJudgeAgent(std::shared_ptr<const ChatClient> chat) : chat_(std::move(chat)) {}

  JudgeVerdict judge(const Observation& obs, const IntentRecord& intent, const TrajectoryView& t) override {
    const auto& cfg = chat_->config();
    const auto slots = detail::base_slots(obs, intent.text, t.actions);
    const auto outcome = chat_->request(fill_template(cfg.templates.at("judge_outcome"), slots), cfg.model, obs.screenshot_ref,
                                        [](const json& j) -> std::optional<NodeStatus> {
                                          const std::string s = j.is_object() ? j.value("status", "") : "";
                                          if (s == "success") return NodeStatus::success;
                                          if (s == "failure") return NodeStatus::failure;
                                          if (s == "in_progress") return std::nullopt;
                                          throw HttpError(HttpErrorKind::parse, "judge status must be success, failure or in_progress");
                                        });
    if (outcome) return JudgeVerdict::terminal(*outcome);
    return chat_->request(fill_template(cfg.templates.at("judge_process"), slots), cfg.model, obs.screenshot_ref,
                          [](const json& j) {
                            if (!j.is_object() || !j.contains("verdict") || !j["verdict"].is_string() ||
                                !j.contains("confidence") || !j["confidence"].is_number())
                              throw HttpError(HttpErrorKind::parse, "process verdict needs 'verdict' and numeric 'confidence'");
                            const std::string v = j["verdict"].get<std::string>();
                            if (v != "valid" && v != "invalid") throw HttpError(HttpErrorKind::parse, "verdict must be valid or invalid");
                            return verdict_from_confidence(v == "valid", j["confidence"].get<double>());
                          });
  }

 private:
  std::shared_ptr<const ChatClient> chat_;
};

class HttpRecycleFilter : public RecycleFilter {
 public:
  explicit HttpRecycleFilter(std::shared_ptr<const ChatClient> chat) : chat_(std::move(chat)) {}

  double score(const TrajectoryView& t, const Observation& end) override {
    const auto& cfg = chat_->config();
    return chat_->request(fill_template(cfg.templates.at("filter"), detail::base_slots(end, "", t.actions)), cfg.model,
                          end.screenshot_ref, [](const json& r) {
                            if (!r.is_object() || !r.contains("score") || !r["score"].is_number())
                              throw HttpError(HttpErrorKind::parse, "filter reply needs a numeric 'score'");
                            return r["score"].get<double>();
                          });
  }

 private:
  std::shared_ptr<const ChatClient> chat_;
};

class HttpIntentGenerator : public IntentGenerator {
 public:
  explicit HttpIntentGenerator(std::shared_ptr<const ChatClient> chat) : chat_(std::move(chat)) {}

  GeneratedIntent generate(const TrajectoryView& t, const Observation& end) override {
    const auto& cfg = chat_->config();
    return chat_->request(fill_template(cfg.templates.at("generate"), detail::base_slots(end, "", t.actions)), cfg.model,
                          end.screenshot_ref, [](const json& r) {
                            if (!r.is_object() || !r.contains("intent") || !r["intent"].is_string())
                              throw HttpError(HttpErrorKind::parse, "generator reply needs a string 'intent'");
                            return GeneratedIntent{r["intent"].get<std::string>(), std::nullopt};
                          });
  }

 private:
  std::shared_ptr<const ChatClient> chat_;
};

inline AgentSuite make_http_agents(const HttpBackendConfig& cfg, const Logger& log) {
  auto chat = std::make_shared<const ChatClient>(cfg, log);
  AgentSuite s;
  s.infer = std::make_shared<HttpInferAgent>(chat);
  s.orchestra = std::make_shared<HttpOrchestraAgent>(chat);
  s.judge = std::make_shared<HttpJudgeAgent>(chat);
  s.filter = std::make_shared<HttpRecycleFilter>(chat);
  s.generator = std::make_shared<HttpIntentGenerator>(chat);
  return s;
}

}  // namespace m2
