#pragma once

#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <m2miner/http_agents.hpp>

namespace m2t {

using m2::json;

// Chat-completions stand-in that answers from a queue of (status, content) replies.
class MockServer {
 public:
  MockServer() {
    svr_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      requests_.push_back(req.body);
      auth_.push_back(req.get_header_value("Authorization"));
      if (replies_.empty()) {
        res.status = 500;
        return;
      }
      auto [status, content] = replies_.front();
      replies_.pop_front();
      res.status = status;
      if (status == 200) {
        res.set_content(json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}}.dump(),
                        "application/json");
      } else {
        res.set_content(content, "text/plain");
      }
    });
    port_ = svr_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }
  ~MockServer() {
    svr_.stop();
    thread_.join();
  }

  void reply(std::string content, int status = 200) {
    std::lock_guard lock(mu_);
    replies_.emplace_back(status, std::move(content));
  }
  std::size_t request_count() {
    std::lock_guard lock(mu_);
    return requests_.size();
  }
  std::vector<std::string> requests() {
    std::lock_guard lock(mu_);
    return requests_;
  }
  std::vector<std::string> auth() {
    std::lock_guard lock(mu_);
    return auth_;
  }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

 private:
  httplib::Server svr_;
  int port_ = 0;
  std::thread thread_;
  std::mutex mu_;
  std::deque<std::pair<int, std::string>> replies_;
  std::vector<std::string> requests_;
  std::vector<std::string> auth_;
};

struct ExtractionCase {
  std::string text;
  std::optional<json> expected;
};

/// Model replies paired with the payload a parser should recover (nullopt: none).
inline std::vector<ExtractionCase> extraction_corpus() {
  const json click = json{{"kind", "click"}, {"coordinate", {540, 2100}}};
  return {
      {R"({"kind":"click","coordinate":[540,2100]})", click},
      {"Sure! {\"kind\":\"click\",\"coordinate\":[540,2100]}", click},
      {"```json\n{\"kind\":\"click\",\"coordinate\":[540,2100]}\n```", click},
      {"```\n{\"kind\":\"click\",\"coordinate\":[540,2100]}\n```\nDone.", click},
      {"Thinking... {not json} then {\"kind\":\"click\",\"coordinate\":[540,2100]}", click},
      {"The answer is {\"a\": \"}\"} ok", json{{"a", "}"}}},
      {"{\"a\": \"quote \\\" inside {\"}", json{{"a", "quote \" inside {"}}},
      {"[1, 2, 3]", json::array({1, 2, 3})},
      {"list [1,2] and object {\"x\":1}", json{{"x", 1}}},
      {"```json\nnot valid\n```\n{\"y\":2}", json{{"y", 2}}},
      {"```python\nprint(1)\n```\n```json\n{\"z\":3}\n```", json{{"z", 3}}},
      {"no json here", std::nullopt},
      {"", std::nullopt},
      {"{\"unterminated\": 1", std::nullopt},
      {"{\"outer\": {\"inner\": [1, {\"deep\": true}]}}", json{{"outer", {{"inner", json::array({1, {{"deep", true}}})}}}}},
      {"prefix ] } stray {\"ok\":1}", json{{"ok", 1}}},
      {"{\"status\": \"in_progress\"}\n\nExplanation: the task continues.", json{{"status", "in_progress"}}},
      {"Choice:\n{\n  \"choice\": 2\n}\n", json{{"choice", 2}}},
      {"42", std::nullopt},
      {"\"just a string\"", std::nullopt},
  };
}

}  // namespace m2t
