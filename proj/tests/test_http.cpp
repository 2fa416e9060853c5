#include <gtest/gtest.h>

#include <cstdlib>

#include "http_support.hpp"
#include "support.hpp"

using namespace m2;

namespace {

HttpBackendConfig config_for(const m2t::MockServer& s) {
  HttpBackendConfig c;
  c.base_url = s.base_url();
  c.model = "mock-model";
  c.timeout_s = 5;
  c.api_key_env = "M2_TEST_HTTP_KEY";
  return c;
}

Observation sample_obs() {
  auto g = m2t::load("chain3.json");
  return observe_state(*g, g->initial_state());
}

}  // namespace

TEST(Extraction, Corpus) {
  const auto corpus = m2t::extraction_corpus();
  ASSERT_EQ(corpus.size(), 20u);
  std::size_t ok = 0;
  for (const auto& c : corpus) {
    const auto got = extract_json(c.text);
    const bool match = got.has_value() == c.expected.has_value() && (!got || *got == *c.expected);
    EXPECT_TRUE(match) << c.text;
    ok += match;
  }
  EXPECT_EQ(ok, corpus.size());
}

TEST(Http, InferReturnsCannedActions) {
  m2t::MockServer s;
  s.reply(R"(I will tap Next. {"action": {"kind": "click", "coordinate": [540, 2100]}, "rationale": "advance"})");
  s.reply(R"({"actions": [{"action": {"kind": "click", "coordinate": [540, 2100]}}, {"action": {"kind": "wait", "time": 1}}, {"action": {"kind": "swipe", "coordinate": [500, 1500], "coordinate2": [500, 500]}}]})");
  const AgentSuite a = make_http_agents(config_for(s), Logger::null());
  const auto out = a.infer->infer_candidates(sample_obs(), m2t::intent("finish setup"), {}, {}, 3);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].action, GuiAction::click({540, 2100}));
  EXPECT_EQ(out[0].rationale, "advance");
  EXPECT_EQ(out[0].source, CandidateSource::primary_model);
  EXPECT_EQ(out[1].action, GuiAction::wait(1));
  EXPECT_EQ(out[1].source, CandidateSource::diversity_model);
  EXPECT_EQ(out[2].action.kind(), ActionKind::swipe);
  ASSERT_EQ(s.request_count(), 2u);
  const json body = json::parse(s.requests()[0]);
  EXPECT_EQ(body["model"], "mock-model");
  EXPECT_EQ(body["messages"][1]["content"].get<std::string>().find("finish setup") != std::string::npos, true);
}

TEST(Http, JudgeVerdicts) {
  m2t::MockServer s;
  s.reply(R"({"status": "success"})");
  s.reply(R"({"status": "in_progress"})");
  s.reply(R"({"verdict": "valid", "confidence": 0.8})");
  s.reply(R"({"status": "failure"})");
  const AgentSuite a = make_http_agents(config_for(s), Logger::null());
  const TrajectoryView view{sample_obs(), {GuiAction::click({540, 2100})}, {"next"}, false};
  const auto v1 = a.judge->judge(sample_obs(), m2t::intent("x"), view);
  EXPECT_EQ(v1.status, NodeStatus::success);
  EXPECT_EQ(v1.reward, 1.0);
  const auto v2 = a.judge->judge(sample_obs(), m2t::intent("x"), view);
  EXPECT_EQ(v2.status, NodeStatus::intermediate);
  EXPECT_NEAR(v2.reward, 0.8, 1e-12);
  EXPECT_TRUE(v2.consistent());
  EXPECT_EQ(a.judge->judge(sample_obs(), m2t::intent("x"), view).status, NodeStatus::failure);
  EXPECT_EQ(s.request_count(), 4u);
}

TEST(Http, FilterAndGenerator) {
  m2t::MockServer s;
  s.reply(R"({"score": 0.9})");
  s.reply(R"({"intent": "book a ride"})");
  s.reply(R"({"intent": ""})");
  const AgentSuite a = make_http_agents(config_for(s), Logger::null());
  const TrajectoryView view{sample_obs(), {GuiAction::click({540, 2100})}, {"next"}, false};
  EXPECT_DOUBLE_EQ(a.filter->score(view, sample_obs()), 0.9);
  EXPECT_EQ(a.generator->generate(view, sample_obs()).text, "book a ride");
  EXPECT_EQ(a.generator->generate(view, sample_obs()).text, "");
}

TEST(Http, ServerErrorsAreRetried) {
  m2t::MockServer s;
  s.reply("boom", 500);
  s.reply("boom", 500);
  s.reply(R"({"ok": true})");
  HttpBackendConfig c = config_for(s);
  c.retries = 2;
  ChatClient chat(c, Logger::null());
  EXPECT_EQ(chat.complete_json("hi", c.model), json({{"ok", true}}));
  EXPECT_EQ(chat.attempts(), 3u);
}

TEST(Http, ClientErrorsAreNotRetried) {
  m2t::MockServer s;
  s.reply("bad request", 400);
  s.reply(R"({"ok": true})");
  HttpBackendConfig c = config_for(s);
  ChatClient chat(c, Logger::null());
  try {
    chat.complete_json("hi", c.model);
    FAIL() << "expected HttpError";
  } catch (const HttpError& e) {
    EXPECT_EQ(e.kind(), HttpErrorKind::client_status);
    EXPECT_EQ(e.status(), 400);
    EXPECT_FALSE(e.retryable());
  }
  EXPECT_EQ(chat.attempts(), 1u);
}

TEST(Http, UnparseableRepliesAreRetried) {
  m2t::MockServer s;
  s.reply("no payload at all");
  s.reply(R"({"choice": 9})");
  s.reply(R"(Option {"choice": 1})");
  HttpBackendConfig c = config_for(s);
  c.retries = 2;
  ChatClient chat(c, Logger::null());
  const int pick = chat.request("hi", c.model, "", [](const json& j) {
    const int v = j.at("choice").get<int>();
    if (v > 2) throw HttpError(HttpErrorKind::parse, "out of range");
    return v;
  });
  EXPECT_EQ(pick, 1);
  EXPECT_EQ(chat.attempts(), 3u);

  m2t::MockServer junk;
  for (int i = 0; i < 3; ++i) junk.reply("nothing structured");
  ChatClient chat2(config_for(junk), Logger::null());
  try {
    chat2.complete_json("hi", "mock-model");
    FAIL() << "expected HttpError";
  } catch (const HttpError& e) {
    EXPECT_EQ(e.kind(), HttpErrorKind::parse);
    EXPECT_TRUE(e.retryable());
  }
  EXPECT_EQ(chat2.attempts(), 3u);
}

TEST(Http, TransportFailureIsRetryable) {
  HttpBackendConfig c;
  c.base_url = "http://127.0.0.1:9";
  c.model = "m";
  c.timeout_s = 1;
  c.retries = 1;
  ChatClient chat(c, Logger::null());
  try {
    chat.complete_json("hi", c.model);
    FAIL() << "expected HttpError";
  } catch (const HttpError& e) {
    EXPECT_TRUE(e.kind() == HttpErrorKind::transport || e.kind() == HttpErrorKind::timeout);
    EXPECT_TRUE(e.retryable());
  }
  EXPECT_EQ(chat.attempts(), 2u);
}

TEST(Http, ApiKeyNeverLogged) {
  const std::string key = "sk-test-7f3a9c1e55d0";
  ::setenv("M2_TEST_HTTP_KEY", key.c_str(), 1);
  m2t::MockServer s;
  s.reply("oops", 500);
  s.reply(R"({"ok": 1})");
  std::vector<std::string> lines;
  std::mutex mu;
  Logger log(
      [&](const std::string& l) {
        std::lock_guard lock(mu);
        lines.push_back(l);
      },
      LogLevel::debug);
  ChatClient chat(config_for(s), log);
  chat.complete_json("my key is " + key, "mock-model");
  ::unsetenv("M2_TEST_HTTP_KEY");
  ASSERT_FALSE(lines.empty());
  bool saw_auth = false;
  for (const auto& l : lines) {
    EXPECT_EQ(l.find(key), std::string::npos) << l;
    saw_auth |= l.find("Bearer ***") != std::string::npos;
    EXPECT_NO_THROW(json::parse(l));
  }
  EXPECT_TRUE(saw_auth);
  for (const auto& h : s.auth()) EXPECT_EQ(h, "Bearer " + key);
}

TEST(Http, OrchestraQueriesOncePerRankedPosition) {
  m2t::MockServer s;
  s.reply(R"({"choice": 1})");
  s.reply(R"({"choice": 0})");
  const AgentSuite a = make_http_agents(config_for(s), Logger::null());
  std::vector<CandidateAction> cands{{GuiAction::click({100, 100}), "a", CandidateSource::primary_model},
                                     {GuiAction::click({104, 103}), "a'", CandidateSource::diversity_model},
                                     {GuiAction::wait(1), "b", CandidateSource::diversity_model},
                                     {GuiAction::swipe({500, 1500}, {500, 500}), "c", CandidateSource::diversity_model}};
  const auto r = a.orchestra->orchestrate(sample_obs(), m2t::intent("x"), cands);
  ASSERT_EQ(r.actions.size(), 3u);
  EXPECT_EQ(r.queries, 2u);
  EXPECT_EQ(s.request_count(), 2u);
  EXPECT_EQ(r.merged_groups[0], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.actions[0].action, GuiAction::wait(1));
  EXPECT_EQ(r.actions[1].action, GuiAction::click({100, 100}));
  EXPECT_EQ(r.actions[2].action.kind(), ActionKind::swipe);

  m2t::MockServer quiet;
  const AgentSuite b = make_http_agents(config_for(quiet), Logger::null());
  const std::vector<CandidateAction> one{cands[0]};
  EXPECT_EQ(b.orchestra->orchestrate(sample_obs(), m2t::intent("x"), one).queries, 0u);
  EXPECT_EQ(quiet.request_count(), 0u);
}

TEST(Http, EquivalenceWithinTolerance) {
  EXPECT_TRUE(equivalent_within(GuiAction::click({100, 100}), GuiAction::click({105, 105}), 8));
  EXPECT_FALSE(equivalent_within(GuiAction::click({100, 100}), GuiAction::click({106, 106}), 8));
  EXPECT_FALSE(equivalent_within(GuiAction::click({100, 100}), GuiAction::long_press({100, 100}, 1), 8));
  EXPECT_TRUE(equivalent_within(GuiAction::swipe({0, 900}, {0, 100}), GuiAction::swipe({3, 900}, {0, 104}), 8));
  EXPECT_FALSE(equivalent_within(GuiAction::type("a"), GuiAction::type("b"), 1000));
}

TEST(Http, ConfidenceToLogit) {
  EXPECT_NEAR(verdict_from_confidence(true, 0.5).logit_valid, 0.0, 1e-15);
  for (double p : {0.1, 0.3, 0.5, 0.77, 0.95}) {
    const auto v = verdict_from_confidence(true, p);
    EXPECT_NEAR(v.reward, p, 1e-12);
    EXPECT_NEAR(v.logit_valid, std::log(p / (1 - p)), 1e-12);
    EXPECT_NEAR(verdict_from_confidence(false, p).reward, 1 - p, 1e-12);
  }
  EXPECT_TRUE(std::isfinite(verdict_from_confidence(true, 1.0).logit_valid));
  EXPECT_THROW(verdict_from_confidence(true, 1.5), HttpError);
}

TEST(Http, ConfigValidation) {
  EXPECT_THROW(http_config_from_json(json{{"model", "m"}}), ValidationError);
  EXPECT_THROW(http_config_from_json(json{{"base_url", "ftp://x"}, {"model", "m"}}), ValidationError);
  EXPECT_THROW(http_config_from_json(json{{"base_url", "http://x"}, {"model", "m"}, {"colour", 1}}), ValidationError);
  const auto c = http_config_from_json(json{{"kind", "http"}, {"base_url", "http://x"}, {"model", "m"}, {"tau_px", 4}});
  EXPECT_EQ(c.tau_px, 4);
  EXPECT_EQ(fill_template("a {x} {y}", {{"x", "1"}}), "a 1 {y}");
}
