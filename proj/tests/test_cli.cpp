#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <openssl/evp.h>

#include "support.hpp"

namespace fs = std::filesystem;
using m2::json;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

fs::path scratch() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / ("m2cli-" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

CliRun run(const std::string& args) {
  static int n = 0;
  const fs::path err = scratch() / ("stderr-" + std::to_string(n++));
  const std::string cmd = std::string(M2_CLI_PATH) + " " + args + " 2>" + err.string();
  CliRun r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t got;
  while ((got = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), got);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = m2::read_file(err);
  return r;
}

std::string sha256(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  char hex[3];
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(hex, sizeof hex, "%02x", md[i]);
    s += hex;
  }
  return s;
}

void expect_manifest_digests(const fs::path& manifest) {
  const json m = json::parse(m2::read_file(manifest));
  ASSERT_FALSE(m["outputs"].empty());
  for (auto it = m["outputs"].begin(); it != m["outputs"].end(); ++it)
    EXPECT_EQ(it.value().get<std::string>(), sha256(m2::read_file(it.key()))) << it.key();
  for (auto it = m["inputs"].begin(); it != m["inputs"].end(); ++it)
    EXPECT_EQ(it.value().get<std::string>(), sha256(m2::read_file(it.key()))) << it.key();
  EXPECT_EQ(m["config_hash"], sha256(m["config"].dump()));
}

std::string env(const std::string& name) { return m2t::fixture(name); }

}  // namespace

TEST(Cli, Version) {
  const CliRun r = run("--version");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find(m2::kVersion), std::string::npos);
}

TEST(Cli, ValidateEnv) {
  const CliRun r = run("validate-env " + env("chain3.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["name"], "chain3");
  EXPECT_EQ(j["goals"][0]["id"], "finish");
  EXPECT_EQ(j["goals"][0]["distance"], 2);
}

TEST(Cli, ValidationErrorsExitOne) {
  CliRun r = run("mine --goal finish --out " + (scratch() / "x").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--env"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);

  r = run("validate-env " + m2t::test_fixture("dangling.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("dangling screen reference"), std::string::npos);

  r = run("validate-env " + (scratch() / "missing.json").string());
  EXPECT_EQ(r.code, 1);

  r = run("mine --env " + env("chain3.json") + " --goal nope --out " + (scratch() / "y").string());
  EXPECT_EQ(r.code, 1);

  r = run("mine --env " + env("chain3.json") + " --goal finish --mode greedy --out " + (scratch() / "y").string());
  EXPECT_EQ(r.code, 1);

  r = run("cost");
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, MineIsByteIdenticalAcrossRuns) {
  const fs::path a = scratch() / "mine-a", b = scratch() / "mine-b";
  const std::string common = "mine --env " + env("hotel-booking.json") + " --goal pick_dates --seed 4 --epsilon 0.3 --out ";
  const CliRun ra = run(common + a.string());
  const CliRun rb = run(common + b.string());
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(ra.out, rb.out);
  for (const char* f : {"tree.json", "tree.dot", "result.json"})
    EXPECT_EQ(m2::read_file(a / f), m2::read_file(b / f)) << f;
  EXPECT_EQ(json::parse(ra.out)["outcome"], "success");
  expect_manifest_digests(a / "manifest.json");
  const m2::IntentTree t = m2::tree_from_json(json::parse(m2::read_file(a / "tree.json")));
  EXPECT_EQ(t.intents().size(), 1u);
}

TEST(Cli, RecycleAndExport) {
  const fs::path mined = scratch() / "rx-mine", rec = scratch() / "rx-rec";
  ASSERT_EQ(run("mine --env " + env("map-app.json") + " --goal directions --seed 1 --epsilon 0.4 --out " + mined.string()).code, 0);
  const CliRun r = run("recycle --env " + env("map-app.json") + " --tree " + (mined / "tree.json").string() + " --out " + rec.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const json summary = json::parse(r.out);
  EXPECT_EQ(summary["accepted"], summary["attached"]);
  expect_manifest_digests(rec / "manifest.json");

  const fs::path e1 = scratch() / "rx-e1", e2 = scratch() / "rx-e2";
  ASSERT_EQ(run("export --trees " + (rec / "tree.json").string() + " --out " + e1.string()).code, 0);
  ASSERT_EQ(run("export --trees " + rec.string() + " --out " + e2.string()).code, 0);
  for (const char* f : {"act.jsonl", "des.jsonl", "pref.jsonl", "data_manifest.json"})
    EXPECT_EQ(m2::read_file(e1 / f), m2::read_file(e2 / f)) << f;
  expect_manifest_digests(e1 / "manifest.json");

  const CliRun m = run("metrics --env " + env("map-app.json") + " --data " + (e1 / "des.jsonl").string());
  ASSERT_EQ(m.code, 0) << m.err;
  EXPECT_EQ(json::parse(m.out)["dqa"], 1.0);
}

TEST(Cli, AblateRowsAndManifest) {
  const fs::path csv = scratch() / "ablate.csv";
  const CliRun r = run("ablate --env " + env("hotel-booking.json") + " --lengths 1,3 --modes accelerated,vanilla --seeds 2 --csv " +
                    csv.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string body = m2::read_file(csv);
  EXPECT_EQ(std::count(body.begin(), body.end(), '\n'), 1 + 2 * 2);
  EXPECT_EQ(body, r.out);
  const fs::path manifest = csv.string() + ".manifest.json";
  expect_manifest_digests(manifest);
  const json m = json::parse(m2::read_file(manifest));
  EXPECT_EQ(m["seeds"], json::array({0, 1}));
}

TEST(Cli, LoopIsByteIdentical) {
  const fs::path a = scratch() / "loop-a", b = scratch() / "loop-b";
  const std::string common = "loop --env " + env("hotel-booking.json") + " --plan " + env("hotel-plan.json") + " --seed 2 --out ";
  const CliRun ra = run(common + a.string());
  const CliRun rb = run(common + b.string());
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(ra.out, rb.out);
  for (const char* f : {"stages.json", "stages.csv", "data/act.jsonl", "data/des.jsonl", "data/pref.jsonl"})
    EXPECT_EQ(m2::read_file(a / f), m2::read_file(b / f)) << f;
  expect_manifest_digests(a / "manifest.json");
}

TEST(Cli, CostTable) {
  const CliRun r = run("cost --table");
  ASSERT_EQ(r.code, 0) << r.err;
  const json rows = json::parse(r.out);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_NEAR(rows[0]["total"].get<double>(), 31662.4, 1e-6);
  EXPECT_NEAR(rows[3]["total"].get<double>(), 465.8968, 1e-9);
  const CliRun c = run("cost --n-img 1000 --pipeline manual");
  ASSERT_EQ(c.code, 0);
  EXPECT_NEAR(json::parse(c.out)[0]["total"].get<double>(), 1000 * 0.0514 * 7, 1e-9);
}

TEST(Cli, MetricsStepAccuracy) {
  const fs::path pred = scratch() / "pred.json", truth = scratch() / "truth.json";
  m2::write_file_atomic(pred, R"([{"kind":"click","coordinate":[1,1]},{"kind":"wait","time":1}])");
  m2::write_file_atomic(truth, R"([{"kind":"click","coordinate":[1,1]},{"kind":"type","text":"a"}])");
  const CliRun r = run("metrics --pred " + pred.string() + " --truth " + truth.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_DOUBLE_EQ(j["sr"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(j["tp"].get<double>(), 0.5);
}

TEST(Cli, PrintConfigAppliesOverrides) {
  const fs::path cfg = scratch() / "cfg.json";
  m2::write_file_atomic(cfg, R"({"mining": {"k_candidates": 5}, "backend": {"epsilon": 0.2}})");
  const CliRun r = run("--config " + cfg.string() + " --print-config mine --max-iterations 7");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["mining"]["k_candidates"], 5);
  EXPECT_EQ(j["mining"]["max_iterations"], 7);
  EXPECT_EQ(j["backend"]["epsilon"], 0.2);
  m2::write_file_atomic(cfg, R"({"minning": {}})");
  EXPECT_EQ(run("--config " + cfg.string() + " --print-config").code, 1);
}
