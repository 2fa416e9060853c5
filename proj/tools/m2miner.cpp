// m2miner command-line entry point.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <m2miner/http_agents.hpp>
#include <m2miner/m2miner.hpp>

namespace fs = std::filesystem;
using namespace m2;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

/// Defaults for every configurable section. The config file and flags overlay this.
json default_config() {
  return {{"mining", to_json(MiningConfig{})},
          {"backend", {{"kind", "oracle"}, {"epsilon", 0.0}, {"redundancy", 0.25}, {"judge_error", 0.0}}},
          {"workers", 1},
          {"recycle", {{"threshold", 0.5}}},
          {"export", {{"pref_cap", 3}, {"channels", {"ACT", "DES", "PREF"}}}},
          {"ablate", {{"max_iterations", 1000000}, {"wall_clock_cap_s", 120.0}}},
          {"cost", {{"r_wage", 7.0},
                    {"t_annot", 0.05},
                    {"t_inspect", 0.0014},
                    {"train", {{"hours", 24.0}, {"gpus", 8.0}, {"price_per_gpu_hour", 0.924}}},
                    {"mine", {{"hours", 26.7}, {"gpus", 8.0}, {"price_per_gpu_hour", 0.433}}}}}};
}

/// Overlays `patch` onto `base`, rejecting keys the defaults do not know. The backend section is
/// free-form because its keys depend on the backend kind.
void overlay(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ValidationError(where + ": expected object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (path == "backend") {
      if (!it.value().is_object()) throw ValidationError("backend: expected object");
      if (it.value().value("kind", base["backend"].value("kind", "oracle")) != base["backend"].value("kind", "oracle"))
        base["backend"] = json::object();
      base["backend"].merge_patch(it.value());
      continue;
    }
    if (!base.contains(it.key())) throw ValidationError("config: unknown key '" + path + "'");
    if (base[it.key()].is_object() && it.value().is_object()) overlay(base[it.key()], it.value(), path);
    else base[it.key()] = it.value();
  }
}

CostParams cost_params(const json& c) {
  CostParams p;
  try {
    p.r_wage = c.at("r_wage").get<double>();
    p.t_annot = c.at("t_annot").get<double>();
    p.t_inspect = c.at("t_inspect").get<double>();
    auto budget = [](const json& b) {
      return ComputeBudget{b.at("hours").get<double>(), b.at("gpus").get<double>(), b.at("price_per_gpu_hour").get<double>()};
    };
    p.train = budget(c.at("train"));
    p.mine = budget(c.at("mine"));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("cost config: ") + e.what());
  }
  p.validate();
  return p;
}

AgentSuite make_agents(const json& backend, std::shared_ptr<const ScreenGraph> graph, std::uint64_t seed, const Logger& log) {
  const std::string kind = backend.value("kind", "oracle");
  if (kind == "oracle") return make_oracle_agents(std::move(graph), oracle_params_from_json(backend, seed));
  if (kind == "http") return make_http_agents(http_config_from_json(backend), log);
  throw ValidationError("backend.kind must be 'oracle' or 'http'");
}

BackendFactory backend_factory(std::shared_ptr<const ScreenGraph> graph, const Logger& log) {
  return [graph, log](const json& backend, std::uint64_t seed) { return make_agents(backend, graph, seed, log); };
}

/// Records inputs and outputs with digests; written last so it can describe everything.
class RunRecorder {
 public:
  RunRecorder(std::string command, std::vector<std::string> argv, const json& config)
      : start_(std::chrono::steady_clock::now()) {
    m_["command"] = std::move(command);
    m_["argv"] = std::move(argv);
    m_["version"] = kVersion;
    m_["config"] = config;
    m_["config_hash"] = sha256_hex(config.dump());
    m_["inputs"] = json::object();
    m_["outputs"] = json::object();
    m_["seeds"] = json::array();
  }

  void input(const std::string& path) { m_["inputs"][path] = sha256_hex(read_file(path)); }
  void seed(std::uint64_t s) { m_["seeds"].push_back(s); }

  void output(const fs::path& path, const std::string& content) {
    write_file_atomic(path, content);
    m_["outputs"][path.string()] = sha256_hex(content);
  }

  void finish(const std::optional<fs::path>& where, const Logger& log) {
    m_["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (where) write_file_atomic(*where, m_.dump(2) + "\n");
    else log.info("run.manifest", m_);
  }

 private:
  json m_;
  std::chrono::steady_clock::time_point start_;
};

struct Globals {
  std::string config_file;
  bool print_config = false;
  int workers = -1;
  std::string log_level = "info";
  std::string manifest;
};

struct Ctx {
  json config;
  Logger log;
  RunRecorder rec;
  unsigned workers;
  std::optional<fs::path> manifest;
};

IntentRecord pick_intent(const ScreenGraph& g, const std::string& text, const std::string& file, const std::string& goal) {
  const int given = !text.empty() + !file.empty() + !goal.empty();
  if (given != 1) throw ValidationError("give exactly one of --intent, --intent-file or --goal");
  if (!goal.empty()) return g.seed_intent(goal);
  IntentRecord r;
  if (!file.empty()) {
    const std::string raw = read_file(file);
    auto j = json::parse(raw, nullptr, false);
    r = (!j.is_discarded() && j.is_object()) ? intent_from_json(j, file) : make_seed_intent(detail::trim(raw));
  } else {
    r = make_seed_intent(text);
  }
  if (!r.goal) {
    try {
      r.goal = g.resolve_goal(r);
    } catch (const UnknownIntentError&) {
      // left unresolved; agents that need a ground truth will report it
    }
  }
  return r;
}

std::vector<IntentTree> load_trees(const std::vector<std::string>& paths, RunRecorder& rec) {
  std::vector<std::string> files;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<std::string> found;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().extension() == ".json") {
          auto j = json::parse(read_file(e.path()), nullptr, false);
          if (!j.is_discarded() && j.is_object() && j.value("schema", "") == kTreeSchema) found.push_back(e.path().string());
        }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(p);
    }
  }
  if (files.empty()) throw ValidationError("no tree files given");
  std::vector<IntentTree> trees;
  for (const auto& f : files) {
    rec.input(f);
    json j;
    try {
      j = json::parse(read_file(f));
    } catch (const json::parse_error& e) {
      throw SchemaError(f + ": " + e.what());
    }
    trees.push_back(tree_from_json(j));
  }
  return trees;
}

std::vector<GuiAction> load_actions(const std::string& path) {
  const std::string raw = read_file(path);
  std::vector<GuiAction> out;
  auto j = json::parse(raw, nullptr, false);
  if (!j.is_discarded() && j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(action_from_json(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
  }
  std::istringstream in(raw);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (detail::trim(line).empty()) continue;
    auto row = json::parse(line, nullptr, false);
    if (row.is_discarded()) throw SchemaError(path + ": line " + std::to_string(n) + " is not JSON");
    out.push_back(action_from_json(row.contains("action") ? row["action"] : row, path + ":" + std::to_string(n)));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tree-search miner for GUI-agent trajectories over synthetic or live backends."};
  app.set_version_flag("--version", kVersion);
  Globals g;
  app.add_option("--config", g.config_file, "JSON config file (flags override it)")->check(CLI::ExistingFile);
  app.add_flag("--print-config", g.print_config, "Print the effective configuration and exit");
  app.add_option("--workers", g.workers, "Parallel mining workers")->check(CLI::PositiveNumber);
  app.add_option("--log-level", g.log_level, "debug|info|warn|error")->check(CLI::IsMember({"debug", "info", "warn", "error"}));
  app.add_option("--manifest", g.manifest, "Where to write the run manifest (default: next to the outputs)");
  app.require_subcommand(0, 1);

  // Shared per-command options.
  std::string env_path, out_dir, intent_text, intent_file, goal_id, mode, plan_path, csv_path, json_path, tree_path;
  std::string lengths = "1,3,5,7,9", modes = "accelerated,vanilla", channels, pipeline = "manual", params_path;
  std::string pred_path, truth_path, data_path;
  std::vector<std::string> tree_paths, result_paths;
  std::uint64_t seed = 0;
  unsigned n_seeds = 10;
  double epsilon = -1, threshold = -1, wall_cap = -1, n_img = -1;
  long long max_iterations = -1;
  int pref_cap = -1;
  bool table = false;

  auto* validate = app.add_subcommand("validate-env", "Load an environment file and report its goals");
  validate->add_option("env", env_path, "Environment file (m2env/1)");

  auto* mine_cmd = app.add_subcommand("mine", "Mine one intent into a tree");
  mine_cmd->add_option("--env", env_path, "Environment file");
  mine_cmd->add_option("--intent", intent_text, "Intent text");
  mine_cmd->add_option("--intent-file", intent_file, "Intent record (JSON) or plain-text file");
  mine_cmd->add_option("--goal", goal_id, "Declared goal id of the environment");
  mine_cmd->add_option("--mode", mode, "accelerated|vanilla|infer_only")->check(CLI::IsMember({"accelerated", "vanilla", "infer_only"}));
  mine_cmd->add_option("--seed", seed, "Mining and agent seed");
  mine_cmd->add_option("--epsilon", epsilon, "Oracle agent error rate");
  mine_cmd->add_option("--max-iterations", max_iterations, "Iteration budget");
  mine_cmd->add_option("--out", out_dir, "Output directory");

  auto* ablate_cmd = app.add_subcommand("ablate", "Compare accelerated and vanilla search across task lengths");
  ablate_cmd->add_option("--env", env_path, "Environment file");
  ablate_cmd->add_option("--lengths", lengths, "Comma-separated BFS task lengths");
  ablate_cmd->add_option("--modes", modes, "Comma-separated modes");
  ablate_cmd->add_option("--seeds", n_seeds, "Number of seeds (base, base+1, ...)")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--seed", seed, "Base seed");
  ablate_cmd->add_option("--wall-cap", wall_cap, "Per-run wall-clock cap in seconds (0 disables)");
  ablate_cmd->add_option("--csv", csv_path, "Output CSV");
  ablate_cmd->add_option("--json", json_path, "Optional per-run JSON");

  auto* recycle_cmd = app.add_subcommand("recycle", "Recycle the paths of a finished tree into new intents");
  recycle_cmd->add_option("--env", env_path, "Environment file");
  recycle_cmd->add_option("--tree", tree_path, "Tree file (m2tree/1)");
  recycle_cmd->add_option("--threshold", threshold, "Filter threshold in [0,1]");
  recycle_cmd->add_option("--seed", seed, "Agent seed");
  recycle_cmd->add_option("--out", out_dir, "Output directory");

  auto* loop_cmd = app.add_subcommand("loop", "Run a staged mining plan");
  loop_cmd->add_option("--env", env_path, "Environment file");
  loop_cmd->add_option("--plan", plan_path, "Plan file (m2plan/1)");
  loop_cmd->add_option("--seed", seed, "Run seed");
  loop_cmd->add_option("--out", out_dir, "Output directory");

  auto* export_cmd = app.add_subcommand("export", "Write ACT/DES/PREF JSONL from tree files");
  export_cmd->add_option("--trees", tree_paths, "Tree files or directories")->expected(1, -1);
  export_cmd->add_option("--channels", channels, "Comma-separated channels (ACT,DES,PREF)");
  export_cmd->add_option("--pref-cap", pref_cap, "Negatives per step");
  export_cmd->add_option("--out", out_dir, "Output directory");

  auto* metrics_cmd = app.add_subcommand("metrics", "SR/TP, MSR and DQA");
  metrics_cmd->add_option("--pred", pred_path, "Predicted actions (JSON array or JSONL)");
  metrics_cmd->add_option("--truth", truth_path, "Ground-truth actions");
  metrics_cmd->add_option("--results", result_paths, "Mining result files for MSR")->expected(1, -1);
  metrics_cmd->add_option("--env", env_path, "Environment for DQA");
  metrics_cmd->add_option("--data", data_path, "DES JSONL for DQA");
  metrics_cmd->add_option("--out", json_path, "Write the metrics JSON here");

  auto* cost_cmd = app.add_subcommand("cost", "Estimate dataset cost");
  cost_cmd->add_option("--n-img", n_img, "Number of images");
  cost_cmd->add_option("--pipeline", pipeline, "manual|mined")->check(CLI::IsMember({"manual", "mined"}));
  cost_cmd->add_option("--params", params_path, "JSON overriding cost parameters")->check(CLI::ExistingFile);
  cost_cmd->add_flag("--table", table, "Emit the reference dataset table");
  cost_cmd->add_option("--csv", csv_path, "Write CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  Logger log(Logger::stderr_sink(), g.log_level == "debug"  ? LogLevel::debug
                                    : g.log_level == "warn" ? LogLevel::warn
                                    : g.log_level == "error" ? LogLevel::error
                                                              : LogLevel::info);
  CLI::App* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
  auto usage_error = [&](const std::string& msg) {
    std::cerr << "error: " << msg << "\n\n" << (sub ? sub->help() : app.help());
    return kExitValidation;
  };

  try {
    json config = default_config();
    if (!g.config_file.empty()) {
      json file;
      try {
        file = json::parse(read_file(g.config_file));
      } catch (const json::parse_error& e) {
        throw ValidationError(g.config_file + ": " + e.what());
      }
      overlay(config, file, "");
    }
    if (g.workers > 0) config["workers"] = g.workers;
    if (!mode.empty()) config["mining"]["mode"] = mode;
    if (max_iterations >= 0) config["mining"]["max_iterations"] = max_iterations;
    if (sub == mine_cmd || sub == ablate_cmd || sub == recycle_cmd) config["mining"]["rng_seed"] = seed;
    if (epsilon >= 0) config["backend"]["epsilon"] = epsilon;
    if (threshold >= 0) config["recycle"]["threshold"] = threshold;
    if (wall_cap >= 0) config["ablate"]["wall_clock_cap_s"] = wall_cap;
    if (pref_cap >= 0) config["export"]["pref_cap"] = pref_cap;
    if (!channels.empty()) config["export"]["channels"] = split_list(channels);
    if (!params_path.empty()) overlay(config["cost"], json::parse(read_file(params_path)), "cost");

    const MiningConfig mcfg = config_from_json(config["mining"]);
    mcfg.validate();
    if (g.print_config) {
      std::cout << config.dump(2) << "\n";
      return kExitOk;
    }
    if (!sub) return usage_error("a subcommand is required");

    const unsigned workers = config["workers"].get<unsigned>();
    RunRecorder rec(sub->get_name(), std::vector<std::string>(argv, argv + argc), config);
    auto manifest_at = [&](const fs::path& fallback) -> std::optional<fs::path> {
      if (!g.manifest.empty()) return fs::path(g.manifest);
      return fallback;
    };
    auto need = [&](const std::string& v, const char* flag) {
      if (v.empty()) throw CLI::RequiredError(flag);
    };

    try {
      if (sub == validate) {
        need(env_path, "env");
        rec.input(env_path);
        auto graph = load_environment_file(env_path);
        json goals = json::array();
        for (const auto& goal : graph->goals) {
          const auto d = graph->distance_from_initial(goal.predicate);
          goals.push_back({{"id", goal.id}, {"intent", goal.intent}, {"latent", goal.latent},
                           {"distance", d ? json(*d) : json(nullptr)}});
        }
        json templates = json::array();
        for (const auto& t : graph->templates) templates.push_back(t.id);
        const json summary{{"name", graph->name},          {"digest", graph->digest},
                           {"screens", graph->screens.size()}, {"reachable_states", graph->reachable_state_count()},
                           {"goals", goals},               {"templates", templates}};
        std::cout << summary.dump(2) << "\n";
        rec.finish(g.manifest.empty() ? std::nullopt : std::optional<fs::path>(g.manifest), log);
        return kExitOk;
      }

      if (sub == mine_cmd) {
        need(env_path, "--env");
        need(out_dir, "--out");
        rec.input(env_path);
        if (!intent_file.empty()) rec.input(intent_file);
        auto graph = load_environment_file(env_path);
        const IntentRecord intent = pick_intent(*graph, intent_text, intent_file, goal_id);
        rec.seed(mcfg.rng_seed);
        SyntheticEnvironment env(graph);
        const MiningResult r = mine(intent, env, make_agents(config["backend"], graph, mcfg.rng_seed, log), mcfg);
        log.info("mine.done", {{"outcome", to_string(r.outcome)}, {"iterations", r.iterations_used}, {"env_steps", r.env_steps_used}});
        const fs::path out(out_dir);
        rec.output(out / "tree.json", to_json(r.tree).dump(2) + "\n");
        rec.output(out / "tree.dot", to_dot(r.tree));
        rec.output(out / "result.json", to_json(r).dump(2) + "\n");
        rec.finish(manifest_at(out / "manifest.json"), log);
        std::cout << to_json(r).dump() << "\n";
        return kExitOk;
      }

      if (sub == ablate_cmd) {
        need(env_path, "--env");
        need(csv_path, "--csv");
        rec.input(env_path);
        auto graph = load_environment_file(env_path);
        std::vector<unsigned> lens;
        for (const auto& s : split_list(lengths)) lens.push_back(static_cast<unsigned>(std::stoul(s)));
        std::vector<MiningMode> ms;
        for (const auto& s : split_list(modes)) ms.push_back(mining_mode_from_string(s));
        if (lens.empty() || ms.empty()) throw ValidationError("--lengths and --modes must not be empty");
        std::vector<std::uint64_t> seeds;
        for (unsigned i = 0; i < n_seeds; ++i) {
          seeds.push_back(seed + i);
          rec.seed(seed + i);
        }
        MiningConfig base = mcfg;
        base.max_iterations = config["ablate"]["max_iterations"].get<std::uint64_t>();
        base.wall_clock_cap_s = config["ablate"]["wall_clock_cap_s"].get<double>();
        SyntheticEnvironment env(graph);
        const json backend = config["backend"];
        const auto rows = ablate(env, ablation_tasks(*graph, lens), ms, seeds, base,
                                 [&](std::uint64_t s) { return make_agents(backend, graph, s, log); }, workers);
        rec.output(csv_path, ablation_csv(rows));
        if (!json_path.empty()) {
          json all = json::array();
          for (const auto& r : rows) all.push_back(to_json(r));
          rec.output(json_path, all.dump(2) + "\n");
        }
        rec.finish(manifest_at(fs::path(csv_path + ".manifest.json")), log);
        std::cout << ablation_csv(rows);
        return kExitOk;
      }

      if (sub == recycle_cmd) {
        need(env_path, "--env");
        need(tree_path, "--tree");
        need(out_dir, "--out");
        rec.input(env_path);
        rec.seed(seed);
        auto graph = load_environment_file(env_path);
        auto trees = load_trees({tree_path}, rec);
        SyntheticEnvironment env(graph);
        RecycleOptions opt;
        opt.threshold = config["recycle"]["threshold"].get<double>();
        const RecycleReport rep = recycle(trees[0], env, make_agents(config["backend"], graph, seed, log), opt, log);
        const fs::path out(out_dir);
        rec.output(out / "tree.json", to_json(trees[0]).dump(2) + "\n");
        rec.output(out / "tree.dot", to_dot(trees[0]));
        rec.output(out / "recycle.json", to_json(rep).dump(2) + "\n");
        rec.finish(manifest_at(out / "manifest.json"), log);
        std::cout << json{{"candidates", rep.candidates.size()}, {"accepted", rep.accepted}, {"attached", rep.attached}}.dump() << "\n";
        return kExitOk;
      }

      if (sub == loop_cmd) {
        need(env_path, "--env");
        need(plan_path, "--plan");
        need(out_dir, "--out");
        rec.input(env_path);
        rec.input(plan_path);
        rec.seed(seed);
        auto graph = load_environment_file(env_path);
        json pj;
        try {
          pj = json::parse(read_file(plan_path));
        } catch (const json::parse_error& e) {
          throw ValidationError(plan_path + ": " + e.what());
        }
        LoopPlan plan = plan_from_json(pj, *graph, mcfg);
        if (!pj.contains("backend")) plan.backend = config["backend"];
        SyntheticEnvironment env(graph);
        const LoopResult res = run_plan(plan, env, *graph, backend_factory(graph, log), seed, workers, log);
        const fs::path out(out_dir);
        json stages = json::array();
        for (const auto& s : res.stages) stages.push_back(to_json(s));
        rec.output(out / "stages.json", stages.dump(2) + "\n");
        rec.output(out / "stages.csv", stage_csv(res.stages));
        for (const auto& t : res.state.trees) rec.output(out / "trees" / (t.tree_id() + ".json"), to_json(t).dump(2) + "\n");
        const ExportResult data = build_export(res.state.trees);
        for (const auto& [name, content] : data.files) rec.output(out / "data" / name, content);
        rec.output(out / "data" / "manifest.json", data.manifest.dump(2) + "\n");
        rec.finish(manifest_at(out / "manifest.json"), log);
        std::cout << stage_csv(res.stages);
        return kExitOk;
      }

      if (sub == export_cmd) {
        need(out_dir, "--out");
        if (tree_paths.empty()) throw CLI::RequiredError("--trees");
        const auto trees = load_trees(tree_paths, rec);
        ExportOptions opt;
        opt.pref_cap = config["export"]["pref_cap"].get<std::size_t>();
        opt.channels.clear();
        for (const auto& c : config["export"]["channels"]) opt.channels.push_back(channel_from_string(c.get<std::string>()));
        const ExportResult r = build_export(trees, opt);
        const fs::path out(out_dir);
        for (const auto& [name, content] : r.files) rec.output(out / name, content);
        rec.output(out / "data_manifest.json", r.manifest.dump(2) + "\n");
        rec.finish(manifest_at(out / "manifest.json"), log);
        std::cout << r.manifest.dump() << "\n";
        return kExitOk;
      }

      if (sub == metrics_cmd) {
        json m = json::object();
        if (!pred_path.empty() || !truth_path.empty()) {
          need(pred_path, "--pred");
          need(truth_path, "--truth");
          rec.input(pred_path);
          rec.input(truth_path);
          const auto s = compute_sr_tp(load_actions(pred_path), load_actions(truth_path));
          m["sr"] = s.sr;
          m["tp"] = s.tp;
        }
        if (!result_paths.empty()) {
          std::vector<MiningOutcome> outcomes;
          for (const auto& p : result_paths) {
            rec.input(p);
            const json r = json::parse(read_file(p));
            const std::string o = r.at("outcome").get<std::string>();
            if (o != "success" && o != "budget_exhausted") throw ValidationError(p + ": unknown outcome '" + o + "'");
            outcomes.push_back(o == "success" ? MiningOutcome::success : MiningOutcome::budget_exhausted);
          }
          m["msr"] = compute_msr(outcomes);
          m["attempts"] = outcomes.size();
        }
        if (!data_path.empty() || !env_path.empty()) {
          need(env_path, "--env");
          need(data_path, "--data");
          rec.input(env_path);
          rec.input(data_path);
          auto graph = load_environment_file(env_path);
          const auto traj = import_trajectories(read_file(data_path));
          m["dqa"] = compute_dqa(traj, *graph);
          m["trajectories"] = traj.size();
        }
        if (m.empty()) return usage_error("give --pred/--truth, --results, or --env/--data");
        if (!json_path.empty()) {
          rec.output(json_path, m.dump(2) + "\n");
          rec.finish(manifest_at(fs::path(json_path + ".manifest.json")), log);
        } else {
          rec.finish(g.manifest.empty() ? std::nullopt : std::optional<fs::path>(g.manifest), log);
        }
        std::cout << m.dump() << "\n";
        return kExitOk;
      }

      if (sub == cost_cmd) {
        const CostParams p = cost_params(config["cost"]);
        std::string csv = cost_csv_header();
        json out = json::array();
        auto add = [&](const std::string& label, double n, Pipeline pl) {
          const CostBreakdown b = estimate_cost(p, n, pl);
          csv += cost_csv_row(label, b);
          json j = to_json(b);
          j["label"] = label;
          out.push_back(std::move(j));
        };
        if (table) {
          add("AC", 88000, Pipeline::manual);
          add("AITZ", 18000, Pipeline::manual);
          add("GUI-Odyssey", 119000, Pipeline::manual);
          add("mined", 20000, Pipeline::mined);
        }
        if (n_img >= 0) add("custom", n_img, pipeline_from_string(pipeline));
        if (out.empty()) return usage_error("give --n-img or --table");
        if (!params_path.empty()) rec.input(params_path);
        if (!csv_path.empty()) {
          rec.output(csv_path, csv);
          rec.finish(manifest_at(fs::path(csv_path + ".manifest.json")), log);
        } else {
          rec.finish(g.manifest.empty() ? std::nullopt : std::optional<fs::path>(g.manifest), log);
        }
        std::cout << out.dump(2) << "\n";
        return kExitOk;
      }
    } catch (const CLI::RequiredError& e) {
      return usage_error(std::string("missing required option ") + e.what());
    }
    return usage_error("unknown subcommand");
  } catch (const ValidationError& e) {
    log.log(LogLevel::error, "run.invalid", {{"error", e.what()}});
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const SchemaError& e) {
    log.log(LogLevel::error, "run.invalid", {{"error", e.what()}});
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NotFoundError& e) {
    log.log(LogLevel::error, "run.invalid", {{"error", e.what()}});
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const UnknownIntentError& e) {
    log.log(LogLevel::error, "run.invalid", {{"error", e.what()}});
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    log.log(LogLevel::error, "run.failed", {{"error", e.what()}});
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
