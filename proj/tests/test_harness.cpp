#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dlm/dataforge.hpp"
#include "dlm/error.hpp"
#include "dlm/harness.hpp"

using namespace dlm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dlm_harness_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string config(const std::string& name) { return std::string(DLM_SOURCE_DIR) + "/configs/" + name; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DLM_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("trajectory csv round trip") {
  Trajectory t;
  t.length = 4;
  t.initial_masked = {0, 1, 2, 3};
  t.steps = {{{2, 1, 0.1 + 0.2, 0}, {0, 3, 1.0 / 3.0, 1}}, {{1, 0, 0.5, 0}}, {{3, 2, 1e-300, 2}}};
  const std::string csv = trajectory_to_csv(t);
  const Trajectory back = trajectory_from_csv(csv);
  CHECK(back.length == 4);
  CHECK(back.initial_masked == t.initial_masked);
  REQUIRE(back.steps.size() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    REQUIRE(back.steps[s].size() == t.steps[s].size());
    for (std::size_t i = 0; i < t.steps[s].size(); ++i) {
      CHECK(back.steps[s][i].position == t.steps[s][i].position);
      CHECK(back.steps[s][i].token == t.steps[s][i].token);
      CHECK(back.steps[s][i].confidence == t.steps[s][i].confidence);
      CHECK(back.steps[s][i].block_id == t.steps[s][i].block_id);
    }
  }
  CHECK(trajectory_to_csv(back) == csv);
  CHECK(plot_to_csv(t) == "step,position,block_id\n0,2,0\n0,0,1\n1,1,0\n2,3,2\n");

  CHECK_THROWS_AS(trajectory_from_csv(""), ParseError);
  CHECK_THROWS_AS(trajectory_from_csv("a,b\n"), ParseError);
  CHECK_THROWS_AS(trajectory_from_csv("step,position,token,confidence,block_id\n0,1,x,0.5,0\n"), ParseError);
  CHECK_THROWS_AS(trajectory_from_csv("step,position,token,confidence,block_id\n1,1,0,0.5,0\n"), InvalidTrajectory);
}

TEST_CASE("decode config errors carry key paths") {
  const nlohmann::json base = {{"source", {{"kind", "cycle"}, {"V", 4}}}, {"scheduler", {{"kind", "ar"}}}};
  auto key_of = [](const nlohmann::json& cfg) -> std::string {
    try {
      plan_from_json(cfg);
    } catch (const ConfigError& e) {
      return e.key_path();
    }
    return "<none>";
  };
  CHECK(key_of(base) == "<none>");
  nlohmann::json c = base;
  c.erase("source");
  CHECK(key_of(c) == "source");
  c = base;
  c["length"] = 0;
  CHECK(key_of(c) == "length");
  c = base;
  c["steps"] = "M/0";
  CHECK(key_of(c) == "steps");
  c = base;
  c["steps"] = 4;
  c["quotas"] = {1, 2};
  CHECK(key_of(c) == "quotas");
  c = base;
  c["k_list"] = {1, 0};
  CHECK(key_of(c) == "k_list");
  c = base;
  c["clamp_tokens"] = {7};
  CHECK(key_of(c) == "clamp_tokens[0]");
  c = base;
  c["denoiser"] = {{"method", "magic"}};
  CHECK(key_of(c) == "denoiser.method");
  c = base;
  c["scheduler"] = {{"kind", "nap_parallel"}};
  CHECK(key_of(c) == "canvas");
  c = base;
  c["length"] = "long";
  CHECK(key_of(c) == ".length");
}

TEST_CASE("step specs relative to the masked count") {
  nlohmann::json cfg = {{"source", {{"kind", "cycle"}, {"V", 4}}}, {"scheduler", {{"kind", "ar"}}}, {"steps", "M/4"}};
  CHECK(plan_from_json(cfg).schedule_for(10).quotas.size() == 2);
  cfg["steps"] = "M";
  CHECK(plan_from_json(cfg).schedule_for(10).quotas.size() == 10);
  cfg["steps"] = 3;
  CHECK(plan_from_json(cfg).schedule_for(10).quotas == std::vector<std::size_t>{4, 3, 3});
  cfg.erase("steps");
  cfg["quotas"] = {2, 8};
  CHECK(plan_from_json(cfg).schedule_for(10).quotas == std::vector<std::size_t>{2, 8});
  CHECK_THROWS_AS(plan_from_json(cfg).schedule_for(9), InfeasibleSchedule);
}

TEST_CASE("exit codes by error class") {
  CHECK(exit_code_for(InfeasibleSchedule("x")) == exit_codes::infeasible);
  CHECK(exit_code_for(EndpointUnavailable("x")) == exit_codes::unavailable);
  CHECK(exit_code_for(ProtocolError("x", "y")) == exit_codes::unavailable);
  CHECK(exit_code_for(CurationError("x", 0)) == exit_codes::unavailable);
  CHECK(exit_code_for(ConfigError("a", "x")) == exit_codes::config);
  CHECK(exit_code_for(ParseError("x", 0)) == exit_codes::config);
  CHECK(exit_code_for(StallError("x")) == exit_codes::internal);
  CHECK(exit_code_for(ProtocolViolation("x")) == exit_codes::internal);
  CHECK(exit_code_for(std::runtime_error("x")) == exit_codes::internal);
}

TEST_CASE("config hash ignores key order") {
  const auto a = nlohmann::json::parse(R"({"a": 1, "b": [1, 2]})");
  const auto b = nlohmann::json::parse(R"({"b": [1, 2], "a": 1})");
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  CHECK(config_hash(a) != config_hash(nlohmann::json::parse(R"({"a": 2, "b": [1, 2]})")));
}

TEST_CASE("decode writes reproducible artifacts") {
  TempDir tmp("decode");
  DecodeArgs args;
  args.config_path = config("decode_confidence.json");
  args.out = (tmp.path / "a").string();
  std::ostringstream log;
  REQUIRE(cmd_decode(args, log) == exit_codes::ok);
  args.out = (tmp.path / "b").string();
  REQUIRE(cmd_decode(args, log) == exit_codes::ok);
  for (const auto& entry : fs::directory_iterator(tmp.path / "a")) {
    const auto name = entry.path().filename();
    CHECK(read_text_file(entry.path()) == read_text_file(tmp.path / "b" / name));
  }
  const auto manifest = read_json_file(tmp.path / "a" / "manifest.json");
  CHECK(manifest.at("runs").size() == 3);
  CHECK(manifest.at("config") == read_json_file(config("decode_confidence.json")));
  CHECK(manifest.at("seeds")[1].get<std::uint64_t>() == split_seed(7, 1));
  for (const auto& a : manifest.at("artifacts")) CHECK(fs::exists(tmp.path / "a" / a.get<std::string>()));

  // Trajectories on disk reproduce the reported ARness.
  const auto arness = read_json_file(tmp.path / "a" / "arness.json");
  for (std::size_t i = 0; i < 3; ++i) {
    const auto t = trajectory_from_csv(read_text_file(tmp.path / "a" / ("trajectory_" + std::to_string(i) + ".csv")));
    CHECK(t.total_commits() == 47);
    CHECK(global_arness(t, 1) == arness.at("runs")[i].at("arness").at("1").get<double>());
  }

  // Seed override changes the runs.
  args.out = (tmp.path / "c").string();
  args.seed = 8;
  REQUIRE(cmd_decode(args, log) == exit_codes::ok);
  CHECK(read_text_file(tmp.path / "a" / "trajectory_0.csv") != read_text_file(tmp.path / "c" / "trajectory_0.csv"));
}

TEST_CASE("arness command reads trajectory files") {
  TempDir tmp("arness");
  Trajectory ar;
  ar.length = 3;
  ar.initial_masked = {0, 1, 2};
  ar.steps = {{{0, 0, 1.0, 0}}, {{1, 0, 1.0, 0}}, {{2, 0, 1.0, 0}}};
  Trajectory rev = ar;
  rev.steps = {{{2, 0, 1.0, 0}}, {{1, 0, 1.0, 0}}, {{0, 0, 1.0, 0}}};
  write_file(tmp.path / "ar.csv", trajectory_to_csv(ar));
  write_file(tmp.path / "rev.csv", trajectory_to_csv(rev));
  ArnessArgs args;
  args.trajectories = {(tmp.path / "ar.csv").string(), (tmp.path / "rev.csv").string()};
  args.k_list = {1, 2};
  args.json_out = (tmp.path / "out.json").string();
  std::ostringstream out;
  REQUIRE(cmd_arness(args, out) == exit_codes::ok);
  const auto j = read_json_file(tmp.path / "out.json");
  CHECK(j.at("aggregate").at("1").get<double>() == doctest::Approx((1.0 + 1.0 / 3.0) / 2.0));
  CHECK(j.at("aggregate").at("2").get<double>() == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));

  Trajectory shorter;
  shorter.length = 1;
  shorter.initial_masked = {0};
  shorter.steps = {{{0, 0, 1.0, 0}}};
  write_file(tmp.path / "short.csv", trajectory_to_csv(shorter));
  args.trajectories.push_back((tmp.path / "short.csv").string());
  CHECK_THROWS_AS(cmd_arness(args, out), ConfigError);
  args.allow_mixed = true;
  CHECK(cmd_arness(args, out) == exit_codes::ok);
}

TEST_CASE("sweep covers every cell and skips infeasible ones") {
  TempDir tmp("sweep");
  SweepArgs args;
  args.grid_path = config("sweep_steps.json");
  args.out = (tmp.path / "one").string();
  std::ostringstream log;
  REQUIRE(cmd_sweep(args, log) == exit_codes::ok);
  const auto summary = read_json_file(tmp.path / "one" / "summary.json");
  // 4 step settings x 3 schedulers; 64 steps exceed the 32 masked positions.
  CHECK(summary.at("rows").size() == 9);
  CHECK(summary.at("skipped").size() == 3);
  for (const auto& row : summary.at("rows")) {
    const auto sched = row.at("scheduler").get<std::string>();
    if (sched == "ar") CHECK(row.at("arness").at("1").get<double>() == 1.0);
    CHECK(row.at("masked").get<std::size_t>() == 32);
    // The cycle leaves no ambiguity, so every decode is correct.
    CHECK(row.at("accuracy").get<double>() == 1.0);
  }
  args.jobs = 3;
  args.out = (tmp.path / "three").string();
  REQUIRE(cmd_sweep(args, log) == exit_codes::ok);
  CHECK(read_text_file(tmp.path / "one" / "summary.csv") == read_text_file(tmp.path / "three" / "summary.csv"));

  write_file(tmp.path / "bad.json", R"({"base": {"source": {"kind": "cycle", "V": 4}, "scheduler": {"kind": "ar"}},
    "axes": {"length": [1, 2]}})");
  args.grid_path = (tmp.path / "bad.json").string();
  CHECK_THROWS_AS(cmd_sweep(args, log), ConfigError);
}

TEST_CASE("curate and seqdep commands") {
  TempDir tmp("curate");
  CurateArgs cur;
  cur.config_path = config("curate_nap.json");
  cur.queries = 20;
  cur.out = (tmp.path / "corpus").string();
  std::ostringstream log;
  REQUIRE(cmd_curate(cur, log) == exit_codes::ok);
  const auto validation = read_json_file(tmp.path / "corpus" / "validation.json");
  CHECK(validation.at("passed").get<std::size_t>() == 20);
  std::ifstream in(tmp.path / "corpus" / "corpus.jsonl");
  const auto corpus = read_jsonl(in);
  CHECK(corpus.size() == 20);
  for (const auto& inst : corpus) CHECK(inst.traces.size() == 3);

  SeqdepArgs sd;
  sd.corpus = (tmp.path / "corpus" / "corpus.jsonl").string();
  sd.scorer = config("scorer_nap.json");
  sd.bins = "2";
  sd.out = (tmp.path / "profile").string();
  REQUIRE(cmd_seqdep(sd, log) == exit_codes::ok);
  const auto bins = read_profile_csv(read_text_file(tmp.path / "profile" / "profile.csv"));
  REQUIRE(!bins.empty());
  std::size_t counted = 0;
  for (const auto& b : bins) counted += b.count;
  const auto profile = read_json_file(tmp.path / "profile" / "profile.json").at("seqdep");
  CHECK(counted + profile.at("undefined_count").get<std::size_t>() == 20);

  sd.scorer = R"({"kind": "source"})";
  CHECK_THROWS_AS(cmd_seqdep(sd, log), ConfigError);
  sd.scorer = R"({"kind": "external", "vocab_size": 4, "endpoint": {"address": "exec:/nonexistent/endpoint", "retries": 0}})";
  CHECK_THROWS_AS(cmd_seqdep(sd, log), ScorerError);
}

TEST_CASE("failed commands leave no partial output") {
  TempDir tmp("partial");
  write_file(tmp.path / "cfg.json", R"({"source": {"kind": "cycle", "V": 4}, "scheduler": {"kind": "ar"},
    "length": 8, "steps": 16})");
  DecodeArgs args;
  args.config_path = (tmp.path / "cfg.json").string();
  args.out = (tmp.path / "out").string();
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_decode(args, log), InfeasibleSchedule);
  CHECK(!fs::exists(tmp.path / "out"));
}

TEST_CASE("cli exit codes") {
  TempDir tmp("cli");
  CHECK(run_cli("--version") == 0);
  CHECK(run_cli("") == exit_codes::config);
  CHECK(run_cli("decode") == exit_codes::config);
  CHECK(run_cli("decode /nonexistent.json") == exit_codes::config);
  CHECK(run_cli("decode " + config("decode_ar.json") + " --out " + (tmp.path / "ok").string()) == 0);
  write_file(tmp.path / "infeasible.json",
             R"({"source": {"kind": "cycle", "V": 4}, "scheduler": {"kind": "ar"}, "length": 8, "steps": 16})");
  CHECK(run_cli("decode " + (tmp.path / "infeasible.json").string() + " --out " + (tmp.path / "x").string()) ==
        exit_codes::infeasible);
  write_file(tmp.path / "bad.json", R"({"source": {"kind": "cycle", "V": 4}, "scheduler": {"kind": "sideways"}})");
  CHECK(run_cli("decode " + (tmp.path / "bad.json").string()) == exit_codes::config);

  REQUIRE(run_cli("curate " + config("curate_chain.json") + " --queries 5 --out " + (tmp.path / "c").string()) == 0);
  write_file(tmp.path / "scorer.json",
             R"({"kind": "external", "vocab_size": 4, "endpoint": {"address": "exec:/nonexistent/endpoint", "retries": 0}})");
  CHECK(run_cli("seqdep " + (tmp.path / "c" / "corpus.jsonl").string() + " --scorer " +
                (tmp.path / "scorer.json").string() + " --segmenter fixed_window:4 --out " +
                (tmp.path / "p").string()) == exit_codes::unavailable);
  CHECK(run_cli("seqdep " + (tmp.path / "c" / "corpus.jsonl").string() + " --scorer " + config("scorer_cycle.json") +
                " --segmenter fixed_window:4 --out " + (tmp.path / "p").string()) == 0);
  CHECK(run_cli("arness " + (tmp.path / "ok" / "trajectory_0.csv").string() + " --k-list 1,x") == exit_codes::config);
  CHECK(run_cli("arness " + (tmp.path / "ok" / "trajectory_0.csv").string() + " --k-list 1,4") == 0);
}
