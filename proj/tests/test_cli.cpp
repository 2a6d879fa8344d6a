#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

// End-to-end checks against the installed binary. WIDENET_CLI_PATH is baked
// in by the build so the suite always tests the matching executable.

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "widenet-cli-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunResult run_cli(const std::string& args) {
  static int invocation = 0;
  const fs::path dir = fs::temp_directory_path() / "widenet-cli-tests";
  fs::create_directories(dir);
  const fs::path out = dir / ("stdout." + std::to_string(invocation));
  const fs::path err = dir / ("stderr." + std::to_string(invocation));
  ++invocation;

  const std::string cmd = std::string(WIDENET_CLI_PATH) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  result.out = slurp(out);
  result.err = slurp(err);
  return result;
}

// A run small enough to keep the suite quick but large enough to produce
// every artifact (metrics, routing, step + final checkpoints, eval line).
std::string small_run_args(const fs::path& out_dir) {
  return "train --preset widenet-toy --set train.steps=20"
         " --set train.eval_every=10 --set train.checkpoint_every=10"
         " --set data.train_size=64 --set data.eval_size=32"
         " --set train.batch_size=8 --out " +
         out_dir.string();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("train writes a complete artifact set into a fresh directory") {
  const fs::path dir = scratch_dir("train-artifacts") / "deep" / "nested";
  const RunResult run = run_cli(small_run_args(dir));
  INFO(run.err);
  REQUIRE(run.code == 0);
  CHECK(run.out.find("20 steps") != std::string::npos);

  const json echo = json::parse(slurp(dir / "config.json"));
  CHECK(echo["train"]["steps"] == 20);
  CHECK(echo["model"]["experts"] == 4);

  CHECK(lines_of(slurp(dir / "metrics.jsonl")).size() == 20);
  // one routing record per group per step
  CHECK(lines_of(slurp(dir / "routing.jsonl")).size() == 20 * 4);
  CHECK(fs::exists(dir / "checkpoints" / "step-10" / "manifest.json"));
  CHECK(fs::exists(dir / "checkpoints" / "final" / "tensors.bin"));
}

TEST_CASE("identical invocations produce byte-identical metric streams") {
  const fs::path a = scratch_dir("repeat-a");
  const fs::path b = scratch_dir("repeat-b");
  REQUIRE(run_cli(small_run_args(a)).code == 0);
  REQUIRE(run_cli(small_run_args(b)).code == 0);
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  CHECK(slurp(a / "routing.jsonl") == slurp(b / "routing.jsonl"));
  CHECK(slurp(a / "checkpoints" / "final" / "tensors.bin") ==
        slurp(b / "checkpoints" / "final" / "tensors.bin"));
}

TEST_CASE("resume continues the metric stream exactly") {
  const fs::path full = scratch_dir("resume-full");
  const fs::path half = scratch_dir("resume-half");
  REQUIRE(run_cli(small_run_args(full)).code == 0);

  const RunResult resumed = run_cli(
      small_run_args(half) + " --resume " +
      (full / "checkpoints" / "step-10").string());
  INFO(resumed.err);
  REQUIRE(resumed.code == 0);
  CHECK(resumed.out.find("resuming") != std::string::npos);

  const auto all = lines_of(slurp(full / "metrics.jsonl"));
  const auto tail = lines_of(slurp(half / "metrics.jsonl"));
  REQUIRE(all.size() == 20);
  REQUIRE(tail.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(tail[i] == all[10 + i]);
  CHECK(slurp(full / "checkpoints" / "final" / "tensors.bin") ==
        slurp(half / "checkpoints" / "final" / "tensors.bin"));
}

TEST_CASE("share_ln ablation flows from --set to the divergence report") {
  const fs::path dir = scratch_dir("ablation");
  const RunResult run =
      run_cli(small_run_args(dir) + " --set share_ln=true");
  INFO(run.err);
  REQUIRE(run.code == 0);
  CHECK(json::parse(slurp(dir / "config.json"))["model"]["share_ln"] == true);

  const RunResult report = run_cli(
      "analyze --which ln-divergence --checkpoint " +
      (dir / "checkpoints" / "final").string());
  REQUIRE(report.code == 0);
  // one shared norm object: zero by construction, for both sites
  CHECK(report.out.find("y_gamma 0.000000, y_beta 0.000000") !=
        std::string::npos);
}

TEST_CASE("eval is deterministic and reports per-group routing") {
  const fs::path dir = scratch_dir("eval");
  REQUIRE(run_cli(small_run_args(dir)).code == 0);
  const std::string ckpt = (dir / "checkpoints" / "final").string();
  const RunResult once = run_cli("eval --checkpoint " + ckpt);
  const RunResult twice = run_cli("eval --checkpoint " + ckpt);
  INFO(once.err);
  REQUIRE(once.code == 0);
  CHECK(once.out == twice.out);
  CHECK(once.out.find("accuracy") != std::string::npos);
  CHECK(once.out.find("group 0:") != std::string::npos);
  CHECK(once.out.find("group 3:") != std::string::npos);
}

TEST_CASE("eval on a missing checkpoint fails cleanly") {
  const RunResult run = run_cli("eval --checkpoint /no/such/dir");
  CHECK(run.code == 1);
  CHECK(run.err.find("error:") != std::string::npos);
  CHECK(run.out.empty());
}

TEST_CASE("analyze worked values and failure modes") {
  const RunResult est = run_cli(
      "analyze --which tokens-estimate --images 1000 --patches 16"
      " --top-k 2 --experts 4");
  REQUIRE(est.code == 0);
  CHECK(lines_of(est.out).at(0) == "8000");

  const RunResult zero = run_cli(
      "analyze --which tokens-estimate --images 0 --patches 16"
      " --top-k 2 --experts 4");
  CHECK(zero.code == 1);
  CHECK(zero.err.find("error:") != std::string::npos);

  const fs::path dir = scratch_dir("analyze");
  const fs::path empty = dir / "empty.jsonl";
  std::ofstream(empty).close();
  const RunResult util = run_cli("analyze --which utilization --routing " +
                                 empty.string());
  CHECK(util.code == 1);
  CHECK(util.err.find("error:") != std::string::npos);

  const RunResult bogus = run_cli("analyze --which nonsense");
  CHECK(bogus.code == 1);
}

TEST_CASE("utilization over a real run matches the record count") {
  const fs::path dir = scratch_dir("util");
  REQUIRE(run_cli(small_run_args(dir)).code == 0);
  const RunResult util = run_cli("analyze --which utilization --routing " +
                                 (dir / "routing.jsonl").string());
  INFO(util.err);
  REQUIRE(util.code == 0);
  CHECK(util.out.find("80 records over 20 steps, 4 experts") !=
        std::string::npos);
  CHECK(util.out.find("expert 3:") != std::string::npos);
}

TEST_CASE("verify exits 0 on a healthy build and 3 under fault injection") {
  const RunResult good = run_cli("verify --seed 5");
  INFO(good.out);
  CHECK(good.code == 0);
  CHECK(good.out.find("7/7 checks passed") != std::string::npos);

  const RunResult bad = run_cli("verify --inject-renorm");
  CHECK(bad.code == 3);
  CHECK(bad.out.find("[FAIL] moe-combine-oracle") != std::string::npos);
  CHECK(bad.out.find("[PASS] routing-sparsity-capacity") != std::string::npos);
}

TEST_CASE("usage problems all exit 1 with a message") {
  CHECK(run_cli("").code == 1);
  const RunResult no_source = run_cli("train");
  CHECK(no_source.code == 1);
  CHECK(no_source.err.find("--preset or --config") != std::string::npos);

  const RunResult unknown = run_cli("train --preset no-such-preset");
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("widenet-toy") != std::string::npos);

  const RunResult bad_set =
      run_cli("train --preset widenet-toy --set nonsense");
  CHECK(bad_set.code == 1);
  CHECK(bad_set.err.find("key=value") != std::string::npos);

  const RunResult both = run_cli(
      "train --preset widenet-toy --config /tmp/x.json");
  CHECK(both.code == 1);
}
