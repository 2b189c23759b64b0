#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "rfvla/cli.hpp"
#include "rfvla/dataset.hpp"
#include "rfvla/errors.hpp"

using namespace rfvla;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "refinevla");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rfvla_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::vector<std::string> kTinyModel{"--layers", "2",        "--dim",       "16", "--heads",
                                          "2",        "--mlp-ratio", "2",        "--frozen-blocks", "1"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("gen-data writes a reproducible dataset") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const auto r = run({"gen-data", "--episodes", "1", "--seed", "3", "--out", a.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto loaded = data::load(a, "demo");
  CHECK(loaded.dataset.num_episodes() == 4);
  CHECK_FALSE(loaded.dataset.manifest.annotated);
  CHECK(fs::exists(a / "config.json"));

  REQUIRE(run({"gen-data", "--config", (a / "config.json").string(), "--out", b.string()}).code == 0);
  for (const auto& f : {"demo.records.jsonl", "demo.manifest.json", "vocab.json"})
    CHECK(slurp(a / f) == slurp(b / f));
}

TEST_CASE("configuration errors exit with code 2 before any work") {
  const fs::path a = scratch("bad");
  auto r = run({"gen-data", "--episodes", "0", "--out", a.string()});
  CHECK(r.code == 2);
  CHECK_FALSE(r.err.empty());
  CHECK_FALSE(fs::exists(a));

  CHECK(run({"gen-data", "--tasks", "spoon_on_moon", "--out", a.string()}).code == 2);
  CHECK(run({"gen-data", "--no-such-flag", "--out", a.string()}).code == 2);
  CHECK(run({"train", "--lambda-r", "-1", "--out", a.string()}).code == 2);
  CHECK(run({"train", "--frozen-blocks", "5", "--out", a.string()}).code == 2);
  CHECK(run({"sweep-lambda", "--values", "0,abc", "--out", a.string()}).code == 2);
  CHECK(run({"gen-data"}).code == 2);
  CHECK(run({}).code == 2);

  fs::create_directories(a);
  std::ofstream(a / "c.json") << "{ not json";
  CHECK(run({"gen-data", "--config", (a / "c.json").string(), "--out", a.string()}).code == 2);
  std::ofstream(a / "d.json") << R"({"train": {"optimizer": "lbfgs"}})";
  CHECK(run({"train", "--config", (a / "d.json").string(), "--out", a.string()}).code == 2);
}

TEST_CASE("missing inputs exit with code 3") {
  const fs::path a = scratch("missing");
  CHECK(run({"annotate", "--in", (a / "nowhere").string(), "--out", a.string()}).code == 3);
  CHECK(run({"eval", "--checkpoint", (a / "none.ckpt").string(), "--out", a.string()}).code == 3);
}

TEST_CASE("annotate with the oracle and with an unreachable remote") {
  const fs::path raw = scratch("ann_raw"), ok = scratch("ann_ok"), bad = scratch("ann_bad");
  REQUIRE(run({"gen-data", "--episodes", "1", "--out", raw.string()}).code == 0);

  const auto r = run({"annotate", "--in", raw.string(), "--out", ok.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto d = data::load(ok, "demo").dataset;
  CHECK(d.manifest.annotated);
  for (const auto& s : d.steps) CHECK_FALSE(s.rationale_ids.empty());
  CHECK(data::strip_rationales(d) == data::load(raw, "demo").dataset);

  const auto f = run({"annotate", "--in", raw.string(), "--out", bad.string(), "--teacher", "remote", "--endpoint",
                      "http://127.0.0.1:9/annotate", "--retries", "1", "--timeout-ms", "500"});
  CHECK(f.code == 4);
  const auto failures = nlohmann::json::parse(slurp(bad / "failures.json"));
  CHECK(failures["failed"].size() == d.size());
  CHECK_FALSE(slurp(bad / "config.json").empty());

  CHECK(run({"annotate", "--in", raw.string(), "--out", bad.string(), "--teacher", "remote"}).code == 2);
}

TEST_CASE("train, eval and viz-attn end to end") {
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  const auto args = with({"train", "--episodes", "2", "--seed", "1", "--max-steps", "12", "--eval-interval", "6",
                          "--batch", "4", "--eval-episodes", "1", "--max-episode-steps", "4", "--val-fraction",
                          "0.25", "--out", a.string()},
                         kTinyModel);
  const auto r = run(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  for (const auto& f : {"config.json", "metrics.csv", "checkpoints/best.ckpt", "checkpoints/final.ckpt",
                        "reports/success.csv", "reports/episodes.jsonl", "reports/summary.json"})
    CHECK_MESSAGE(fs::exists(a / f), f);
  const std::string metrics = slurp(a / "metrics.csv");
  CHECK(metrics.rfind("step,L_action,L_reasoning,L_total,val_success,wall_ms\n", 0) == 0);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 14);

  // The persisted config alone reproduces the run.
  const auto again = run({"train", "--config", (a / "config.json").string(), "--out", b.string()});
  REQUIRE_MESSAGE(again.code == 0, again.err);
  CHECK(slurp(b / "metrics.csv") == metrics);
  CHECK(slurp(b / "reports/success.csv") == slurp(a / "reports/success.csv"));
  CHECK(slurp(b / "reports/episodes.jsonl") == slurp(a / "reports/episodes.jsonl"));

  const fs::path e = scratch("eval");
  const auto ev = run({"eval", "--checkpoint", (a / "checkpoints/final.ckpt").string(), "--eval-episodes", "1",
                       "--max-episode-steps", "4", "--out", e.string()});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(fs::exists(e / "reports/success.csv"));

  const fs::path v = scratch("viz");
  const auto vz = run({"viz-attn", "--before", (a / "checkpoints/final.ckpt").string(), "--after",
                       (b / "checkpoints/final.ckpt").string(), "--eval-episodes", "1", "--heatmaps", "2", "--out",
                       v.string()});
  REQUIRE_MESSAGE(vz.code == 0, vz.err);
  const auto rep = nlohmann::json::parse(slurp(v / "reports/alignment.json"));
  CHECK(rep["hash_matches"] == 4);
  CHECK(rep["mean_delta"] == 0.0);
  CHECK(fs::exists(v / "heatmaps/spoon_on_towel_0_before.ppm"));
  CHECK(fs::exists(v / "heatmaps/spoon_on_towel_0_after.json"));
}

TEST_CASE("eval with reference policies") {
  const fs::path a = scratch("ref");
  const auto r = run({"eval", "--policy", "expert", "--eval-episodes", "3", "--out", a.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(a / "reports/success.csv").find("visual_matching,average,1,1\n") != std::string::npos);
  CHECK(run({"eval", "--policy", "oracle", "--out", a.string()}).code == 2);
}

TEST_CASE("sweeps write curves and are reproducible") {
  const fs::path a = scratch("sweep_a"), b = scratch("sweep_b");
  const auto args = with({"sweep-lambda", "--values", "0,0.3,0.3", "--episodes", "1", "--max-steps", "3",
                          "--eval-interval", "3", "--batch", "2", "--eval-episodes", "1", "--max-episode-steps", "3",
                          "--val-fraction", "0.25", "--jobs", "2", "--out", a.string()},
                         kTinyModel);
  const auto r = run(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("warning") != std::string::npos);
  const auto curve = nlohmann::json::parse(slurp(a / "reports/sweep_lambda_r.json"));
  REQUIRE(curve.size() == 2);
  CHECK(slurp(a / "reports/sweep_lambda_r.svg").find("<svg") == 0);
  CHECK(fs::exists(a / "runs/lambda_r_0.3/metrics.csv"));

  REQUIRE(run({"sweep-lambda", "--config", (a / "config.json").string(), "--out", b.string()}).code == 0);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));

  // K above the layer count fails that run only.
  const fs::path k = scratch("sweep_k");
  const auto kr = run(with({"sweep-freeze", "--values", "0,2,3", "--episodes", "1", "--max-steps", "2",
                            "--eval-interval", "2", "--batch", "2", "--eval-episodes", "1", "--max-episode-steps",
                            "2", "--val-fraction", "0.25", "--out", k.string()},
                           kTinyModel));
  CHECK(kr.code == 1);
  const auto kc = nlohmann::json::parse(slurp(k / "reports/sweep_frozen_blocks.json"));
  REQUIRE(kc.size() == 3);
  CHECK(kc[1]["note"] == "head-only");
  CHECK(kc[2].contains("error"));
}

TEST_CASE("config merge keeps unspecified fields") {
  cli::RunConfig base;
  base.model.vocab_size = 10;
  base.train.lr = 0.5;
  const auto m = cli::merge_json(base, nlohmann::json::parse(R"({"train": {"batch": 3}, "jobs": 2})"));
  CHECK(m.train.batch == 3);
  CHECK(m.train.lr == 0.5);
  CHECK(m.jobs == 2);
  CHECK(m.model.vocab_size == 10);
  CHECK(cli::to_json(m) == cli::to_json(cli::merge_json(m, cli::to_json(m))));
  CHECK_THROWS_AS(cli::merge_json(base, nlohmann::json::array()), ConfigError);
  CHECK(cli::parse_values("0, 0.1,3") == std::vector<double>{0.0, 0.1, 3.0});
  CHECK_THROWS_AS(cli::parse_values(""), ConfigError);
}
