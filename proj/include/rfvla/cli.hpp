#pragma once

// Command-line front end: gen-data, annotate, train, sweep-lambda,
// sweep-freeze, eval, viz-attn.
//
// Every command resolves defaults, an optional JSON config file (--config)
// and flags (flags win) into one RunConfig, writes it to <out>/config.json
// before doing any work, and can be re-run from that file alone.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfvla/eval.hpp"
#include "rfvla/model.hpp"
#include "rfvla/trainer.hpp"

namespace rfvla::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kIo = 3,
  kPartial = 4,
  kDivergence = 5,
};

struct DataSection {
  std::filesystem::path in;   // dataset directory read by annotate / train / sweeps
  std::string name = "demo";  // file stem inside dataset directories
  int episodes_per_task = 125;
  std::vector<sim::Task> tasks = sim::canonical_tasks();
  std::vector<sim::VariantMode> modes{sim::VariantMode::visual_matching};
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
};

struct TeacherSection {
  std::string mode = "oracle";  // oracle | remote
  std::string endpoint;         // falls back to REFINEVLA_TEACHER_ENDPOINT
  int retries = 3;
  int timeout_ms = 30000;
  int concurrency = 4;
};

struct RunConfig {
  std::string command;
  std::filesystem::path out;
  DataSection data;
  TeacherSection teacher;
  model::ModelConfig model;
  train::TrainConfig train;
  eval::EvalConfig eval;
  std::vector<double> values;  // sweep values
  int jobs = 1;
  std::string policy = "model";  // eval: model | expert | random
  std::filesystem::path checkpoint;
  std::filesystem::path before, after;
  int heatmaps = 4;  // viz-attn: episodes rendered as heatmaps

  void validate() const;  // ConfigError
};

nlohmann::json to_json(const RunConfig& c);
// Fields absent from `j` keep the values already in `base`.
RunConfig merge_json(RunConfig base, const nlohmann::json& j);

// Sweep value lists such as "0,0.1,0.3".
std::vector<double> parse_values(const std::string& text);

// Runs one command; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rfvla::cli
