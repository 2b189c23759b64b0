#pragma once

// Closed-loop evaluation, attention alignment and report emission.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfvla/model.hpp"
#include "rfvla/sim.hpp"
#include "rfvla/vocab.hpp"

namespace rfvla::eval {

// Per-episode controller. A policy hands out one agent per episode so that
// episodes can run concurrently.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual sim::Action act(const sim::Scene& scene) = 0;
  // Decoded rationale for logging; empty when the policy has none.
  virtual std::string rationale() const { return {}; }
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::unique_ptr<Agent> start(const sim::Scene& initial, const sim::VariantSpec& variant,
                                       const sim::Task& task, std::uint64_t episode_seed) const = 0;
};

class ExpertPolicy final : public Policy {
 public:
  std::unique_ptr<Agent> start(const sim::Scene&, const sim::VariantSpec&, const sim::Task& task,
                               std::uint64_t) const override;
};

// Uniform over the 18 actions, seeded per episode.
class RandomPolicy final : public Policy {
 public:
  std::unique_ptr<Agent> start(const sim::Scene&, const sim::VariantSpec&, const sim::Task&,
                               std::uint64_t episode_seed) const override;
};

// Greedy decoding: the rationale is generated once from the first
// observation, then every step predicts the action token after it.
class ModelPolicy final : public Policy {
 public:
  ModelPolicy(const model::ParamStore& params, const model::ModelConfig& config, const data::Vocabulary& vocab)
      : params_(&params), config_(config), vocab_(&vocab) {}
  std::unique_ptr<Agent> start(const sim::Scene& initial, const sim::VariantSpec& variant, const sim::Task& task,
                               std::uint64_t episode_seed) const override;

 private:
  const model::ParamStore* params_;
  model::ModelConfig config_;
  const data::Vocabulary* vocab_;
};

// Checkpoint-backed model policy; CompatibilityError on a vocabulary mismatch.
class CheckpointPolicy final : public Policy {
 public:
  CheckpointPolicy(const std::filesystem::path& path, const data::Vocabulary& vocab);
  std::unique_ptr<Agent> start(const sim::Scene& initial, const sim::VariantSpec& variant, const sim::Task& task,
                               std::uint64_t episode_seed) const override;
  const model::Checkpoint& checkpoint() const { return ck_; }

 private:
  model::Checkpoint ck_;
  const data::Vocabulary* vocab_;
};

struct EpisodeLog {
  std::string task;
  sim::VariantMode mode = sim::VariantMode::visual_matching;
  int episode = 0;
  std::uint64_t seed = 0;
  std::uint64_t scene_hash = 0;  // initial scene
  bool grasped = false;
  bool success = false;
  int steps = 0;
  std::string rationale;
  friend bool operator==(const EpisodeLog&, const EpisodeLog&) = default;
};

nlohmann::json to_json(const EpisodeLog& log);
EpisodeLog episode_log_from_json(const nlohmann::json& j);
void write_episode_logs(const std::filesystem::path& path, const std::vector<EpisodeLog>& logs);
std::vector<EpisodeLog> read_episode_logs(const std::filesystem::path& path);

// Runs from a given initial scene until success or `max_steps`.
sim::EpisodeResult run_episode(const Policy& policy, const sim::Task& task, const sim::Scene& initial,
                               const sim::VariantSpec& variant, std::uint64_t episode_seed, int max_steps,
                               std::string* rationale = nullptr);

struct EpisodeSpec {
  sim::Task task;
  sim::VariantSpec variant;
  sim::Scene initial;
  std::uint64_t seed = 0;
};

// Scene and variant for one evaluation episode.
EpisodeSpec make_episode(const sim::Task& task, sim::VariantMode mode, std::uint64_t seed);

sim::EpisodeResult rollout(const Policy& policy, const sim::Task& task, sim::VariantMode mode, std::uint64_t seed,
                           int max_steps = 64);

struct EvalConfig {
  int episodes_per_task = 50;
  std::vector<sim::VariantMode> modes{sim::VariantMode::visual_matching};
  std::vector<sim::Task> tasks = sim::canonical_tasks();
  int max_steps = 64;
  std::uint64_t seed = 1000;
  int jobs = 1;

  void validate() const;  // ConfigError
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

std::uint64_t eval_episode_seed(std::uint64_t base, sim::VariantMode mode, std::size_t task_index, int episode);

struct TaskRow {
  std::string task;
  sim::VariantMode mode = sim::VariantMode::visual_matching;
  int episodes = 0;
  int grasps = 0;
  int successes = 0;
  double grasp_rate() const { return episodes ? static_cast<double>(grasps) / episodes : 0.0; }
  double success_rate() const { return episodes ? static_cast<double>(successes) / episodes : 0.0; }
  friend bool operator==(const TaskRow&, const TaskRow&) = default;
};

struct SuccessTable {
  std::vector<TaskRow> rows;  // mode-major, tasks in first-seen order
  // Mean of the per-task success rates.
  double average_success(sim::VariantMode mode) const;
  double average_grasp(sim::VariantMode mode) const;
  double average_success() const;  // over every row
  friend bool operator==(const SuccessTable&, const SuccessTable&) = default;
};

// Pure fold over episode logs.
SuccessTable aggregate(const std::vector<EpisodeLog>& logs);
// mode,task,grasp,success per row, then one "average" row per mode.
std::string success_csv(const SuccessTable& table);

struct SuiteResult {
  std::vector<EpisodeLog> logs;
  SuccessTable table;
};

// Errors are rethrown with the episode coordinates prefixed.
SuiteResult eval_suite(const Policy& policy, const EvalConfig& config);

// Closed-loop success from a fixed list of starting states.
double success_rate(const Policy& policy, const std::vector<EpisodeSpec>& episodes, int max_steps, int jobs = 1);

// Source, destination and gripper cells, deduplicated.
std::vector<sim::Cell> relevant_cells(const sim::Scene& scene, const sim::Task& task);

// Mean over layers, heads and query rows of the attention mass on relevant
// patches (row index y*grid_w + x). MetricError on an empty relevant set.
double attention_alignment(const std::vector<std::vector<Tensor>>& attn, const std::vector<sim::Cell>& relevant,
                           int grid_w);
// Same average, kept per [layer][head].
std::vector<std::vector<double>> alignment_by_head(const std::vector<std::vector<Tensor>>& attn,
                                                   const std::vector<sim::Cell>& relevant, int grid_w);

// Attention at the <ACT> query over patch keys for a scene, using the
// model's own generated rationale.
std::vector<std::vector<Tensor>> action_attention(const model::ParamStore& params, const model::ModelConfig& config,
                                                  const data::Vocabulary& vocab, const sim::Scene& scene,
                                                  const sim::VariantSpec& variant, const sim::Task& task);

struct EpisodeAlignment {
  std::uint64_t seed = 0;
  std::string task;
  std::uint64_t scene_hash = 0;
  double score = 0.0;
  std::vector<std::vector<double>> by_head;
};

struct AlignmentReport {
  std::vector<EpisodeAlignment> episodes;
  double mean = 0.0;
  std::vector<std::vector<double>> by_head;
};

// Scored at the first observation of each evaluation episode.
AlignmentReport alignment_report(const model::ParamStore& params, const model::ModelConfig& config,
                                 const data::Vocabulary& vocab, const EvalConfig& eval);

struct PairedAlignment {
  std::uint64_t seed = 0;
  std::string task;
  std::uint64_t scene_hash = 0;
  double before = 0.0, after = 0.0, delta = 0.0;
};

struct ComparisonReport {
  std::vector<PairedAlignment> pairs;
  double mean_before = 0.0, mean_after = 0.0, mean_delta = 0.0;
  std::vector<std::vector<double>> delta_by_head;
  std::size_t hash_matches = 0;  // pairs whose scene hashes agree
};

// CompatibilityError when configs or vocabularies differ; ConsistencyError
// when a pair's scene hashes disagree.
ComparisonReport compare_alignment(const model::Checkpoint& before, const model::Checkpoint& after,
                                   const data::Vocabulary& vocab, const EvalConfig& eval);
ComparisonReport compare_reports(const AlignmentReport& before, const AlignmentReport& after);

nlohmann::json to_json(const AlignmentReport& r);
nlohmann::json to_json(const ComparisonReport& r);

// Render with the red channel replaced by attention / max attention per
// cell, green and blue halved. Writes `path` (P6) and a sidecar with the
// extension replaced by ".json".
void emit_heatmap(const Tensor& image, const std::vector<double>& row, int grid_w, int grid_h,
                  const std::filesystem::path& path);

struct Heatmap {
  int grid_w = 0, grid_h = 0;
  std::vector<double> values;
};
Heatmap read_heatmap_sidecar(const std::filesystem::path& json_path);

struct Ppm {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};
void write_ppm(const std::filesystem::path& path, const Ppm& image);
Ppm read_ppm(const std::filesystem::path& path);

struct CurvePoint {
  double value = 0.0;
  std::optional<double> success;
  std::optional<double> l_action;
  std::optional<double> l_reasoning;
  std::string note;
  std::string error;
  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct CurveReport {
  std::string axis;
  std::vector<CurvePoint> points;
  friend bool operator==(const CurveReport&, const CurveReport&) = default;
};

// Array of {value, val_success, final_L_action, final_L_reasoning[, note][, error]}.
nlohmann::json to_json(const CurveReport& r);
CurveReport curve_from_json(const nlohmann::json& j, std::string axis);

// Line chart of success against the swept value, one marker per point with
// a recorded success. Writes `path` (SVG) and a ".json" sidecar.
// PlotError for fewer than two points.
void emit_curves(const CurveReport& report, const std::filesystem::path& svg_path);
std::string render_svg(const CurveReport& report);

}  // namespace rfvla::eval
