#pragma once

// Joint action + rationale training with selective parameter updates.
//
//   L_total = L_action + lambda_r * L_reasoning
//
// Both terms are per-sample means over their target positions, averaged over
// the batch (LossReduction::sum sums positions within a sample instead).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfvla/dataset.hpp"
#include "rfvla/model.hpp"

namespace rfvla::train {

enum class OptimizerKind { adam, sgd };
enum class LossReduction { mean, sum };

struct TrainConfig {
  double lambda_r = 0.3;
  double lr = 3e-4;
  int batch = 16;
  int max_steps = 5000;
  int eval_interval = 500;
  int patience = 6;
  // Validation success gain, as a fraction, that resets patience.
  double min_improvement = 0.005;
  OptimizerKind optimizer = OptimizerKind::adam;
  double clip_norm = 1.0;  // 0 disables clipping
  LossReduction reduction = LossReduction::mean;
  // false builds the action-only graph (no reasoning term at all).
  bool reasoning_in_graph = true;
  std::uint64_t seed = 0;
  bool record_wall_time = false;

  void validate() const;  // ConfigError
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
std::string_view optimizer_name(OptimizerKind k);

// Loss terms over a forward pass. Targets are each sample's rationale ids;
// `masks`, when given, marks the positions that count (1) per sample.
Var action_nll(Tape& tape, const model::ForwardOutput& out, std::span<const int> action_ids);
Var reasoning_nll(Tape& tape, const model::ForwardOutput& out, std::span<const std::vector<int>> targets,
                  std::span<const std::vector<std::uint8_t>> masks = {},
                  LossReduction reduction = LossReduction::mean);
Var joint_loss(Tape& tape, Var action, Var reasoning, double lambda_r);

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}
  // Updates every trainable parameter from its grad.
  void step(model::ParamStore& params);
  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Scales trainable grads so their global L2 norm is at most max_norm;
// returns the norm before clipping.
double clip_grad_norm(model::ParamStore& params, double max_norm);

struct MetricsRow {
  int step = 0;
  double l_action = 0.0;
  double l_reasoning = 0.0;
  double l_total = 0.0;
  std::optional<double> val_success;
  double wall_ms = 0.0;
  friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

// Renders every sample's observation from its symbolic scene.
struct Batch {
  std::vector<Tensor> images;
  std::vector<model::Sample> samples;
  std::vector<int> actions;
  std::vector<std::vector<int>> rationales;
};
Batch make_batch(std::span<const data::Step* const> steps);

struct StepLosses {
  double action = 0.0, reasoning = 0.0, total = 0.0;
};

// Losses without an update (no gradients recorded).
StepLosses evaluate_losses(const model::ParamStore& params, const model::ModelConfig& mc,
                           const data::Vocabulary& vocab, const Batch& batch, const TrainConfig& tc);

// One forward, backward and update. DivergenceError on a non-finite loss.
StepLosses train_step(model::ParamStore& params, Optimizer& opt, const model::ModelConfig& mc,
                      const data::Vocabulary& vocab, const Batch& batch, const TrainConfig& tc);

// Closed-loop validation success rate in [0, 1] for a parameter set.
using Validator = std::function<double(const model::ParamStore&)>;

struct TrainResult {
  model::ParamStore final_params;
  model::ParamStore best_params;
  std::optional<double> best_val;
  std::vector<MetricsRow> metrics;
  int steps = 0;
  bool stopped_early = false;
};

struct TrainOutputs {
  // When set: best.ckpt and final.ckpt (and last.ckpt at each evaluation).
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const MetricsRow&)> on_row;
};

TrainResult train_loop(const data::Dataset& train, const Validator& validate, const model::ModelConfig& mc,
                       const TrainConfig& tc, const data::Vocabulary& vocab, const TrainOutputs& outputs = {});

// step,L_action,L_reasoning,L_total,val_success,wall_ms
std::string metrics_csv(const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

enum class SweepAxis { lambda_r, frozen_blocks };
std::string_view axis_name(SweepAxis a);

struct SweepRow {
  double value = 0.0;
  std::optional<double> val_success;
  std::optional<double> final_l_action;
  std::optional<double> final_l_reasoning;
  std::string note;   // "head-only" when every block is frozen
  std::string error;  // non-empty when the run failed
  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepOptions {
  std::function<void(const std::string&)> warn;
  // Called per value after its run, e.g. to persist per-run artifacts.
  std::function<void(double, const TrainResult&)> on_run;
  int jobs = 1;
};

// Removes repeated values (warning once per duplicate), keeping first order.
std::vector<double> dedup_values(const std::vector<double>& values, const std::function<void(const std::string&)>& warn);

// Independent run per value, seeded from the base seed and the value.
std::vector<SweepRow> sweep(SweepAxis axis, const std::vector<double>& values, const data::Dataset& train,
                            const Validator& validate, const model::ModelConfig& mc, const TrainConfig& tc,
                            const data::Vocabulary& vocab, const SweepOptions& options = {});

std::uint64_t sweep_seed(std::uint64_t base, double value);

// Final losses as the mean over the last `window` training rows.
StepLosses tail_losses(const std::vector<MetricsRow>& rows, std::size_t window);

}  // namespace rfvla::train
