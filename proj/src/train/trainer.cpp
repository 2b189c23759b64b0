#include "rfvla/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "rfvla/errors.hpp"
#include "rfvla/rng.hpp"
#include "rfvla/sim.hpp"

namespace rfvla::train {
namespace {

constexpr std::uint64_t kSampleSalt = 0x73616d70;  // "samp"

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Losses {
  Var action, reasoning, total;
  bool has_reasoning = false;
};

Losses build_losses(Tape& tape, const model::ForwardOutput& out, const Batch& batch, const TrainConfig& tc) {
  Losses l;
  l.action = action_nll(tape, out, batch.actions);
  bool any = false;
  for (const auto& r : batch.rationales) any = any || !r.empty();
  if (any) {
    l.reasoning = reasoning_nll(tape, out, batch.rationales, {}, tc.reduction);
    l.has_reasoning = true;
  }
  if (tc.reasoning_in_graph && l.has_reasoning)
    l.total = joint_loss(tape, l.action, l.reasoning, tc.lambda_r);
  else
    l.total = l.action;
  return l;
}

StepLosses read_losses(const Tape& tape, const Losses& l) {
  StepLosses s;
  s.action = tape.value(l.action).item();
  s.reasoning = l.has_reasoning ? tape.value(l.reasoning).item() : 0.0;
  s.total = tape.value(l.total).item();
  return s;
}

model::ForwardOptions train_options() {
  model::ForwardOptions o;
  o.rationale_logits = true;
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  need(std::isfinite(lambda_r) && lambda_r >= 0.0, "lambda_r must be a non-negative number");
  need(std::isfinite(lr) && lr >= 0.0, "learning rate must be non-negative");
  need(batch >= 1, "batch size must be at least 1");
  need(max_steps >= 0, "max_steps must be non-negative");
  need(eval_interval >= 1, "eval_interval must be at least 1");
  need(patience >= 1, "patience must be at least 1");
  need(min_improvement >= 0.0, "min_improvement must be non-negative");
  need(clip_norm >= 0.0, "clip_norm must be non-negative");
  need(reasoning_in_graph || lambda_r == 0.0, "the action-only graph requires lambda_r = 0");
}

std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda_r", c.lambda_r},
          {"lr", c.lr},
          {"batch", c.batch},
          {"max_steps", c.max_steps},
          {"eval_interval", c.eval_interval},
          {"patience", c.patience},
          {"min_improvement", c.min_improvement},
          {"optimizer", optimizer_name(c.optimizer)},
          {"clip_norm", c.clip_norm},
          {"reduction", c.reduction == LossReduction::mean ? "mean" : "sum"},
          {"reasoning_in_graph", c.reasoning_in_graph},
          {"seed", c.seed},
          {"record_wall_time", c.record_wall_time}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("lambda_r", c.lambda_r);
  get("lr", c.lr);
  get("batch", c.batch);
  get("max_steps", c.max_steps);
  get("eval_interval", c.eval_interval);
  get("patience", c.patience);
  get("min_improvement", c.min_improvement);
  get("clip_norm", c.clip_norm);
  get("reasoning_in_graph", c.reasoning_in_graph);
  get("seed", c.seed);
  get("record_wall_time", c.record_wall_time);
  if (j.contains("optimizer")) {
    const auto o = j.at("optimizer").get<std::string>();
    if (o == "adam") c.optimizer = OptimizerKind::adam;
    else if (o == "sgd") c.optimizer = OptimizerKind::sgd;
    else throw ConfigError("unknown optimizer '" + o + "'");
  }
  if (j.contains("reduction")) {
    const auto r = j.at("reduction").get<std::string>();
    if (r == "mean") c.reduction = LossReduction::mean;
    else if (r == "sum") c.reduction = LossReduction::sum;
    else throw ConfigError("unknown loss reduction '" + r + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// losses

Var action_nll(Tape& tape, const model::ForwardOutput& out, std::span<const int> action_ids) {
  if (!out.action_logits.valid()) throw DegenerateBatchError("action_nll: forward pass produced no <ACT> rows");
  return tape.nll_loss(out.action_logits, action_ids);
}

Var reasoning_nll(Tape& tape, const model::ForwardOutput& out, std::span<const std::vector<int>> targets,
                  std::span<const std::vector<std::uint8_t>> masks, LossReduction reduction) {
  const std::size_t B = out.layout.size();
  if (targets.size() != B) throw DimensionError("reasoning_nll: one target sequence per sample required");
  if (!masks.empty() && masks.size() != B) throw DimensionError("reasoning_nll: one mask per sample required");
  std::vector<Var> per_sample;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t n = out.layout[b].rationale;
    if (targets[b].size() != n) throw DimensionError("reasoning_nll: targets do not match the rationale span");
    std::vector<std::uint8_t> mask = masks.empty() ? std::vector<std::uint8_t>(n, 1) : masks[b];
    if (mask.size() != n) throw DimensionError("reasoning_nll: mask does not match the rationale span");
    std::size_t count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    if (count == 0) continue;
    if (!out.rationale_logits.valid()) throw ContractError("reasoning_nll: forward pass produced no rationale rows");
    Var rows = tape.slice_rows(out.rationale_logits, out.rationale_offsets[b], n);
    Var l = tape.nll_loss(rows, targets[b], mask);
    if (reduction == LossReduction::sum) l = tape.scale(l, static_cast<double>(count));
    per_sample.push_back(l);
  }
  if (per_sample.empty()) throw DegenerateBatchError("reasoning_nll: every rationale position is masked out");
  if (per_sample.size() == 1) return per_sample[0];
  return tape.mean(tape.concat_rows(per_sample));
}

Var joint_loss(Tape& tape, Var action, Var reasoning, double lambda_r) {
  if (!(lambda_r >= 0.0) || !std::isfinite(lambda_r)) throw ConfigError("lambda_r must be non-negative");
  return tape.add(action, tape.scale(reasoning, lambda_r));
}

// ---------------------------------------------------------------------------
// optimisation

double clip_grad_norm(model::ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.value.requires_grad() && p.value.has_grad())
      for (double g : p.value.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.value.requires_grad() && p.value.has_grad())
        for (double& g : p.value.grad()) g *= s;
  }
  return norm;
}

void Optimizer::step(model::ParamStore& params) {
  ++t_;
  if (kind_ == OptimizerKind::adam && m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto g = p.grad();
    auto x = p.data();
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t k = 0; k < x.size(); ++k) x[k] -= lr_ * g[k];
      continue;
    }
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(x.size(), 0.0);
      v.assign(x.size(), 0.0);
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      x[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// steps

Batch make_batch(std::span<const data::Step* const> steps) {
  Batch b;
  b.images.reserve(steps.size());
  for (const auto* s : steps) {
    b.images.push_back(sim::render(s->scene, s->variant));
    b.actions.push_back(s->action_id);
    b.rationales.push_back(s->rationale_ids);
  }
  for (std::size_t i = 0; i < steps.size(); ++i)
    b.samples.push_back(model::Sample{&b.images[i], steps[i]->instruction_ids, b.rationales[i], true});
  return b;
}

StepLosses evaluate_losses(const model::ParamStore& params, const model::ModelConfig& mc,
                           const data::Vocabulary& vocab, const Batch& batch, const TrainConfig& tc) {
  Tape tape(GradMode::disabled);
  const auto bound = model::bind_values(tape, params);
  const auto out = model::forward(tape, bound, mc, vocab, batch.samples, train_options());
  return read_losses(tape, build_losses(tape, out, batch, tc));
}

StepLosses train_step(model::ParamStore& params, Optimizer& opt, const model::ModelConfig& mc,
                      const data::Vocabulary& vocab, const Batch& batch, const TrainConfig& tc) {
  params.zero_grads();
  Tape tape;
  const auto bound = model::bind(tape, params);
  const auto out = model::forward(tape, bound, mc, vocab, batch.samples, train_options());
  const Losses l = build_losses(tape, out, batch, tc);
  const StepLosses s = read_losses(tape, l);
  if (!std::isfinite(s.total) || !std::isfinite(s.action) || !std::isfinite(s.reasoning))
    throw DivergenceError("non-finite loss: L_action=" + fmt(s.action) + " L_reasoning=" + fmt(s.reasoning) +
                          " L_total=" + fmt(s.total));
  tape.backward(l.total);
  clip_grad_norm(params, tc.clip_norm);
  opt.step(params);
  return s;
}

TrainResult train_loop(const data::Dataset& train, const Validator& validate, const model::ModelConfig& mc,
                       const TrainConfig& tc, const data::Vocabulary& vocab, const TrainOutputs& outputs) {
  mc.validate();
  tc.validate();
  if (train.steps.empty()) throw ConfigError("training split is empty");

  TrainResult r;
  model::ParamStore params = model::init_params(mc, tc.seed);
  Optimizer opt(tc.optimizer, tc.lr);
  SplitMix64 rng(derive_seed(tc.seed, kSampleSalt));
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t batch_size = static_cast<std::size_t>(tc.batch);

  auto wall = [&] {
    if (!tc.record_wall_time) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  auto save = [&](const char* file, const model::ParamStore& ps, int step) {
    if (!outputs.checkpoint_dir) return;
    model::Checkpoint ck{mc, ps, vocab.hash(), {{"step", step}, {"train", to_json(tc)}}};
    model::save_checkpoint(*outputs.checkpoint_dir / file, ck);
  };
  auto emit = [&](MetricsRow row) {
    if (outputs.on_row) outputs.on_row(row);
    r.metrics.push_back(std::move(row));
  };

  // Step 0: losses on a probe batch and validation at initialization.
  {
    const auto idx = data::sample_minibatch(train, batch_size, rng);
    const StepLosses s = evaluate_losses(params, mc, vocab, make_batch(idx), tc);
    MetricsRow row{0, s.action, s.reasoning, s.total, std::nullopt, wall()};
    if (validate) row.val_success = validate(params);
    r.best_val = row.val_success;
    r.best_params = params;
    emit(row);
  }
  save("last.ckpt", params, 0);

  int stale = 0;
  for (int step = 1; step <= tc.max_steps; ++step) {
    const auto idx = data::sample_minibatch(train, batch_size, rng);
    const StepLosses s = train_step(params, opt, mc, vocab, make_batch(idx), tc);
    MetricsRow row{step, s.action, s.reasoning, s.total, std::nullopt, 0.0};
    r.steps = step;
    bool stop = false;
    if (validate && (step % tc.eval_interval == 0 || step == tc.max_steps)) {
      const double v = validate(params);
      row.val_success = v;
      const double best = r.best_val.value_or(-1.0);
      if (v >= best + tc.min_improvement) stale = 0;
      else ++stale;
      if (v > best) {
        r.best_val = v;
        r.best_params = params;
        save("best.ckpt", params, step);
      }
      save("last.ckpt", params, step);
      stop = stale >= tc.patience;
    }
    row.wall_ms = wall();
    emit(row);
    if (stop) {
      r.stopped_early = true;
      break;
    }
  }
  r.final_params = params;
  if (!validate) r.best_params = params;
  save("final.ckpt", params, r.steps);
  if (outputs.checkpoint_dir && !std::filesystem::exists(*outputs.checkpoint_dir / "best.ckpt"))
    save("best.ckpt", r.best_params, 0);
  return r;
}

// ---------------------------------------------------------------------------
// metrics

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "step,L_action,L_reasoning,L_total,val_success,wall_ms\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + fmt(r.l_action) + "," + fmt(r.l_reasoning) + "," + fmt(r.l_total) + "," +
           (r.val_success ? fmt(*r.val_success) : "") + "," + fmt(r.wall_ms) + "\n";
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << metrics_csv(rows);
  if (!out) throw IoError("write failed for " + path.string());
}

StepLosses tail_losses(const std::vector<MetricsRow>& rows, std::size_t window) {
  StepLosses s;
  std::size_t n = 0;
  for (auto it = rows.rbegin(); it != rows.rend() && n < window; ++it) {
    if (it->step == 0 && rows.size() > 1) break;
    s.action += it->l_action;
    s.reasoning += it->l_reasoning;
    s.total += it->l_total;
    ++n;
  }
  if (n == 0) throw MetricError("no metrics rows to summarize");
  s.action /= static_cast<double>(n);
  s.reasoning /= static_cast<double>(n);
  s.total /= static_cast<double>(n);
  return s;
}

// ---------------------------------------------------------------------------
// sweeps

std::string_view axis_name(SweepAxis a) { return a == SweepAxis::lambda_r ? "lambda_r" : "frozen_blocks"; }

std::uint64_t sweep_seed(std::uint64_t base, double value) {
  if (value == 0.0) value = 0.0;  // folds -0
  return derive_seed(base, std::bit_cast<std::uint64_t>(value));
}

std::vector<double> dedup_values(const std::vector<double>& values,
                                 const std::function<void(const std::string&)>& warn) {
  std::vector<double> out;
  for (double v : values) {
    if (std::find(out.begin(), out.end(), v) != out.end()) {
      if (warn) warn("duplicate sweep value " + fmt(v) + " ignored");
      continue;
    }
    out.push_back(v);
  }
  return out;
}

std::vector<SweepRow> sweep(SweepAxis axis, const std::vector<double>& values, const data::Dataset& train,
                            const Validator& validate, const model::ModelConfig& mc, const TrainConfig& tc,
                            const data::Vocabulary& vocab, const SweepOptions& options) {
  const auto vals = dedup_values(values, options.warn);
  if (vals.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<SweepRow> rows(vals.size());
  std::mutex callback_mutex;

  auto run = [&](std::size_t i) {
    SweepRow& row = rows[i];
    row.value = vals[i];
    model::ModelConfig m = mc;
    TrainConfig t = tc;
    t.seed = sweep_seed(tc.seed, vals[i]);
    try {
      if (axis == SweepAxis::lambda_r) {
        t.lambda_r = vals[i];
      } else {
        if (vals[i] != std::floor(vals[i])) throw ConfigError("frozen block count must be an integer");
        m.frozen_blocks = static_cast<int>(vals[i]);
        if (m.frozen_blocks == m.layers) row.note = "head-only";
      }
      const TrainResult res = train_loop(train, validate, m, t, vocab);
      const StepLosses fin = tail_losses(res.metrics, 100);
      row.val_success = res.best_val;
      row.final_l_action = fin.action;
      row.final_l_reasoning = fin.reasoning;
      if (options.on_run) {
        std::lock_guard lock(callback_mutex);
        options.on_run(vals[i], res);
      }
    } catch (const Error& e) {
      row.error = e.what();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(1, options.jobs)), vals.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < vals.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < vals.size(); i = next++) run(i);
      });
    for (auto& th : pool) th.join();
  }
  return rows;
}

}  // namespace rfvla::train
