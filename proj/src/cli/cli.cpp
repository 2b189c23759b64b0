#include "rfvla/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "rfvla/dataset.hpp"
#include "rfvla/errors.hpp"
#include "rfvla/hash.hpp"
#include "rfvla/teacher.hpp"

namespace rfvla::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const data::Vocabulary& vocab() { return data::Vocabulary::standard(); }

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("empty item in list '" + text + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

std::vector<sim::Task> parse_tasks(const std::string& text) {
  std::vector<sim::Task> tasks;
  for (const auto& name : split_list(text)) {
    const auto t = sim::parse_task(name);
    if (!t) throw ConfigError("unknown task '" + name + "'");
    tasks.push_back(*t);
  }
  return tasks;
}

std::vector<sim::VariantMode> parse_modes(const std::string& text) {
  std::vector<sim::VariantMode> modes;
  for (const auto& name : split_list(text)) {
    const auto m = sim::parse_mode(name);
    if (!m) throw ConfigError("unknown variant mode '" + name + "'");
    modes.push_back(*m);
  }
  return modes;
}

json tasks_json(const std::vector<sim::Task>& tasks) {
  json a = json::array();
  for (const auto& t : tasks) a.push_back(t.name());
  return a;
}

json modes_json(const std::vector<sim::VariantMode>& modes) {
  json a = json::array();
  for (auto m : modes) a.push_back(sim::mode_name(m));
  return a;
}

std::string join_names(const json& a) {
  std::string s;
  for (const auto& x : a) s += (s.empty() ? "" : ",") + x.get<std::string>();
  return s;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// command pieces

struct Context {
  RunConfig cfg;
  std::ostream& out;
};

data::Dataset load_dataset(const RunConfig& c) {
  auto loaded = data::load(c.data.in, c.data.name);
  if (!(loaded.vocab == vocab()))
    throw CompatibilityError("dataset vocabulary differs from the built-in vocabulary (hash " + loaded.vocab.hash() + ")");
  return std::move(loaded.dataset);
}

// Training data: a saved dataset when --data is given, otherwise generated
// and annotated by the oracle teacher from the data section.
data::Dataset training_data(const RunConfig& c, std::ostream& out) {
  if (!c.data.in.empty()) return load_dataset(c);
  data::GenerateOptions g;
  g.tasks = c.data.tasks;
  g.modes = c.data.modes;
  g.episodes_per_task = c.data.episodes_per_task;
  g.seed = c.data.seed;
  data::Dataset d = data::augment(data::generate_demos(g, vocab()), teacher::OracleTeacher{}, vocab());
  out << "generated " << d.size() << " annotated steps over " << d.num_episodes() << " episodes\n";
  return d;
}

std::vector<eval::EpisodeSpec> validation_episodes(const data::Dataset& val) {
  std::vector<eval::EpisodeSpec> eps;
  for (const auto& s : val.steps)
    if (s.step == 0) eps.push_back({s.task, s.variant, s.scene, s.episode_seed});
  return eps;
}

train::Validator make_validator(const std::vector<eval::EpisodeSpec>& episodes, const RunConfig& c,
                                const model::ModelConfig& mc) {
  if (episodes.empty()) return nullptr;
  return [&episodes, &c, mc](const model::ParamStore& p) {
    const eval::ModelPolicy policy(p, mc, vocab());
    return eval::success_rate(policy, episodes, c.eval.max_steps, c.jobs);
  };
}

std::function<void(const train::MetricsRow&)> progress(std::ostream& out, int every) {
  return [&out, every](const train::MetricsRow& r) {
    if (r.step % every != 0 && !r.val_success) return;
    out << "step " << r.step << "  L_action " << short_num(r.l_action) << "  L_reasoning " << short_num(r.l_reasoning);
    if (r.val_success) out << "  val_success " << short_num(*r.val_success);
    out << "\n" << std::flush;
  };
}

void write_suite(const fs::path& reports, const eval::SuiteResult& suite) {
  write_text(reports / "success.csv", eval::success_csv(suite.table));
  eval::write_episode_logs(reports / "episodes.jsonl", suite.logs);
}

void print_table(std::ostream& out, const eval::SuccessTable& t) {
  out << eval::success_csv(t);
}

// ---------------------------------------------------------------------------
// commands

int cmd_gen_data(Context& ctx) {
  const auto& c = ctx.cfg;
  data::GenerateOptions g;
  g.tasks = c.data.tasks;
  g.modes = c.data.modes;
  g.episodes_per_task = c.data.episodes_per_task;
  g.seed = c.data.seed;
  const data::Dataset d = data::generate_demos(g, vocab());
  data::save(d, vocab(), c.out, c.data.name);
  ctx.out << "wrote " << d.size() << " steps over " << d.num_episodes() << " episodes to " << c.out.string() << "\n";
  return kOk;
}

int cmd_annotate(Context& ctx) {
  const auto& c = ctx.cfg;
  const data::Dataset raw = load_dataset(c);
  std::unique_ptr<teacher::Teacher> t;
  if (c.teacher.mode == "oracle") {
    t = std::make_unique<teacher::OracleTeacher>();
  } else {
    teacher::RemoteConfig rc = teacher::RemoteConfig::from_env();
    if (!c.teacher.endpoint.empty()) rc.endpoint = c.teacher.endpoint;
    if (rc.endpoint.empty()) throw ConfigError("remote teacher needs --endpoint or REFINEVLA_TEACHER_ENDPOINT");
    rc.retries = c.teacher.retries;
    rc.timeout = std::chrono::milliseconds(c.teacher.timeout_ms);
    rc.concurrency = c.teacher.concurrency;
    t = std::make_unique<teacher::RemoteTeacher>(rc, vocab());
  }
  try {
    const data::Dataset d = data::augment(raw, *t, vocab());
    data::save(d, vocab(), c.out, c.data.name);
    ctx.out << "annotated " << d.size() << " steps\n";
    return kOk;
  } catch (const PartialOutputError& e) {
    json failed = json::array();
    for (const auto& f : e.failed()) failed.push_back({{"index", f.index}, {"reason", f.reason}});
    write_text(c.out / "failures.json", json{{"failed", failed}, {"num_records", raw.size()}}.dump(2) + "\n");
    throw;
  }
}

int cmd_train(Context& ctx) {
  const auto& c = ctx.cfg;
  const data::Dataset all = training_data(c, ctx.out);
  const data::Split split = data::split_by_episode(all, c.data.val_fraction, c.data.seed, vocab());
  const auto val = validation_episodes(split.val);
  ctx.out << "train " << split.train.size() << " steps, validation " << val.size() << " episodes\n";

  std::vector<train::MetricsRow> rows;
  const auto show = progress(ctx.out, 50);
  train::TrainOutputs outputs{c.out / "checkpoints", [&](const train::MetricsRow& r) {
                                rows.push_back(r);
                                show(r);
                              }};
  train::TrainResult res;
  try {
    res = train::train_loop(split.train, make_validator(val, c, c.model), c.model, c.train, vocab(), outputs);
  } catch (const DivergenceError&) {
    train::write_metrics_csv(c.out / "metrics.csv", rows);
    throw;
  }
  train::write_metrics_csv(c.out / "metrics.csv", res.metrics);

  eval::EvalConfig ec = c.eval;
  ec.jobs = c.jobs;
  const eval::ModelPolicy policy(res.best_params, c.model, vocab());
  const auto suite = eval::eval_suite(policy, ec);
  write_suite(c.out / "reports", suite);

  const auto& first = res.metrics.front();
  const auto tail = train::tail_losses(res.metrics, 100);
  json summary{{"steps", res.steps},
               {"stopped_early", res.stopped_early},
               {"best_val_success", res.best_val ? json(*res.best_val) : json(nullptr)},
               {"initial_L_action", first.l_action},
               {"initial_L_reasoning", first.l_reasoning},
               {"final_L_action", tail.action},
               {"final_L_reasoning", tail.reasoning},
               {"test_success", suite.table.average_success()}};
  write_text(c.out / "reports" / "summary.json", summary.dump(2) + "\n");
  print_table(ctx.out, suite.table);
  return kOk;
}

int cmd_sweep(Context& ctx, train::SweepAxis axis) {
  const auto& c = ctx.cfg;
  const data::Dataset all = training_data(c, ctx.out);
  const data::Split split = data::split_by_episode(all, c.data.val_fraction, c.data.seed, vocab());
  const auto val = validation_episodes(split.val);
  const std::string axis_name(train::axis_name(axis));

  train::SweepOptions opts;
  opts.jobs = c.jobs;
  opts.warn = [&](const std::string& w) { ctx.out << "warning: " << w << "\n"; };
  opts.on_run = [&](double value, const train::TrainResult& r) {
    const fs::path run = c.out / "runs" / (axis_name + "_" + short_num(value));
    train::write_metrics_csv(run / "metrics.csv", r.metrics);
    ctx.out << axis_name << "=" << short_num(value) << " done after " << r.steps << " steps\n" << std::flush;
  };
  // Validation runs inside each sweep run; episode-level parallelism would
  // compete with run-level parallelism, so it stays sequential here.
  RunConfig seq = c;
  seq.jobs = 1;
  const auto rows = train::sweep(axis, c.values, split.train, make_validator(val, seq, c.model), c.model, c.train,
                                 vocab(), opts);

  eval::CurveReport curve;
  curve.axis = axis_name;
  std::string csv = axis_name + ",val_success,final_L_action,final_L_reasoning,note,error\n";
  auto cell = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& r : rows) {
    curve.points.push_back({r.value, r.val_success, r.final_l_action, r.final_l_reasoning, r.note, r.error});
    std::string err = r.error;
    for (char& ch : err)
      if (ch == ',' || ch == '\n') ch = ' ';
    csv += fmt(r.value) + "," + cell(r.val_success) + "," + cell(r.final_l_action) + "," +
           cell(r.final_l_reasoning) + "," + r.note + "," + err + "\n";
  }
  write_text(c.out / "metrics.csv", csv);
  const fs::path svg = c.out / "reports" / ("sweep_" + axis_name + ".svg");
  if (curve.points.size() >= 2) eval::emit_curves(curve, svg);
  else write_text(svg.parent_path() / ("sweep_" + axis_name + ".json"), eval::to_json(curve).dump(2) + "\n");
  ctx.out << csv;
  for (const auto& r : rows)
    if (!r.error.empty()) return kFailure;
  return kOk;
}

int cmd_eval(Context& ctx) {
  const auto& c = ctx.cfg;
  eval::EvalConfig ec = c.eval;
  ec.jobs = c.jobs;
  std::unique_ptr<eval::Policy> policy;
  if (c.policy == "expert") policy = std::make_unique<eval::ExpertPolicy>();
  else if (c.policy == "random") policy = std::make_unique<eval::RandomPolicy>();
  else policy = std::make_unique<eval::CheckpointPolicy>(c.checkpoint, vocab());
  const auto suite = eval::eval_suite(*policy, ec);
  write_suite(c.out / "reports", suite);
  write_text(c.out / "metrics.csv", eval::success_csv(suite.table));
  print_table(ctx.out, suite.table);
  return kOk;
}

int cmd_viz_attn(Context& ctx) {
  const auto& c = ctx.cfg;
  const auto before = model::load_checkpoint(c.before, vocab().hash());
  const auto after = model::load_checkpoint(c.after, vocab().hash());
  eval::EvalConfig ec = c.eval;
  ec.jobs = c.jobs;
  const auto report = eval::compare_alignment(before, after, vocab(), ec);
  write_text(c.out / "reports" / "alignment.json", eval::to_json(report).dump(2) + "\n");

  std::string csv = "seed,task,scene_hash,before,after,delta\n";
  for (const auto& p : report.pairs)
    csv += std::to_string(p.seed) + "," + p.task + "," + hex64(p.scene_hash) + "," + fmt(p.before) + "," +
           fmt(p.after) + "," + fmt(p.delta) + "\n";
  write_text(c.out / "metrics.csv", csv);

  // Heatmaps of the layer/head-averaged action attention for the first episodes.
  int drawn = 0;
  for (auto m : ec.modes)
    for (std::size_t t = 0; t < ec.tasks.size() && drawn < c.heatmaps; ++t)
      for (int e = 0; e < ec.episodes_per_task && drawn < c.heatmaps; ++e, ++drawn) {
        const auto spec = eval::make_episode(ec.tasks[t], m, eval::eval_episode_seed(ec.seed, m, t, e));
        const Tensor image = sim::render(spec.initial, spec.variant);
        for (const auto* which : {&before, &after}) {
          const auto attn = eval::action_attention(which->params, which->config, vocab(), spec.initial, spec.variant,
                                                   spec.task);
          std::vector<double> row(static_cast<std::size_t>(which->config.num_patches()), 0.0);
          std::size_t n = 0;
          for (const auto& layer : attn)
            for (const Tensor& a : layer) {
              for (std::size_t k = 0; k < row.size(); ++k) row[k] += a.at(0, k);
              ++n;
            }
          for (double& v : row) v /= static_cast<double>(n);
          const std::string stem = ec.tasks[t].name() + "_" + std::to_string(e) + (which == &before ? "_before" : "_after");
          eval::emit_heatmap(image, row, which->config.grid_w, which->config.grid_h,
                             c.out / "heatmaps" / (stem + ".ppm"));
        }
      }
  ctx.out << "alignment before " << short_num(report.mean_before) << " after " << short_num(report.mean_after)
          << " delta " << short_num(report.mean_delta) << " (" << report.hash_matches << "/" << report.pairs.size()
          << " scene hashes matched)\n";
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------------------
// config

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> v;
  for (const auto& item : split_list(text)) {
    try {
      std::size_t used = 0;
      const double x = std::stod(item, &used);
      if (used != item.size() || !std::isfinite(x)) throw std::invalid_argument(item);
      v.push_back(x);
    } catch (const std::logic_error&) {
      throw ConfigError("not a number: '" + item + "'");
    }
  }
  return v;
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(!out.empty(), "--out is required");
  need(data.episodes_per_task >= 1, "episodes per task must be at least 1");
  need(!data.tasks.empty() && !data.modes.empty(), "task and variant-mode lists must be non-empty");
  need(data.val_fraction > 0.0 && data.val_fraction < 1.0, "validation fraction must lie in (0, 1)");
  need(teacher.mode == "oracle" || teacher.mode == "remote", "teacher must be oracle or remote");
  need(teacher.retries >= 1 && teacher.timeout_ms >= 1 && teacher.concurrency >= 1, "teacher limits must be positive");
  need(jobs >= 1, "--jobs must be at least 1");
  need(heatmaps >= 0, "heatmap count must be non-negative");
  need(policy == "model" || policy == "expert" || policy == "random", "policy must be model, expert or random");
  model.validate();
  train.validate();
  eval.validate();
  if (command == "annotate") need(!data.in.empty(), "annotate needs --in");
  if (command == "eval" && policy == "model") need(!checkpoint.empty(), "eval needs --checkpoint");
  if (command == "viz-attn") need(!before.empty() && !after.empty(), "viz-attn needs --before and --after");
  if (command == "sweep-lambda" || command == "sweep-freeze") need(!values.empty(), "sweeps need --values");
}

json to_json(const RunConfig& c) {
  json ev = eval::to_json(c.eval);
  return {{"command", c.command},
          {"out", c.out.string()},
          {"data",
           {{"in", c.data.in.string()},
            {"name", c.data.name},
            {"episodes_per_task", c.data.episodes_per_task},
            {"tasks", tasks_json(c.data.tasks)},
            {"modes", modes_json(c.data.modes)},
            {"seed", c.data.seed},
            {"val_fraction", c.data.val_fraction}}},
          {"teacher",
           {{"mode", c.teacher.mode},
            {"endpoint", c.teacher.endpoint},
            {"retries", c.teacher.retries},
            {"timeout_ms", c.teacher.timeout_ms},
            {"concurrency", c.teacher.concurrency}}},
          {"model", model::to_json(c.model)},
          {"train", train::to_json(c.train)},
          {"eval", ev},
          {"values", c.values},
          {"jobs", c.jobs},
          {"policy", c.policy},
          {"checkpoint", c.checkpoint.string()},
          {"before", c.before.string()},
          {"after", c.after.string()},
          {"heatmaps", c.heatmaps}};
}

RunConfig merge_json(RunConfig base, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  json merged = to_json(base);
  merged.merge_patch(j);
  try {
    RunConfig c;
    c.command = merged.at("command").get<std::string>();
    c.out = merged.at("out").get<std::string>();
    const json& d = merged.at("data");
    c.data.in = d.at("in").get<std::string>();
    c.data.name = d.at("name").get<std::string>();
    c.data.episodes_per_task = d.at("episodes_per_task").get<int>();
    c.data.tasks = parse_tasks(join_names(d.at("tasks")));
    c.data.modes = parse_modes(join_names(d.at("modes")));
    c.data.seed = d.at("seed").get<std::uint64_t>();
    c.data.val_fraction = d.at("val_fraction").get<double>();
    const json& t = merged.at("teacher");
    c.teacher.mode = t.at("mode").get<std::string>();
    c.teacher.endpoint = t.at("endpoint").get<std::string>();
    c.teacher.retries = t.at("retries").get<int>();
    c.teacher.timeout_ms = t.at("timeout_ms").get<int>();
    c.teacher.concurrency = t.at("concurrency").get<int>();
    c.model = model::model_config_from_json(merged.at("model"));
    c.train = train::train_config_from_json(merged.at("train"));
    c.eval = eval::eval_config_from_json(merged.at("eval"));
    c.values = merged.at("values").get<std::vector<double>>();
    c.jobs = merged.at("jobs").get<int>();
    c.policy = merged.at("policy").get<std::string>();
    c.checkpoint = merged.at("checkpoint").get<std::string>();
    c.before = merged.at("before").get<std::string>();
    c.after = merged.at("after").get<std::string>();
    c.heatmaps = merged.at("heatmaps").get<int>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// entry point

namespace {

// Flag values are collected as optionals and applied over the config file.
struct Flags {
  std::optional<std::string> config, out, in, name, tasks, modes, teacher, endpoint, values, policy, checkpoint,
      before, after, optimizer, eval_modes;
  std::optional<int> episodes, layers, heads, dim, mlp_ratio, frozen, batch, max_steps, eval_interval, patience,
      eval_episodes, max_episode_steps, jobs, retries, timeout_ms, heatmaps;
  std::optional<double> lambda_r, lr, val_fraction, clip_norm, min_improvement;
  std::optional<std::uint64_t> seed, eval_seed;
  bool freeze_embeddings = false, action_only = false, wall_time = false;
};

void apply(RunConfig& c, const Flags& f) {
  if (f.out) c.out = *f.out;
  if (f.in) c.data.in = *f.in;
  if (f.name) c.data.name = *f.name;
  if (f.tasks) c.data.tasks = parse_tasks(*f.tasks);
  if (f.modes) c.data.modes = parse_modes(*f.modes);
  if (f.episodes) c.data.episodes_per_task = *f.episodes;
  if (f.val_fraction) c.data.val_fraction = *f.val_fraction;
  if (f.seed) {
    c.data.seed = *f.seed;
    c.train.seed = *f.seed;
  }
  if (f.teacher) c.teacher.mode = *f.teacher;
  if (f.endpoint) c.teacher.endpoint = *f.endpoint;
  if (f.retries) c.teacher.retries = *f.retries;
  if (f.timeout_ms) c.teacher.timeout_ms = *f.timeout_ms;
  if (f.layers) c.model.layers = *f.layers;
  if (f.heads) c.model.heads = *f.heads;
  if (f.dim) c.model.dim = *f.dim;
  if (f.mlp_ratio) c.model.mlp_ratio = *f.mlp_ratio;
  if (f.frozen) c.model.frozen_blocks = *f.frozen;
  if (f.freeze_embeddings) c.model.freeze_embeddings = true;
  if (f.lambda_r) c.train.lambda_r = *f.lambda_r;
  if (f.lr) c.train.lr = *f.lr;
  if (f.batch) c.train.batch = *f.batch;
  if (f.max_steps) c.train.max_steps = *f.max_steps;
  if (f.eval_interval) c.train.eval_interval = *f.eval_interval;
  if (f.patience) c.train.patience = *f.patience;
  if (f.min_improvement) c.train.min_improvement = *f.min_improvement;
  if (f.clip_norm) c.train.clip_norm = *f.clip_norm;
  if (f.optimizer) {
    json j = train::to_json(c.train);
    j["optimizer"] = *f.optimizer;
    c.train = train::train_config_from_json(j);
  }
  if (f.action_only) c.train.reasoning_in_graph = false;
  if (f.wall_time) c.train.record_wall_time = true;
  if (f.eval_episodes) c.eval.episodes_per_task = *f.eval_episodes;
  if (f.eval_modes) c.eval.modes = parse_modes(*f.eval_modes);
  if (f.max_episode_steps) c.eval.max_steps = *f.max_episode_steps;
  if (f.eval_seed) c.eval.seed = *f.eval_seed;
  if (f.values) c.values = parse_values(*f.values);
  if (f.jobs) c.jobs = *f.jobs;
  if (f.policy) c.policy = *f.policy;
  if (f.checkpoint) c.checkpoint = *f.checkpoint;
  if (f.before) c.before = *f.before;
  if (f.after) c.after = *f.after;
  if (f.heatmaps) c.heatmaps = *f.heatmaps;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reasoning-aware VLA fine-tuning on a tabletop gridworld", "refinevla"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "JSON config; flags override it");
    s->add_option("--out", f.out, "output directory");
    s->add_option("--seed", f.seed, "data and training seed");
    s->add_option("--jobs", f.jobs, "parallel episodes or sweep runs");
  };
  auto data_flags = [&](CLI::App* s) {
    s->add_option("--tasks", f.tasks, "comma-separated task names");
    s->add_option("--episodes", f.episodes, "episodes per task");
    s->add_option("--variant-mode", f.modes, "visual_matching and/or variant_aggregation");
    s->add_option("--name", f.name, "dataset file stem");
  };
  auto train_flags = [&](CLI::App* s) {
    s->add_option("--data", f.in, "annotated dataset directory (generated when omitted)");
    s->add_option("--val-fraction", f.val_fraction);
    s->add_option("--layers", f.layers);
    s->add_option("--heads", f.heads);
    s->add_option("--dim", f.dim);
    s->add_option("--mlp-ratio", f.mlp_ratio);
    s->add_option("--frozen-blocks", f.frozen);
    s->add_flag("--freeze-embeddings", f.freeze_embeddings);
    s->add_option("--lambda-r", f.lambda_r);
    s->add_option("--lr", f.lr);
    s->add_option("--batch", f.batch);
    s->add_option("--max-steps", f.max_steps);
    s->add_option("--eval-interval", f.eval_interval);
    s->add_option("--patience", f.patience);
    s->add_option("--min-improvement", f.min_improvement);
    s->add_option("--clip-norm", f.clip_norm);
    s->add_option("--optimizer", f.optimizer, "adam or sgd");
    s->add_flag("--action-only", f.action_only, "drop the reasoning loss from the graph (needs --lambda-r 0)");
    s->add_flag("--record-wall-time", f.wall_time);
  };
  auto eval_flags = [&](CLI::App* s) {
    s->add_option("--eval-episodes", f.eval_episodes, "evaluation episodes per task");
    s->add_option("--eval-mode", f.eval_modes, "evaluation variant modes");
    s->add_option("--max-episode-steps", f.max_episode_steps);
    s->add_option("--eval-seed", f.eval_seed);
  };

  auto* gen = app.add_subcommand("gen-data", "generate expert demonstrations");
  common(gen);
  data_flags(gen);
  auto* ann = app.add_subcommand("annotate", "add teacher rationales to a dataset");
  common(ann);
  ann->add_option("--in", f.in, "input dataset directory");
  ann->add_option("--name", f.name, "dataset file stem");
  ann->add_option("--teacher", f.teacher, "oracle or remote");
  ann->add_option("--endpoint", f.endpoint, "remote teacher URL");
  ann->add_option("--retries", f.retries, "remote attempts per episode");
  ann->add_option("--timeout-ms", f.timeout_ms, "remote deadline per episode");
  auto* tr = app.add_subcommand("train", "train a policy");
  common(tr);
  data_flags(tr);
  train_flags(tr);
  eval_flags(tr);
  auto* sl = app.add_subcommand("sweep-lambda", "sweep the reasoning-loss weight");
  auto* sf = app.add_subcommand("sweep-freeze", "sweep the number of frozen blocks");
  for (auto* s : {sl, sf}) {
    common(s);
    data_flags(s);
    train_flags(s);
    eval_flags(s);
    s->add_option("--values", f.values, "comma-separated values");
  }
  auto* ev = app.add_subcommand("eval", "closed-loop evaluation");
  common(ev);
  eval_flags(ev);
  ev->add_option("--checkpoint", f.checkpoint);
  ev->add_option("--policy", f.policy, "model, expert or random");
  ev->add_option("--tasks", f.tasks, "comma-separated task names");
  auto* viz = app.add_subcommand("viz-attn", "compare attention alignment of two checkpoints");
  common(viz);
  eval_flags(viz);
  viz->add_option("--before", f.before);
  viz->add_option("--after", f.after);
  viz->add_option("--heatmaps", f.heatmaps, "episodes drawn as heatmaps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    RunConfig cfg;
    cfg.model.vocab_size = static_cast<int>(vocab().size());
    if (f.config) cfg = merge_json(cfg, read_json_file(*f.config));
    cfg.command = sub->get_name();
    apply(cfg, f);
    if (sub == ev && f.tasks) cfg.eval.tasks = cfg.data.tasks;
    if (cfg.model.vocab_size != static_cast<int>(vocab().size()))
      throw ConfigError("model vocab_size must be " + std::to_string(vocab().size()));
    cfg.validate();
    write_text(cfg.out / "config.json", to_json(cfg).dump(2) + "\n");

    Context ctx{cfg, out};
    const std::string& cmd = cfg.command;
    if (cmd == "gen-data") return cmd_gen_data(ctx);
    if (cmd == "annotate") return cmd_annotate(ctx);
    if (cmd == "train") return cmd_train(ctx);
    if (cmd == "sweep-lambda") return cmd_sweep(ctx, train::SweepAxis::lambda_r);
    if (cmd == "sweep-freeze") return cmd_sweep(ctx, train::SweepAxis::frozen_blocks);
    if (cmd == "eval") return cmd_eval(ctx);
    return cmd_viz_attn(ctx);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CompatibilityError& e) {
    err << "compatibility error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const LoadError& e) {
    err << "load error: " << e.what() << "\n";
    return kIo;
  } catch (const PartialOutputError& e) {
    err << "partial failure: " << e.what() << "\n";
    return kPartial;
  } catch (const RemoteError& e) {
    err << "remote error: " << e.what() << "\n";
    return kPartial;
  } catch (const TransportError& e) {
    err << "transport error: " << e.what() << "\n";
    return kPartial;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace rfvla::cli
