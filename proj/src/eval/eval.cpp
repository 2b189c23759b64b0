#include "rfvla/eval.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "rfvla/errors.hpp"
#include "rfvla/hash.hpp"
#include "rfvla/rng.hpp"

namespace rfvla::eval {
namespace {

class ExpertAgent final : public Agent {
 public:
  explicit ExpertAgent(sim::Task task) : task_(task) {}
  sim::Action act(const sim::Scene& scene) override { return sim::expert_action(scene, task_); }

 private:
  sim::Task task_;
};

class RandomAgent final : public Agent {
 public:
  explicit RandomAgent(std::uint64_t seed) : rng_(seed) {}
  sim::Action act(const sim::Scene&) override {
    return sim::Action::from_index(static_cast<int>(rng_.below(sim::kNumActions)));
  }

 private:
  SplitMix64 rng_;
};

class ModelAgent final : public Agent {
 public:
  ModelAgent(const model::ParamStore& params, const model::ModelConfig& config, const data::Vocabulary& vocab,
             const sim::Scene& initial, const sim::VariantSpec& variant, const sim::Task& task)
      : params_(params), config_(config), vocab_(vocab), variant_(variant) {
    instruction_ = vocab.encode(task.instruction_words());
    const Tensor image = sim::render(initial, variant);
    rationale_ = model::generate_rationale(params, config, vocab, image, instruction_, config.max_rationale);
  }
  sim::Action act(const sim::Scene& scene) override {
    const Tensor image = sim::render(scene, variant_);
    return vocab_.action_of(model::predict_action(params_, config_, vocab_, image, instruction_, rationale_));
  }
  std::string rationale() const override { return vocab_.detokenize(rationale_); }

 private:
  const model::ParamStore& params_;
  const model::ModelConfig& config_;
  const data::Vocabulary& vocab_;
  sim::VariantSpec variant_;
  std::vector<int> instruction_;
  std::vector<int> rationale_;
};

template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string label(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

sim::VariantMode mode_from(const std::string& name) {
  const auto m = sim::parse_mode(name);
  if (!m) throw ConfigError("unknown variant mode '" + name + "'");
  return *m;
}

std::filesystem::path sidecar(const std::filesystem::path& p) {
  std::filesystem::path s = p;
  s.replace_extension(".json");
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
std::optional<double> opt_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

// ---------------------------------------------------------------------------
// policies

std::unique_ptr<Agent> ExpertPolicy::start(const sim::Scene&, const sim::VariantSpec&, const sim::Task& task,
                                           std::uint64_t) const {
  return std::make_unique<ExpertAgent>(task);
}

std::unique_ptr<Agent> RandomPolicy::start(const sim::Scene&, const sim::VariantSpec&, const sim::Task&,
                                           std::uint64_t episode_seed) const {
  return std::make_unique<RandomAgent>(derive_seed(episode_seed, 0x72616e64));
}

std::unique_ptr<Agent> ModelPolicy::start(const sim::Scene& initial, const sim::VariantSpec& variant,
                                          const sim::Task& task, std::uint64_t) const {
  return std::make_unique<ModelAgent>(*params_, config_, *vocab_, initial, variant, task);
}

CheckpointPolicy::CheckpointPolicy(const std::filesystem::path& path, const data::Vocabulary& vocab)
    : ck_(model::load_checkpoint(path, vocab.hash())), vocab_(&vocab) {}

std::unique_ptr<Agent> CheckpointPolicy::start(const sim::Scene& initial, const sim::VariantSpec& variant,
                                               const sim::Task& task, std::uint64_t) const {
  return std::make_unique<ModelAgent>(ck_.params, ck_.config, *vocab_, initial, variant, task);
}

// ---------------------------------------------------------------------------
// episodes

sim::EpisodeResult run_episode(const Policy& policy, const sim::Task& task, const sim::Scene& initial,
                               const sim::VariantSpec& variant, std::uint64_t episode_seed, int max_steps,
                               std::string* rationale) {
  if (max_steps < 1) throw ConfigError("max steps per episode must be at least 1");
  auto agent = policy.start(initial, variant, task, episode_seed);
  if (rationale) *rationale = agent->rationale();
  sim::EpisodeResult r;
  sim::Scene scene = initial;
  while (r.steps_used < max_steps && !r.success) {
    auto s = sim::step(scene, agent->act(scene));
    scene = std::move(s.scene);
    ++r.steps_used;
    r.grasped = r.grasped || s.grasped_now;
    r.success = s.success_now;
  }
  return r;
}

EpisodeSpec make_episode(const sim::Task& task, sim::VariantMode mode, std::uint64_t seed) {
  EpisodeSpec e;
  e.task = task;
  e.seed = seed;
  e.variant = sim::sample_variant(mode, derive_seed(seed, 1));
  e.initial = sim::reset(task, e.variant, seed);
  return e;
}

sim::EpisodeResult rollout(const Policy& policy, const sim::Task& task, sim::VariantMode mode, std::uint64_t seed,
                           int max_steps) {
  const EpisodeSpec e = make_episode(task, mode, seed);
  return run_episode(policy, task, e.initial, e.variant, seed, max_steps);
}

std::uint64_t eval_episode_seed(std::uint64_t base, sim::VariantMode mode, std::size_t task_index, int episode) {
  const std::uint64_t m = derive_seed(base, static_cast<std::uint64_t>(mode) + 1);
  return derive_seed(derive_seed(m, task_index + 1), static_cast<std::uint64_t>(episode));
}

void EvalConfig::validate() const {
  if (episodes_per_task < 1) throw ConfigError("episodes per task must be at least 1");
  if (modes.empty()) throw ConfigError("no variant modes to evaluate");
  if (tasks.empty()) throw ConfigError("no tasks to evaluate");
  if (max_steps < 1) throw ConfigError("max steps per episode must be at least 1");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
}

nlohmann::json to_json(const EvalConfig& c) {
  nlohmann::json modes = nlohmann::json::array(), tasks = nlohmann::json::array();
  for (auto m : c.modes) modes.push_back(sim::mode_name(m));
  for (const auto& t : c.tasks) tasks.push_back(t.name());
  return {{"episodes_per_task", c.episodes_per_task}, {"modes", modes}, {"tasks", tasks},
          {"max_steps", c.max_steps},                 {"seed", c.seed}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  if (j.contains("episodes_per_task")) c.episodes_per_task = j.at("episodes_per_task").get<int>();
  if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("modes")) {
    c.modes.clear();
    for (const auto& m : j.at("modes")) c.modes.push_back(mode_from(m.get<std::string>()));
  }
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const auto& t : j.at("tasks")) {
      const auto task = sim::parse_task(t.get<std::string>());
      if (!task) throw ConfigError("unknown task '" + t.get<std::string>() + "'");
      c.tasks.push_back(*task);
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// logs and tables

nlohmann::json to_json(const EpisodeLog& log) {
  return {{"task", log.task},       {"mode", sim::mode_name(log.mode)},
          {"episode", log.episode}, {"seed", log.seed},
          {"scene_hash", hex64(log.scene_hash)},
          {"grasped", log.grasped}, {"success", log.success},
          {"steps", log.steps},     {"rationale", log.rationale}};
}

EpisodeLog episode_log_from_json(const nlohmann::json& j) {
  EpisodeLog l;
  l.task = j.at("task").get<std::string>();
  l.mode = mode_from(j.at("mode").get<std::string>());
  l.episode = j.at("episode").get<int>();
  l.seed = j.at("seed").get<std::uint64_t>();
  l.scene_hash = std::stoull(j.at("scene_hash").get<std::string>(), nullptr, 16);
  l.grasped = j.at("grasped").get<bool>();
  l.success = j.at("success").get<bool>();
  l.steps = j.at("steps").get<int>();
  l.rationale = j.value("rationale", "");
  return l;
}

void write_episode_logs(const std::filesystem::path& path, const std::vector<EpisodeLog>& logs) {
  std::string text;
  for (const auto& l : logs) text += to_json(l).dump() + "\n";
  write_text(path, text);
}

std::vector<EpisodeLog> read_episode_logs(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::vector<EpisodeLog> logs;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      logs.push_back(episode_log_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw MalformedLineError(n, e.what());
    }
  }
  return logs;
}

SuccessTable aggregate(const std::vector<EpisodeLog>& logs) {
  SuccessTable t;
  auto find_row = [&](sim::VariantMode mode, const std::string& task) -> TaskRow& {
    for (auto& r : t.rows)
      if (r.mode == mode && r.task == task) return r;
    t.rows.push_back(TaskRow{task, mode, 0, 0, 0});
    return t.rows.back();
  };
  for (const auto& l : logs) {
    if (l.success && !l.grasped) throw ConsistencyError("episode " + std::to_string(l.episode) + " succeeded without a grasp");
    TaskRow& r = find_row(l.mode, l.task);
    ++r.episodes;
    r.grasps += l.grasped ? 1 : 0;
    r.successes += l.success ? 1 : 0;
  }
  std::stable_sort(t.rows.begin(), t.rows.end(),
                   [](const TaskRow& a, const TaskRow& b) { return a.mode < b.mode; });
  return t;
}

double SuccessTable::average_success(sim::VariantMode mode) const {
  double s = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.mode == mode) s += r.success_rate(), ++n;
  return n ? s / n : 0.0;
}

double SuccessTable::average_grasp(sim::VariantMode mode) const {
  double s = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.mode == mode) s += r.grasp_rate(), ++n;
  return n ? s / n : 0.0;
}

double SuccessTable::average_success() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.success_rate();
  return s / static_cast<double>(rows.size());
}

std::string success_csv(const SuccessTable& table) {
  std::string out = "mode,task,grasp,success\n";
  std::vector<sim::VariantMode> modes;
  for (const auto& r : table.rows)
    if (std::find(modes.begin(), modes.end(), r.mode) == modes.end()) modes.push_back(r.mode);
  for (auto m : modes) {
    for (const auto& r : table.rows)
      if (r.mode == m)
        out += std::string(sim::mode_name(m)) + "," + r.task + "," + fmt(r.grasp_rate()) + "," +
               fmt(r.success_rate()) + "\n";
    out += std::string(sim::mode_name(m)) + ",average," + fmt(table.average_grasp(m)) + "," +
           fmt(table.average_success(m)) + "\n";
  }
  return out;
}

SuiteResult eval_suite(const Policy& policy, const EvalConfig& config) {
  config.validate();
  struct Job {
    sim::VariantMode mode;
    std::size_t task;
    int episode;
  };
  std::vector<Job> jobs;
  for (auto m : config.modes)
    for (std::size_t t = 0; t < config.tasks.size(); ++t)
      for (int e = 0; e < config.episodes_per_task; ++e) jobs.push_back({m, t, e});

  SuiteResult res;
  res.logs.resize(jobs.size());
  parallel_for(jobs.size(), config.jobs, [&](std::size_t i) {
    const Job& j = jobs[i];
    const sim::Task& task = config.tasks[j.task];
    const std::uint64_t seed = eval_episode_seed(config.seed, j.mode, j.task, j.episode);
    try {
      const EpisodeSpec spec = make_episode(task, j.mode, seed);
      EpisodeLog& log = res.logs[i];
      const auto r = run_episode(policy, task, spec.initial, spec.variant, seed, config.max_steps, &log.rationale);
      log.task = task.name();
      log.mode = j.mode;
      log.episode = j.episode;
      log.seed = seed;
      log.scene_hash = sim::scene_hash(spec.initial);
      log.grasped = r.grasped;
      log.success = r.success;
      log.steps = r.steps_used;
    } catch (const Error& e) {
      throw Error(std::string(sim::mode_name(j.mode)) + "/" + task.name() + " episode " + std::to_string(j.episode) +
                  ": " + e.what());
    }
  });
  res.table = aggregate(res.logs);
  return res;
}

double success_rate(const Policy& policy, const std::vector<EpisodeSpec>& episodes, int max_steps, int jobs) {
  if (episodes.empty()) throw ConfigError("no episodes to evaluate");
  std::vector<char> ok(episodes.size(), 0);
  parallel_for(episodes.size(), jobs, [&](std::size_t i) {
    const auto& e = episodes[i];
    ok[i] = run_episode(policy, e.task, e.initial, e.variant, e.seed, max_steps).success ? 1 : 0;
  });
  std::size_t n = 0;
  for (char c : ok) n += c ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(episodes.size());
}

// ---------------------------------------------------------------------------
// attention alignment

std::vector<sim::Cell> relevant_cells(const sim::Scene& scene, const sim::Task& task) {
  std::vector<sim::Cell> cells;
  auto add = [&](sim::Cell c) {
    if (std::find(cells.begin(), cells.end(), c) == cells.end()) cells.push_back(c);
  };
  const sim::Object* src = scene.find(task.source);
  const sim::Object* dst = scene.find(task.destination);
  if (src) add(src->cell);
  if (dst) add(dst->cell);
  add(scene.gripper);
  return cells;
}

std::vector<std::vector<double>> alignment_by_head(const std::vector<std::vector<Tensor>>& attn,
                                                   const std::vector<sim::Cell>& relevant, int grid_w) {
  if (relevant.empty()) throw MetricError("relevant cell set is empty");
  if (attn.empty()) throw MetricError("no attention maps");
  std::vector<std::size_t> idx;
  for (const auto& c : relevant) {
    const std::size_t i = static_cast<std::size_t>(c.y * grid_w + c.x);
    if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
  }
  std::vector<std::vector<double>> out(attn.size());
  for (std::size_t l = 0; l < attn.size(); ++l)
    for (const Tensor& a : attn[l]) {
      if (a.rank() != 2 || a.rows() == 0) throw MetricError("attention map must be a non-empty matrix");
      for (auto i : idx)
        if (i >= a.cols()) throw MetricError("relevant cell outside the patch grid");
      double s = 0.0;
      for (std::size_t q = 0; q < a.rows(); ++q)
        for (auto i : idx) s += a.at(q, i);
      out[l].push_back(s / static_cast<double>(a.rows()));
    }
  return out;
}

double attention_alignment(const std::vector<std::vector<Tensor>>& attn, const std::vector<sim::Cell>& relevant,
                           int grid_w) {
  const auto by_head = alignment_by_head(attn, relevant, grid_w);
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& layer : by_head)
    for (double v : layer) s += v, ++n;
  if (n == 0) throw MetricError("no attention heads");
  return s / static_cast<double>(n);
}

std::vector<std::vector<Tensor>> action_attention(const model::ParamStore& params, const model::ModelConfig& config,
                                                  const data::Vocabulary& vocab, const sim::Scene& scene,
                                                  const sim::VariantSpec& variant, const sim::Task& task) {
  const Tensor image = sim::render(scene, variant);
  const auto instruction = vocab.encode(task.instruction_words());
  const auto rationale = model::generate_rationale(params, config, vocab, image, instruction, config.max_rationale);
  Tape tape(GradMode::disabled);
  const auto bound = model::bind_values(tape, params);
  model::ForwardOptions opts;
  opts.rationale_logits = false;
  opts.capture_attention = true;
  const model::Sample s{&image, instruction, rationale, true};
  const auto out = model::forward(tape, bound, config, vocab, std::span<const model::Sample>(&s, 1), opts);
  return model::extract_attention(out, 0, model::QuerySpan::action, config.num_patches());
}

AlignmentReport alignment_report(const model::ParamStore& params, const model::ModelConfig& config,
                                 const data::Vocabulary& vocab, const EvalConfig& eval) {
  eval.validate();
  struct Job {
    sim::VariantMode mode;
    std::size_t task;
    int episode;
  };
  std::vector<Job> jobs;
  for (auto m : eval.modes)
    for (std::size_t t = 0; t < eval.tasks.size(); ++t)
      for (int e = 0; e < eval.episodes_per_task; ++e) jobs.push_back({m, t, e});

  AlignmentReport rep;
  rep.episodes.resize(jobs.size());
  parallel_for(jobs.size(), eval.jobs, [&](std::size_t i) {
    const auto& j = jobs[i];
    const sim::Task& task = eval.tasks[j.task];
    const std::uint64_t seed = eval_episode_seed(eval.seed, j.mode, j.task, j.episode);
    const EpisodeSpec spec = make_episode(task, j.mode, seed);
    const auto attn = action_attention(params, config, vocab, spec.initial, spec.variant, task);
    auto& ep = rep.episodes[i];
    ep.seed = seed;
    ep.task = task.name();
    ep.scene_hash = sim::scene_hash(spec.initial);
    ep.by_head = alignment_by_head(attn, relevant_cells(spec.initial, task), config.grid_w);
    ep.score = attention_alignment(attn, relevant_cells(spec.initial, task), config.grid_w);
  });

  rep.by_head.assign(static_cast<std::size_t>(config.layers), std::vector<double>(static_cast<std::size_t>(config.heads), 0.0));
  for (const auto& ep : rep.episodes) {
    rep.mean += ep.score;
    for (std::size_t l = 0; l < ep.by_head.size(); ++l)
      for (std::size_t h = 0; h < ep.by_head[l].size(); ++h) rep.by_head[l][h] += ep.by_head[l][h];
  }
  const double n = static_cast<double>(rep.episodes.size());
  rep.mean /= n;
  for (auto& l : rep.by_head)
    for (double& v : l) v /= n;
  return rep;
}

ComparisonReport compare_reports(const AlignmentReport& before, const AlignmentReport& after) {
  if (before.episodes.size() != after.episodes.size())
    throw CompatibilityError("alignment reports cover different episode sets");
  ComparisonReport c;
  for (std::size_t i = 0; i < before.episodes.size(); ++i) {
    const auto& b = before.episodes[i];
    const auto& a = after.episodes[i];
    if (b.seed != a.seed || b.task != a.task) throw CompatibilityError("alignment reports are not paired");
    if (b.scene_hash != a.scene_hash)
      throw ConsistencyError("scene hash mismatch for episode seed " + std::to_string(b.seed));
    ++c.hash_matches;
    c.pairs.push_back(PairedAlignment{b.seed, b.task, b.scene_hash, b.score, a.score, a.score - b.score});
  }
  c.mean_before = before.mean;
  c.mean_after = after.mean;
  c.mean_delta = after.mean - before.mean;
  c.delta_by_head = after.by_head;
  for (std::size_t l = 0; l < c.delta_by_head.size() && l < before.by_head.size(); ++l)
    for (std::size_t h = 0; h < c.delta_by_head[l].size() && h < before.by_head[l].size(); ++h)
      c.delta_by_head[l][h] -= before.by_head[l][h];
  return c;
}

ComparisonReport compare_alignment(const model::Checkpoint& before, const model::Checkpoint& after,
                                   const data::Vocabulary& vocab, const EvalConfig& eval) {
  if (!(before.config == after.config)) throw CompatibilityError("checkpoints have different model configs");
  if (before.vocab_hash != after.vocab_hash || before.vocab_hash != vocab.hash())
    throw CompatibilityError("checkpoints were trained with different vocabularies");
  return compare_reports(alignment_report(before.params, before.config, vocab, eval),
                         alignment_report(after.params, after.config, vocab, eval));
}

nlohmann::json to_json(const AlignmentReport& r) {
  nlohmann::json eps = nlohmann::json::array();
  for (const auto& e : r.episodes)
    eps.push_back({{"seed", e.seed}, {"task", e.task}, {"scene_hash", hex64(e.scene_hash)}, {"score", e.score},
                   {"by_head", e.by_head}});
  return {{"mean", r.mean}, {"by_head", r.by_head}, {"episodes", eps}};
}

nlohmann::json to_json(const ComparisonReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs)
    pairs.push_back({{"seed", p.seed},
                     {"task", p.task},
                     {"scene_hash", hex64(p.scene_hash)},
                     {"before", p.before},
                     {"after", p.after},
                     {"delta", p.delta}});
  return {{"mean_before", r.mean_before}, {"mean_after", r.mean_after},     {"mean_delta", r.mean_delta},
          {"delta_by_head", r.delta_by_head}, {"hash_matches", r.hash_matches}, {"pairs", pairs}};
}

// ---------------------------------------------------------------------------
// images

void write_ppm(const std::filesystem::path& path, const Ppm& image) {
  if (image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3)
    throw DimensionError("ppm pixel buffer does not match its size");
  std::string text = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  text.append(reinterpret_cast<const char*>(image.rgb.data()), image.rgb.size());
  write_text(path, text);
}

Ppm read_ppm(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  std::istringstream in(text);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw FormatError("not an 8-bit P6 image: " + path.string());
  in.get();
  Ppm p{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
  in.read(reinterpret_cast<char*>(p.rgb.data()), static_cast<std::streamsize>(p.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(p.rgb.size())) throw FormatError("truncated image " + path.string());
  return p;
}

void emit_heatmap(const Tensor& image, const std::vector<double>& row, int grid_w, int grid_h,
                  const std::filesystem::path& path) {
  const std::size_t cells = static_cast<std::size_t>(grid_w) * grid_h;
  if (row.size() != cells) throw DimensionError("attention row must have one value per cell");
  if (image.rank() != 3 || image.shape()[2] != 3) throw DimensionError("heatmap needs an [H, W, 3] image");
  const int H = static_cast<int>(image.shape()[0]), W = static_cast<int>(image.shape()[1]);
  if (H % grid_h != 0 || W % grid_w != 0) throw DimensionError("image does not tile into the cell grid");
  const int ph = H / grid_h, pw = W / grid_w;
  double top = 0.0;
  for (double v : row) {
    if (!std::isfinite(v) || v < 0.0) throw MetricError("attention values must be finite and non-negative");
    top = std::max(top, v);
  }
  auto byte = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
  Ppm p{W, H, std::vector<std::uint8_t>(static_cast<std::size_t>(W) * H * 3)};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t cell = static_cast<std::size_t>((y / ph) * grid_w + x / pw);
      const double w = top > 0.0 ? row[cell] / top : 0.0;
      const std::size_t o = (static_cast<std::size_t>(y) * W + x) * 3;
      const std::size_t s = (static_cast<std::size_t>(y) * W + x) * 3;
      p.rgb[o] = byte(w);
      p.rgb[o + 1] = byte(0.5 * image[s + 1]);
      p.rgb[o + 2] = byte(0.5 * image[s + 2]);
    }
  write_ppm(path, p);
  const nlohmann::json side = {{"grid_w", grid_w}, {"grid_h", grid_h}, {"values", row}};
  write_text(sidecar(path), side.dump(2) + "\n");
}

Heatmap read_heatmap_sidecar(const std::filesystem::path& json_path) {
  try {
    const auto j = nlohmann::json::parse(read_text(json_path));
    return Heatmap{j.at("grid_w").get<int>(), j.at("grid_h").get<int>(), j.at("values").get<std::vector<double>>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("heatmap sidecar " + json_path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// curves

nlohmann::json to_json(const CurveReport& r) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.points) {
    nlohmann::json row = {{"value", p.value},
                          {"val_success", opt_json(p.success)},
                          {"final_L_action", opt_json(p.l_action)},
                          {"final_L_reasoning", opt_json(p.l_reasoning)}};
    if (!p.note.empty()) row["note"] = p.note;
    if (!p.error.empty()) row["error"] = p.error;
    pts.push_back(std::move(row));
  }
  return pts;
}

CurveReport curve_from_json(const nlohmann::json& j, std::string axis) {
  CurveReport r;
  r.axis = std::move(axis);
  if (!j.is_array()) throw FormatError("curve data must be a JSON array");
  try {
    for (const auto& p : j)
      r.points.push_back(CurvePoint{p.at("value").get<double>(), opt_double(p, "val_success"),
                                    opt_double(p, "final_L_action"), opt_double(p, "final_L_reasoning"),
                                    p.value("note", ""), p.value("error", "")});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed curve file: ") + e.what());
  }
  return r;
}

std::string render_svg(const CurveReport& report) {
  if (report.points.size() < 2) throw PlotError("a curve needs at least two points");
  constexpr double W = 480, H = 320, left = 60, right = 20, top = 20, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  // Points are spaced evenly in sweep order; the swept values label the axis.
  const std::size_t n = report.points.size();
  auto px = [&](std::size_t i) { return left + pw * static_cast<double>(i) / static_cast<double>(n - 1); };
  auto py = [&](double s) { return top + ph * (1.0 - std::clamp(s, 0.0, 1.0)); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" viewBox=\"0 0 480 320\">\n";
  svg += "<rect width=\"480\" height=\"320\" fill=\"white\"/>\n";
  svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(top + ph) + "\" x2=\"" + num(left + pw) + "\" y2=\"" +
         num(top + ph) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" + num(top + ph) +
         "\" stroke=\"black\"/>\n";
  for (double t : {0.0, 0.5, 1.0})
    svg += "<text class=\"ytick\" x=\"" + num(left - 8) + "\" y=\"" + num(py(t) + 4) +
           "\" text-anchor=\"end\" font-size=\"11\">" + label(t) + "</text>\n";

  std::string poly;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = report.points[i];
    svg += "<text class=\"xtick\" x=\"" + num(px(i)) + "\" y=\"" + num(top + ph + 18) +
           "\" text-anchor=\"middle\" font-size=\"11\">" + label(p.value) + "</text>\n";
    if (!p.success) continue;
    if (!poly.empty()) poly += " ";
    poly += num(px(i)) + "," + num(py(*p.success));
  }
  svg += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"" + poly + "\"/>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = report.points[i];
    if (!p.success) continue;
    svg += "<circle class=\"marker\" cx=\"" + num(px(i)) + "\" cy=\"" + num(py(*p.success)) +
           "\" r=\"4\" fill=\"steelblue\"/>\n";
  }
  svg += "<text x=\"" + num(left + pw / 2) + "\" y=\"" + num(H - 10) + "\" text-anchor=\"middle\" font-size=\"12\">" +
         report.axis + "</text>\n";
  svg += "<text x=\"14\" y=\"" + num(top + ph / 2) + "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 " +
         num(top + ph / 2) + ")\">success</text>\n";
  svg += "</svg>\n";
  return svg;
}

void emit_curves(const CurveReport& report, const std::filesystem::path& svg_path) {
  const std::string svg = render_svg(report);
  write_text(svg_path, svg);
  write_text(sidecar(svg_path), to_json(report).dump(2) + "\n");
}

}  // namespace rfvla::eval
