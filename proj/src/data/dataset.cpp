#include "rfvla/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "rfvla/errors.hpp"

namespace rfvla::data {
namespace {

using nlohmann::json;

// Episodes occupy contiguous step ranges; returns [begin, end) per episode.
std::vector<std::pair<std::size_t, std::size_t>> episode_ranges(const std::vector<Step>& steps) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (out.empty() || steps[i].episode != steps[out.back().first].episode) out.push_back({i, i});
    out.back().second = i + 1;
  }
  return out;
}

void check_ids(const Step& s, const Vocabulary& vocab) {
  auto in_vocab = [&](int id) { return id >= 0 && static_cast<std::size_t>(id) < vocab.size(); };
  for (int id : s.instruction_ids)
    if (!in_vocab(id)) throw LoadError("instruction id out of vocabulary: " + std::to_string(id));
  for (int id : s.rationale_ids)
    if (!in_vocab(id)) throw LoadError("rationale id out of vocabulary: " + std::to_string(id));
  if (!vocab.is_action(s.action_id)) throw LoadError("action id outside the action block: " + std::to_string(s.action_id));
}

json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(p.string() + ": " + e.what());
  }
}

void write_file(const std::filesystem::path& p, const std::string& contents) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << contents;
  if (!out) throw IoError("write failed for " + p.string());
}

}  // namespace

int Dataset::num_episodes() const { return static_cast<int>(episode_ranges(steps).size()); }

std::uint64_t episode_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed, static_cast<std::uint64_t>(episode));
}

Dataset generate_demos(const GenerateOptions& options, const Vocabulary& vocab) {
  if (options.episodes_per_task < 1) throw ConfigError("episodes per task must be at least 1");
  if (options.tasks.empty()) throw ConfigError("task set is empty");
  if (options.modes.empty()) throw ConfigError("variant mode list is empty");

  Dataset d;
  int episode = 0;
  for (const auto& task : options.tasks) {
    const auto instruction = vocab.encode(task.instruction_words());
    for (int i = 0; i < options.episodes_per_task; ++i, ++episode) {
      const std::uint64_t eseed = episode_seed(options.seed, episode);
      const auto mode = options.modes[static_cast<std::size_t>(episode) % options.modes.size()];
      const sim::VariantSpec variant = sim::sample_variant(mode, derive_seed(eseed, 1));
      sim::Scene scene = sim::reset(task, variant, eseed);
      bool success = false;
      for (int t = 0; !success && t < sim::step_budget(scene); ++t) {
        const sim::Action a = sim::expert_action(scene, task);
        d.steps.push_back(Step{episode, eseed, t, task, scene, variant, instruction, vocab.action_id(a), {}});
        auto r = sim::step(scene, a);
        scene = std::move(r.scene);
        success = r.success_now;
      }
      if (!success) throw TaskError("expert failed episode " + std::to_string(episode) + " of " + task.name());
    }
  }
  d.manifest = build_manifest(d.steps, options.seed, vocab, false);
  return d;
}

Dataset augment(const Dataset& raw, const teacher::Teacher& teacher, const Vocabulary& vocab) {
  Dataset out = raw;
  const auto ranges = episode_ranges(out.steps);
  std::vector<std::string> failure(ranges.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t e = next++; e < ranges.size(); e = next++) {
      const auto [b, end] = ranges[e];
      try {
        const Step& first = out.steps[b];
        const auto ids = teacher::serialize_rationale(teacher.annotate(first.scene, first.task), vocab);
        for (std::size_t i = b; i < end; ++i) out.steps[i].rationale_ids = ids;
      } catch (const Error& err) {
        failure[e] = err.what();
      }
    }
  };
  const std::size_t workers =
      std::min<std::size_t>(ranges.size(), static_cast<std::size_t>(std::max(1, teacher.concurrency())));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<FailedItem> failed;
  for (std::size_t e = 0; e < ranges.size(); ++e)
    if (!failure[e].empty())
      for (std::size_t i = ranges[e].first; i < ranges[e].second; ++i) failed.push_back({i, failure[e]});
  if (!failed.empty()) {
    std::ostringstream os;
    os << "teacher failed on " << failed.size() << " of " << out.steps.size() << " steps; first failure at step "
       << failed.front().index << ": " << failed.front().reason;
    throw PartialOutputError(std::move(failed), os.str());
  }
  out.manifest = build_manifest(out.steps, raw.manifest.generator_seed, vocab, true);
  return out;
}

Dataset strip_rationales(const Dataset& annotated) {
  Dataset d = annotated;
  for (auto& s : d.steps) s.rationale_ids.clear();
  d.manifest.annotated = false;
  return d;
}

Manifest build_manifest(const std::vector<Step>& steps, std::uint64_t generator_seed, const Vocabulary& vocab,
                        bool annotated) {
  Manifest m;
  m.vocab_hash = vocab.hash();
  m.generator_seed = generator_seed;
  m.annotated = annotated;
  for (const auto& s : steps) {
    auto& c = m.counts[s.task.name()];
    ++c.steps;
    if (s.step == 0) ++c.episodes;
  }
  return m;
}

void check_manifest(const Dataset& d, const Vocabulary& vocab) {
  if (d.manifest.vocab_hash != vocab.hash()) throw ManifestError("manifest vocab hash does not match vocabulary");
  const Manifest expect = build_manifest(d.steps, d.manifest.generator_seed, vocab, d.manifest.annotated);
  for (const auto& [name, c] : expect.counts) {
    auto it = d.manifest.counts.find(name);
    if (it == d.manifest.counts.end()) throw ManifestError("manifest lacks counts for task " + name);
    if (!(it->second == c))
      throw ManifestError("manifest counts for " + name + " are " + std::to_string(it->second.episodes) + "/" +
                          std::to_string(it->second.steps) + " episodes/steps, records hold " +
                          std::to_string(c.episodes) + "/" + std::to_string(c.steps));
  }
  if (d.manifest.counts.size() != expect.counts.size()) throw ManifestError("manifest lists tasks with no records");
  for (const auto& s : d.steps)
    if (s.rationale_ids.empty() == d.manifest.annotated)
      throw ManifestError("annotation flag disagrees with record at episode " + std::to_string(s.episode));
}

json to_json(const Step& s) {
  return json{{"episode", s.episode},
              {"episode_seed", s.episode_seed},
              {"step", s.step},
              {"task", s.task.name()},
              {"scene", sim::to_json(s.scene)},
              {"variant", sim::to_json(s.variant)},
              {"instruction_ids", s.instruction_ids},
              {"action_id", s.action_id},
              {"rationale_ids", s.rationale_ids}};
}

Step step_from_json(const json& j) {
  Step s;
  s.episode = j.at("episode").get<int>();
  s.episode_seed = j.at("episode_seed").get<std::uint64_t>();
  s.step = j.at("step").get<int>();
  auto task = sim::parse_task(j.at("task").get<std::string>());
  if (!task) throw LoadError("unknown task " + j.at("task").dump());
  s.task = *task;
  s.scene = sim::scene_from_json(j.at("scene"));
  s.variant = sim::variant_from_json(j.at("variant"));
  s.instruction_ids = j.at("instruction_ids").get<std::vector<int>>();
  s.action_id = j.at("action_id").get<int>();
  s.rationale_ids = j.at("rationale_ids").get<std::vector<int>>();
  return s;
}

json to_json(const Manifest& m) {
  json counts = json::object();
  std::size_t total = 0;
  for (const auto& [name, c] : m.counts) {
    counts[name] = {{"episodes", c.episodes}, {"steps", c.steps}};
    total += static_cast<std::size_t>(c.steps);
  }
  return json{{"format_version", m.format_version}, {"vocab_hash", m.vocab_hash},
              {"generator_seed", m.generator_seed}, {"counts", counts},
              {"num_records", total},               {"annotated", m.annotated}};
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kDatasetFormatVersion)
    throw VersionError("unsupported dataset format version " + std::to_string(m.format_version));
  try {
    m.vocab_hash = j.at("vocab_hash").get<std::string>();
    m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
    m.annotated = j.at("annotated").get<bool>();
    std::size_t total = 0;
    for (const auto& [name, c] : j.at("counts").items()) {
      m.counts[name] = {c.at("episodes").get<int>(), c.at("steps").get<int>()};
      total += static_cast<std::size_t>(m.counts[name].steps);
    }
    if (j.at("num_records").get<std::size_t>() != total)
      throw ManifestError("manifest num_records disagrees with its per-task counts");
  } catch (const json::exception& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

DatasetFiles dataset_files(const std::filesystem::path& dir, const std::string& name) {
  return {dir / (name + ".manifest.json"), dir / (name + ".records.jsonl"), dir / "vocab.json"};
}

void save(const Dataset& d, const Vocabulary& vocab, const std::filesystem::path& dir, const std::string& name) {
  check_manifest(d, vocab);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto files = dataset_files(dir, name);
  std::string records;
  for (const auto& s : d.steps) records += to_json(s).dump() + "\n";
  write_file(files.records, records);
  write_file(files.vocab, vocab.to_json().dump(2) + "\n");
  write_file(files.manifest, to_json(d.manifest).dump(2) + "\n");
}

Loaded load(const std::filesystem::path& dir, const std::string& name) {
  const auto files = dataset_files(dir, name);
  const Manifest manifest = manifest_from_json(read_json_file(files.manifest));
  Vocabulary vocab = Vocabulary::from_json(read_json_file(files.vocab));
  if (vocab.hash() != manifest.vocab_hash) throw ManifestError("dataset was written with a different vocabulary");

  std::ifstream in(files.records, std::ios::binary);
  if (!in) throw IoError("cannot open " + files.records.string());
  Dataset d;
  d.manifest = manifest;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (in.eof()) throw MalformedLineError(lineno, "record is not newline-terminated (truncated file?)");
    try {
      Step s = step_from_json(json::parse(line));
      check_ids(s, vocab);
      d.steps.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw MalformedLineError(lineno, e.what());
    } catch (const Error& e) {
      throw MalformedLineError(lineno, e.what());
    }
  }
  check_manifest(d, vocab);
  return {std::move(d), std::move(vocab)};
}

Split split_by_episode(const Dataset& d, double val_fraction, std::uint64_t seed, const Vocabulary& vocab) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must be in [0, 1)");
  const auto ranges = episode_ranges(d.steps);
  std::vector<std::size_t> order(ranges.size());
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(ranges.size())));
  if (val_fraction > 0.0 && ranges.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, ranges.size() - 1);
  std::vector<bool> is_val(ranges.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;

  Split s;
  for (std::size_t e = 0; e < ranges.size(); ++e) {
    auto& side = is_val[e] ? s.val : s.train;
    side.steps.insert(side.steps.end(), d.steps.begin() + static_cast<std::ptrdiff_t>(ranges[e].first),
                      d.steps.begin() + static_cast<std::ptrdiff_t>(ranges[e].second));
  }
  s.train.manifest = build_manifest(s.train.steps, d.manifest.generator_seed, vocab, d.manifest.annotated);
  s.val.manifest = build_manifest(s.val.steps, d.manifest.generator_seed, vocab, d.manifest.annotated);
  return s;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t batch, SplitMix64& rng) {
  if (batch > n)
    throw SizeError("batch size " + std::to_string(batch) + " exceeds dataset size " + std::to_string(n));
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < batch; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
  pool.resize(batch);
  return pool;
}

std::vector<const Step*> sample_minibatch(const Dataset& d, std::size_t batch, SplitMix64& rng) {
  std::vector<const Step*> out;
  for (std::size_t i : sample_indices(d.steps.size(), batch, rng)) out.push_back(&d.steps[i]);
  return out;
}

}  // namespace rfvla::data
