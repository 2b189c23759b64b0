#pragma once

// Demonstration datasets: expert rollouts, rationale enrichment, persistence
// and seeded mini-batch sampling.
//
// Scenes are stored symbolically; observations are re-rendered from them.
// On disk a dataset is <name>.manifest.json plus <name>.records.jsonl (one
// step per line, keys sorted) and a shared vocab.json next to them.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfvla/rng.hpp"
#include "rfvla/sim.hpp"
#include "rfvla/teacher.hpp"
#include "rfvla/vocab.hpp"

namespace rfvla::data {

inline constexpr int kDatasetFormatVersion = 1;

struct Step {
  int episode = 0;
  std::uint64_t episode_seed = 0;
  int step = 0;
  sim::Task task;
  sim::Scene scene;
  sim::VariantSpec variant;
  std::vector<int> instruction_ids;
  int action_id = 0;
  std::vector<int> rationale_ids;  // empty until annotated
  friend bool operator==(const Step&, const Step&) = default;
};

struct TaskCounts {
  int episodes = 0;
  int steps = 0;
  friend bool operator==(const TaskCounts&, const TaskCounts&) = default;
};

struct Manifest {
  int format_version = kDatasetFormatVersion;
  std::string vocab_hash;
  std::uint64_t generator_seed = 0;
  std::map<std::string, TaskCounts> counts;  // keyed by Task::name()
  bool annotated = false;
  friend bool operator==(const Manifest&, const Manifest&) = default;
};

struct Dataset {
  Manifest manifest;
  std::vector<Step> steps;

  std::size_t size() const { return steps.size(); }
  int num_episodes() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GenerateOptions {
  std::vector<sim::Task> tasks = sim::canonical_tasks();
  // Cycled over episodes; each episode samples its variant from its own seed.
  std::vector<sim::VariantMode> modes{sim::VariantMode::visual_matching};
  int episodes_per_task = 125;
  std::uint64_t seed = 0;
};

// Seed of episode `e` (global index across tasks) for generator seed `seed`.
std::uint64_t episode_seed(std::uint64_t seed, int episode);

// Expert rollouts, one Step per timestep. Every episode ends in success.
Dataset generate_demos(const GenerateOptions& options, const Vocabulary& vocab);

// Attaches the teacher's rationale for each episode's initial scene to every
// step of that episode. Episodes are annotated concurrently up to
// teacher.concurrency(); PartialOutputError lists the steps whose episode
// failed.
Dataset augment(const Dataset& raw, const teacher::Teacher& teacher, const Vocabulary& vocab);

// Drops every rationale, recovering the raw dataset.
Dataset strip_rationales(const Dataset& annotated);

Manifest build_manifest(const std::vector<Step>& steps, std::uint64_t generator_seed, const Vocabulary& vocab,
                        bool annotated);
// Throws ManifestError when counts, annotation flag or vocab hash disagree.
void check_manifest(const Dataset& d, const Vocabulary& vocab);

nlohmann::json to_json(const Step& s);
Step step_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

struct DatasetFiles {
  std::filesystem::path manifest, records, vocab;
};
DatasetFiles dataset_files(const std::filesystem::path& dir, const std::string& name);

void save(const Dataset& d, const Vocabulary& vocab, const std::filesystem::path& dir, const std::string& name);

struct Loaded {
  Dataset dataset;
  Vocabulary vocab;
};
// VersionError, MalformedLineError (1-based line), ManifestError, IoError.
Loaded load(const std::filesystem::path& dir, const std::string& name);

// Whole episodes go to one side. The val fraction is rounded to episodes,
// with at least one episode on each side when there are two or more.
struct Split {
  Dataset train;
  Dataset val;
};
Split split_by_episode(const Dataset& d, double val_fraction, std::uint64_t seed, const Vocabulary& vocab);

// B distinct indices, uniform without replacement (partial Fisher-Yates).
std::vector<std::size_t> sample_indices(std::size_t n, std::size_t batch, SplitMix64& rng);
std::vector<const Step*> sample_minibatch(const Dataset& d, std::size_t batch, SplitMix64& rng);

}  // namespace rfvla::data
