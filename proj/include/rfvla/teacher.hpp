#pragma once

// Chain-of-thought rationales for demonstration steps.
//
// A rationale has four sections: what is observed, what the instruction
// asks, how the task objects relate spatially, and a step plan. The oracle
// teacher derives them from simulator ground truth; RemoteTeacher asks an
// HTTP service with a structured prompt and validates the answer against
// the scene before accepting it.

#include <chrono>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rfvla/sim.hpp"
#include "rfvla/vocab.hpp"

namespace rfvla::teacher {

enum class Relation { left_of, right_of, above, below, on, at };
std::string_view relation_name(Relation r);
std::optional<Relation> parse_relation(std::string_view name);

struct Mention {
  sim::Kind kind;
  sim::Cell cell;
  friend bool operator==(const Mention&, const Mention&) = default;
};

struct SpatialFact {
  sim::Kind subject;
  Relation relation;
  sim::Kind object;
  friend bool operator==(const SpatialFact&, const SpatialFact&) = default;
};

struct RationaleRecord {
  std::vector<Mention> observation;
  std::vector<std::string> situation;
  std::vector<SpatialFact> spatial;
  // Each step starts with a verb: move, grasp or release.
  std::vector<std::vector<std::string>> plan;
  friend bool operator==(const RationaleRecord&, const RationaleRecord&) = default;
};

RationaleRecord oracle_annotate(const sim::Scene& scene, const sim::Task& task);

// <OBS> kind x y ... <SIT> words <SPA> a rel b ... <PLAN> steps <EOS>
std::vector<int> serialize_rationale(const RationaleRecord& r, const data::Vocabulary& vocab);
RationaleRecord parse_rationale(std::span<const int> ids, const data::Vocabulary& vocab);

// Checks a record against the scene: HallucinationError for kinds not in the
// scene, ConsistencyError for wrong cells or relations, FormatError for an
// empty plan.
void validate_rationale(const RationaleRecord& r, const sim::Scene& scene);

// Plain-text form a teacher is asked to produce, one header line per section.
std::string format_rationale_text(const RationaleRecord& r);
std::string describe_scene(const sim::Scene& scene);

inline constexpr std::string_view kObservationHeader = "Observation:";
inline constexpr std::string_view kSituationHeader = "Situation Analysis:";
inline constexpr std::string_view kSpatialHeader = "Spatial Reasoning:";
inline constexpr std::string_view kPlanningHeader = "Task Planning:";

struct TeacherPrompt {
  std::string text;
};

TeacherPrompt render_prompt(std::string_view scene_description, std::string_view instruction);

RationaleRecord parse_and_validate(std::string_view raw, const sim::Scene& scene, const data::Vocabulary& vocab);

struct RemoteConfig {
  std::string endpoint;  // http://host:port/path
  std::string token;
  int retries = 3;  // total attempts
  std::chrono::milliseconds timeout{30000};
  std::chrono::milliseconds backoff{200};
  int concurrency = 4;

  // Endpoint and token from REFINEVLA_TEACHER_ENDPOINT / REFINEVLA_TEACHER_TOKEN.
  static RemoteConfig from_env();
};

// POSTs {"prompt": ...} and returns the "text" field of the JSON reply.
std::string annotate_remote(const RemoteConfig& config, const TeacherPrompt& prompt);

class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual RationaleRecord annotate(const sim::Scene& scene, const sim::Task& task) const = 0;
  // Upper bound on concurrent annotate() calls.
  virtual int concurrency() const { return 1; }
};

class OracleTeacher final : public Teacher {
 public:
  RationaleRecord annotate(const sim::Scene& scene, const sim::Task& task) const override {
    return oracle_annotate(scene, task);
  }
};

class RemoteTeacher final : public Teacher {
 public:
  RemoteTeacher(RemoteConfig config, const data::Vocabulary& vocab) : config_(std::move(config)), vocab_(vocab) {}
  RationaleRecord annotate(const sim::Scene& scene, const sim::Task& task) const override;
  int concurrency() const override { return config_.concurrency; }

 private:
  RemoteConfig config_;
  const data::Vocabulary& vocab_;
};

}  // namespace rfvla::teacher
