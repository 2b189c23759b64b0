#pragma once

// Deterministic tabletop gridworld: pick-and-place tasks, a scripted expert,
// visual variants and a pixel renderer whose 4x4 patches map one-to-one onto
// grid cells.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rfvla/tensor.hpp"

namespace rfvla::sim {

enum class Kind : std::uint8_t {
  spoon,
  towel,
  carrot,
  plate,
  green_block,
  yellow_block,
  eggplant,
  basket,
};

inline constexpr std::array<Kind, 8> kAllKinds{Kind::spoon,        Kind::towel,      Kind::carrot,
                                               Kind::plate,        Kind::green_block, Kind::yellow_block,
                                               Kind::eggplant,     Kind::basket};

std::string_view kind_name(Kind k);
std::optional<Kind> parse_kind(std::string_view name);
// Flat kinds may lie under another object.
bool is_flat(Kind k);

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct Object {
  int id = 0;
  Kind kind = Kind::spoon;
  Cell cell;
  friend bool operator==(const Object&, const Object&) = default;
};

// Object ids 0 and 1 are the task's source and destination; reset() always
// places them first, and step() relies on this to detect grasp and success.
struct Scene {
  int grid_w = 8;
  int grid_h = 8;
  std::vector<Object> objects;
  Cell gripper;
  std::optional<int> held;
  int step_count = 0;

  const Object* find(Kind k) const;
  const Object* find_id(int id) const;
  friend bool operator==(const Scene&, const Scene&) = default;
};

// Throws ConsistencyError describing the first violated invariant.
void validate(const Scene& scene);

struct Task {
  Kind source = Kind::spoon;
  Kind destination = Kind::towel;

  // "put spoon on towel"
  std::vector<std::string> instruction_words() const;
  std::string instruction_text() const;
  std::string name() const;  // "spoon_on_towel"
  friend bool operator==(const Task&, const Task&) = default;
};

Task make_task(Kind source, Kind destination);  // TaskError when equal
std::optional<Task> parse_task(std::string_view name);
// The four canonical pick-and-place tasks.
const std::vector<Task>& canonical_tasks();

enum class VariantMode { visual_matching, variant_aggregation };
std::string_view mode_name(VariantMode m);
std::optional<VariantMode> parse_mode(std::string_view name);

struct VariantSpec {
  int distractor_count = 0;
  double lighting = 1.0;
  std::uint64_t palette_jitter_seed = 0;
  std::uint64_t layout_seed = 0;
  VariantMode mode = VariantMode::visual_matching;

  static VariantSpec visual_matching() { return {}; }
  friend bool operator==(const VariantSpec&, const VariantSpec&) = default;
};

void validate(const VariantSpec& variant);  // ConfigError
// Samples a variant-aggregation spec (distractors, lighting, jitter).
VariantSpec sample_variant(VariantMode mode, std::uint64_t seed);

enum class Grip : std::uint8_t { open, close };

struct Action {
  int dx = 0;
  int dy = 0;
  Grip grip = Grip::open;

  // Index in [0, 18): (dx+1)*6 + (dy+1)*2 + grip.
  int index() const;
  static Action from_index(int index);
  std::string token() const;  // "ACT_1_0_open"
  friend bool operator==(const Action&, const Action&) = default;
};

inline constexpr int kNumActions = 18;

struct StepResult {
  Scene scene;
  bool grasped_now = false;
  bool success_now = false;
};

struct EpisodeResult {
  bool grasped = false;
  bool success = false;
  int steps_used = 0;
  friend bool operator==(const EpisodeResult&, const EpisodeResult&) = default;
};

inline constexpr int kPatch = 4;
inline constexpr int kDefaultGrid = 8;

// 4 * (grid_w + grid_h)
int step_budget(const Scene& scene);

Scene reset(const Task& task, const VariantSpec& variant, std::uint64_t seed, int grid_w = kDefaultGrid,
            int grid_h = kDefaultGrid);
StepResult step(const Scene& scene, const Action& action);
// Image of shape [grid_h*4, grid_w*4, 3] with values in [0, 1].
Tensor render(const Scene& scene, const VariantSpec& variant);
Action expert_action(const Scene& scene, const Task& task);

// Manhattan bound on the expert's episode length from this scene.
int expert_step_bound(const Scene& scene, const Task& task);

nlohmann::json to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VariantSpec& variant);
VariantSpec variant_from_json(const nlohmann::json& j);
// FNV-1a over the canonical JSON encoding.
std::uint64_t scene_hash(const Scene& scene);

}  // namespace rfvla::sim
