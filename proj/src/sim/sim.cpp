#include "rfvla/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rfvla/errors.hpp"
#include "rfvla/hash.hpp"
#include "rfvla/rng.hpp"

namespace rfvla::sim {
namespace {

struct Rgb {
  double r, g, b;
};

// Base palette, indexed by Kind; background last.
constexpr std::array<Rgb, 9> kPalette{{
    {0.60, 0.62, 0.72},  // spoon
    {0.20, 0.30, 0.90},  // towel
    {1.00, 0.50, 0.10},  // carrot
    {0.85, 0.80, 0.55},  // plate
    {0.10, 0.80, 0.20},  // green_block
    {0.95, 0.90, 0.10},  // yellow_block
    {0.45, 0.10, 0.55},  // eggplant
    {0.60, 0.35, 0.15},  // basket
    {0.15, 0.15, 0.15},  // background
}};
constexpr std::size_t kBackground = 8;
constexpr Rgb kGripperOpen{1.0, 1.0, 1.0};
constexpr Rgb kGripperHolding{1.0, 0.2, 0.6};

int sign(int v) { return (v > 0) - (v < 0); }

bool in_bounds(const Scene& s, Cell c) { return c.x >= 0 && c.y >= 0 && c.x < s.grid_w && c.y < s.grid_h; }

std::array<Rgb, 9> palette_for(const VariantSpec& v) {
  std::array<Rgb, 9> p = kPalette;
  if (v.mode != VariantMode::variant_aggregation) return p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    SplitMix64 rng(derive_seed(v.palette_jitter_seed, i));
    p[i].r = std::clamp(p[i].r + rng.uniform(-0.1, 0.1), 0.0, 1.0);
    p[i].g = std::clamp(p[i].g + rng.uniform(-0.1, 0.1), 0.0, 1.0);
    p[i].b = std::clamp(p[i].b + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  }
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// names

std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::spoon: return "spoon";
    case Kind::towel: return "towel";
    case Kind::carrot: return "carrot";
    case Kind::plate: return "plate";
    case Kind::green_block: return "green_block";
    case Kind::yellow_block: return "yellow_block";
    case Kind::eggplant: return "eggplant";
    case Kind::basket: return "basket";
  }
  return "?";
}

std::optional<Kind> parse_kind(std::string_view name) {
  for (Kind k : kAllKinds)
    if (kind_name(k) == name) return k;
  return std::nullopt;
}

bool is_flat(Kind k) { return k == Kind::towel || k == Kind::plate || k == Kind::basket; }

const Object* Scene::find(Kind k) const {
  for (const auto& o : objects)
    if (o.kind == k) return &o;
  return nullptr;
}

const Object* Scene::find_id(int id) const {
  for (const auto& o : objects)
    if (o.id == id) return &o;
  return nullptr;
}

void validate(const Scene& s) {
  if (s.grid_w <= 0 || s.grid_h <= 0) throw ConsistencyError("grid extents must be positive");
  if (!in_bounds(s, s.gripper)) throw ConsistencyError("gripper out of bounds");
  for (const auto& o : s.objects) {
    if (!in_bounds(s, o.cell)) throw ConsistencyError("object " + std::to_string(o.id) + " out of bounds");
    if (std::count_if(s.objects.begin(), s.objects.end(), [&](const Object& q) { return q.id == o.id; }) != 1)
      throw ConsistencyError("duplicate object id " + std::to_string(o.id));
  }
  if (s.held) {
    const Object* h = s.find_id(*s.held);
    if (!h) throw ConsistencyError("held object does not exist");
    if (!(h->cell == s.gripper)) throw ConsistencyError("held object is not at the gripper");
  }
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const Object& a = s.objects[i];
    if (is_flat(a.kind) || (s.held && *s.held == a.id)) continue;
    for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
      const Object& b = s.objects[j];
      if (is_flat(b.kind) || (s.held && *s.held == b.id) || !(a.cell == b.cell)) continue;
      // A delivered source may rest on its destination.
      const bool delivered = (a.id == 0 && b.id == 1) || (a.id == 1 && b.id == 0);
      if (!delivered)
        throw ConsistencyError("two non-flat objects share cell (" + std::to_string(a.cell.x) + "," +
                               std::to_string(a.cell.y) + ")");
    }
  }
}

std::vector<std::string> Task::instruction_words() const {
  return {"put", std::string(kind_name(source)), "on", std::string(kind_name(destination))};
}

std::string Task::instruction_text() const {
  return "put " + std::string(kind_name(source)) + " on " + std::string(kind_name(destination));
}

std::string Task::name() const {
  return std::string(kind_name(source)) + "_on_" + std::string(kind_name(destination));
}

Task make_task(Kind source, Kind destination) {
  if (source == destination) throw TaskError("task source and destination must differ");
  return Task{source, destination};
}

std::optional<Task> parse_task(std::string_view name) {
  const auto pos = name.find("_on_");
  if (pos == std::string_view::npos) return std::nullopt;
  auto s = parse_kind(name.substr(0, pos));
  auto d = parse_kind(name.substr(pos + 4));
  if (!s || !d || *s == *d) return std::nullopt;
  return Task{*s, *d};
}

const std::vector<Task>& canonical_tasks() {
  static const std::vector<Task> kTasks{
      {Kind::spoon, Kind::towel},
      {Kind::carrot, Kind::plate},
      {Kind::green_block, Kind::yellow_block},
      {Kind::eggplant, Kind::basket},
  };
  return kTasks;
}

std::string_view mode_name(VariantMode m) {
  return m == VariantMode::visual_matching ? "visual_matching" : "variant_aggregation";
}

std::optional<VariantMode> parse_mode(std::string_view name) {
  if (name == "visual_matching") return VariantMode::visual_matching;
  if (name == "variant_aggregation") return VariantMode::variant_aggregation;
  return std::nullopt;
}

void validate(const VariantSpec& v) {
  if (v.distractor_count < 0 || v.distractor_count > 4)
    throw ConfigError("distractor_count must be in [0, 4]");
  if (!(v.lighting >= 0.5 && v.lighting <= 1.5)) throw ConfigError("lighting must be in [0.5, 1.5]");
  if (v.mode == VariantMode::visual_matching &&
      (v.distractor_count != 0 || v.lighting != 1.0 || v.palette_jitter_seed != 0))
    throw ConfigError("visual_matching fixes distractors=0, lighting=1 and no palette jitter");
}

VariantSpec sample_variant(VariantMode mode, std::uint64_t seed) {
  if (mode == VariantMode::visual_matching) return VariantSpec::visual_matching();
  SplitMix64 rng(seed);
  VariantSpec v;
  v.mode = mode;
  v.distractor_count = static_cast<int>(rng.below(5));
  v.lighting = rng.uniform(0.5, 1.5);
  v.palette_jitter_seed = rng.next() | 1;
  v.layout_seed = rng.next();
  return v;
}

int Action::index() const { return (dx + 1) * 6 + (dy + 1) * 2 + (grip == Grip::close ? 1 : 0); }

Action Action::from_index(int index) {
  if (index < 0 || index >= kNumActions) throw IndexError("action index out of range: " + std::to_string(index));
  return Action{index / 6 - 1, (index / 2) % 3 - 1, (index % 2) ? Grip::close : Grip::open};
}

std::string Action::token() const {
  return "ACT_" + std::to_string(dx) + "_" + std::to_string(dy) + (grip == Grip::close ? "_close" : "_open");
}

// ---------------------------------------------------------------------------
// dynamics

int step_budget(const Scene& s) { return 4 * (s.grid_w + s.grid_h); }

Scene reset(const Task& task, const VariantSpec& variant, std::uint64_t seed, int grid_w, int grid_h) {
  validate(variant);
  if (task.source == task.destination) throw TaskError("task source and destination must differ");
  if (grid_w <= 0 || grid_h <= 0) throw ConfigError("grid extents must be positive");
  const std::size_t cells = static_cast<std::size_t>(grid_w) * static_cast<std::size_t>(grid_h);
  const std::size_t n_objects = 2 + static_cast<std::size_t>(variant.distractor_count);
  if (n_objects + 1 > cells)
    throw CapacityError("grid " + std::to_string(grid_w) + "x" + std::to_string(grid_h) + " cannot hold " +
                        std::to_string(n_objects) + " objects and the gripper");

  SplitMix64 rng(derive_seed(seed, variant.layout_seed));

  std::vector<Kind> pool;
  for (Kind k : kAllKinds)
    if (k != task.source && k != task.destination) pool.push_back(k);
  std::vector<Kind> kinds{task.source, task.destination};
  for (int i = 0; i < variant.distractor_count; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.below(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    kinds.push_back(pool[static_cast<std::size_t>(i)]);
  }

  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i <= n_objects; ++i) std::swap(order[i], order[i + rng.below(cells - i)]);
  auto cell_of = [&](std::size_t i) {
    return Cell{static_cast<int>(order[i] % static_cast<std::size_t>(grid_w)),
                static_cast<int>(order[i] / static_cast<std::size_t>(grid_w))};
  };

  Scene s;
  s.grid_w = grid_w;
  s.grid_h = grid_h;
  for (std::size_t i = 0; i < n_objects; ++i) s.objects.push_back(Object{static_cast<int>(i), kinds[i], cell_of(i)});
  s.gripper = cell_of(n_objects);
  return s;
}

StepResult step(const Scene& scene, const Action& action) {
  StepResult out{scene, false, false};
  Scene& s = out.scene;
  s.step_count += 1;
  s.gripper.x = std::clamp(s.gripper.x + action.dx, 0, s.grid_w - 1);
  s.gripper.y = std::clamp(s.gripper.y + action.dy, 0, s.grid_h - 1);

  auto object = [&](int id) -> Object* {
    for (auto& o : s.objects)
      if (o.id == id) return &o;
    return nullptr;
  };
  if (s.held) object(*s.held)->cell = s.gripper;

  Object* source = object(0);
  Object* destination = object(1);
  if (action.grip == Grip::close) {
    if (!s.held && source && source->cell == s.gripper) {
      s.held = source->id;
      out.grasped_now = true;
    }
  } else if (s.held) {
    Object* held = object(*s.held);
    if (destination && held->id == 0 && destination->cell == s.gripper) {
      s.held.reset();
      out.success_now = true;
    } else {
      // Dropping elsewhere is allowed unless it would stack two non-flat objects.
      const bool blocked =
          !is_flat(held->kind) && std::any_of(s.objects.begin(), s.objects.end(), [&](const Object& o) {
            return o.id != held->id && !is_flat(o.kind) && o.cell == s.gripper;
          });
      if (!blocked) s.held.reset();
    }
  }
  return out;
}

Tensor render(const Scene& s, const VariantSpec& variant) {
  const auto pal = palette_for(variant);
  const std::size_t W = static_cast<std::size_t>(s.grid_w * kPatch);
  const std::size_t H = static_cast<std::size_t>(s.grid_h * kPatch);
  Tensor img({H, W, 3});
  auto put = [&](std::size_t px, std::size_t py, const Rgb& c) {
    double* p = img.data().data() + (py * W + px) * 3;
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  };
  auto fill_cell = [&](Cell c, const Rgb& col, int inset) {
    for (int dy = inset; dy < kPatch - inset; ++dy)
      for (int dx = inset; dx < kPatch - inset; ++dx)
        put(static_cast<std::size_t>(c.x * kPatch + dx), static_cast<std::size_t>(c.y * kPatch + dy), col);
  };

  for (std::size_t py = 0; py < H; ++py)
    for (std::size_t px = 0; px < W; ++px) put(px, py, pal[kBackground]);
  auto is_held = [&](const Object& o) { return s.held && *s.held == o.id; };
  for (const auto& o : s.objects)
    if (is_flat(o.kind) && !is_held(o)) fill_cell(o.cell, pal[static_cast<std::size_t>(o.kind)], 0);
  for (const auto& o : s.objects)
    if (!is_flat(o.kind) && !is_held(o)) fill_cell(o.cell, pal[static_cast<std::size_t>(o.kind)], 1);
  for (const auto& o : s.objects)
    if (is_held(o)) fill_cell(o.cell, pal[static_cast<std::size_t>(o.kind)], 1);

  const Rgb border = s.held ? kGripperHolding : kGripperOpen;
  for (int d = 0; d < kPatch; ++d) {
    const std::size_t x0 = static_cast<std::size_t>(s.gripper.x * kPatch);
    const std::size_t y0 = static_cast<std::size_t>(s.gripper.y * kPatch);
    put(x0 + static_cast<std::size_t>(d), y0, border);
    put(x0 + static_cast<std::size_t>(d), y0 + kPatch - 1, border);
    put(x0, y0 + static_cast<std::size_t>(d), border);
    put(x0 + kPatch - 1, y0 + static_cast<std::size_t>(d), border);
  }

  for (double& v : img.data()) v = std::clamp(v * variant.lighting, 0.0, 1.0);
  return img;
}

Action expert_action(const Scene& s, const Task& task) {
  const Object* source = s.find(task.source);
  if (!source) throw TaskError("source object '" + std::string(kind_name(task.source)) + "' is not in the scene");
  const bool holding = s.held && *s.held == source->id;
  Cell target = source->cell;
  if (holding) {
    const Object* dest = s.find(task.destination);
    if (!dest)
      throw TaskError("destination object '" + std::string(kind_name(task.destination)) + "' is not in the scene");
    target = dest->cell;
  }
  const Grip carry = holding ? Grip::close : Grip::open;
  if (s.gripper == target) return Action{0, 0, holding ? Grip::open : Grip::close};
  if (s.gripper.x != target.x) return Action{sign(target.x - s.gripper.x), 0, carry};
  return Action{0, sign(target.y - s.gripper.y), carry};
}

int expert_step_bound(const Scene& s, const Task& task) {
  const Object* source = s.find(task.source);
  const Object* dest = s.find(task.destination);
  if (!source || !dest) throw TaskError("task objects missing from scene");
  auto manhattan = [](Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); };
  if (s.held && *s.held == source->id) return manhattan(s.gripper, dest->cell) + 1;
  return manhattan(s.gripper, source->cell) + 1 + manhattan(source->cell, dest->cell) + 1;
}

// ---------------------------------------------------------------------------
// serialization

nlohmann::json to_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"id", o.id}, {"kind", kind_name(o.kind)}, {"cell", {o.cell.x, o.cell.y}}});
  return {{"grid_w", s.grid_w},
          {"grid_h", s.grid_h},
          {"gripper", {s.gripper.x, s.gripper.y}},
          {"held", s.held ? nlohmann::json(*s.held) : nlohmann::json(nullptr)},
          {"objects", objs},
          {"step_count", s.step_count}};
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.grid_w = j.at("grid_w").get<int>();
  s.grid_h = j.at("grid_h").get<int>();
  s.gripper = Cell{j.at("gripper").at(0).get<int>(), j.at("gripper").at(1).get<int>()};
  if (!j.at("held").is_null()) s.held = j.at("held").get<int>();
  for (const auto& o : j.at("objects")) {
    auto kind = parse_kind(o.at("kind").get<std::string>());
    if (!kind) throw FormatError("unknown object kind " + o.at("kind").dump());
    s.objects.push_back(Object{o.at("id").get<int>(), *kind,
                               Cell{o.at("cell").at(0).get<int>(), o.at("cell").at(1).get<int>()}});
  }
  s.step_count = j.at("step_count").get<int>();
  validate(s);
  return s;
}

nlohmann::json to_json(const VariantSpec& v) {
  return {{"distractor_count", v.distractor_count},
          {"lighting", v.lighting},
          {"palette_jitter_seed", v.palette_jitter_seed},
          {"layout_seed", v.layout_seed},
          {"mode", mode_name(v.mode)}};
}

VariantSpec variant_from_json(const nlohmann::json& j) {
  VariantSpec v;
  v.distractor_count = j.at("distractor_count").get<int>();
  v.lighting = j.at("lighting").get<double>();
  v.palette_jitter_seed = j.at("palette_jitter_seed").get<std::uint64_t>();
  v.layout_seed = j.at("layout_seed").get<std::uint64_t>();
  auto mode = parse_mode(j.at("mode").get<std::string>());
  if (!mode) throw FormatError("unknown variant mode " + j.at("mode").dump());
  v.mode = *mode;
  validate(v);
  return v;
}

std::uint64_t scene_hash(const Scene& s) { return fnv1a64(to_json(s).dump()); }

}  // namespace rfvla::sim
