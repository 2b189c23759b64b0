#include <algorithm>
#include <array>
#include <cctype>
#include <regex>
#include <sstream>

#include "rfvla/errors.hpp"
#include "rfvla/teacher.hpp"

namespace rfvla::teacher {
namespace {

using sim::Kind;

constexpr std::array<std::string_view, 3> kVerbs{"move", "grasp", "release"};

bool is_verb(std::string_view w) { return std::find(kVerbs.begin(), kVerbs.end(), w) != kVerbs.end(); }

std::string kind_str(Kind k) { return std::string(sim::kind_name(k)); }

bool is_marker(const data::Vocabulary& v, int id) {
  return id == v.obs() || id == v.sit() || id == v.spa() || id == v.plan() || id == v.eos() || id == v.pad() ||
         id == v.bos() || id == v.sep() || id == v.act() || v.is_action(id);
}

int digit_id(const data::Vocabulary& vocab, int value) {
  if (value < 0 || value > 9) throw VocabError("coordinate " + std::to_string(value) + " has no digit token");
  return vocab.id(std::string(1, static_cast<char>('0' + value)));
}

int digit_value(const data::Vocabulary& vocab, int id) {
  const std::string& t = vocab.token(id);
  if (t.size() != 1 || !std::isdigit(static_cast<unsigned char>(t[0])))
    throw FormatError("expected a coordinate digit, found '" + t + "'");
  return t[0] - '0';
}

Kind kind_token(const data::Vocabulary& vocab, int id) {
  auto k = sim::parse_kind(vocab.token(id));
  if (!k) throw FormatError("expected an object kind, found '" + vocab.token(id) + "'");
  return *k;
}

void check_plan_step(const std::vector<std::string>& step) {
  if (step.empty() || !is_verb(step.front())) throw FormatError("plan step must start with move, grasp or release");
  for (std::size_t i = 1; i < step.size(); ++i)
    if (is_verb(step[i])) throw FormatError("plan step contains a second verb '" + step[i] + "'");
}

// ---- text helpers --------------------------------------------------------

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

// Lower-cases and folds the phrasings a language model tends to use back
// onto vocabulary words.
std::string normalize_item(std::string_view raw) {
  std::string s = lower(trim(raw));
  static const std::regex kNumbering(R"(^(step\s*)?\d+\s*[.):-]\s*)");
  s = std::regex_replace(s, kNumbering, "");
  while (!s.empty() && (s.back() == '.' || s.back() == ',')) s.pop_back();
  replace_all(s, "left of", "left_of");
  replace_all(s, "right of", "right_of");
  replace_all(s, "green block", "green_block");
  replace_all(s, "yellow block", "yellow_block");
  return trim(s);
}

std::vector<std::string> words_of(std::string_view item) {
  static const std::array<std::string_view, 5> kFillers{"the", "a", "an", "to", "is"};
  std::istringstream is{std::string(item)};
  std::vector<std::string> out;
  std::string w;
  while (is >> w)
    if (std::find(kFillers.begin(), kFillers.end(), w) == kFillers.end()) out.push_back(w);
  return out;
}

std::vector<std::string> split_items(const std::string& content) {
  std::vector<std::string> items;
  std::string cur;
  for (char c : content) {
    if (c == ';' || c == '\n') {
      if (!trim(cur).empty()) items.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) items.push_back(trim(cur));
  if (items.size() == 1 && lower(items[0]) == "none") items.clear();
  return items;
}

Kind kind_word(std::string_view w) {
  auto k = sim::parse_kind(w);
  if (!k) throw HallucinationError("unknown object '" + std::string(w) + "'");
  return *k;
}

// Every non-structural word must be known; unknown ones name entities the
// teacher invented.
void require_known_word(const data::Vocabulary& vocab, const std::string& w) {
  if (!vocab.find(w)) throw HallucinationError("unknown entity '" + w + "'");
}

}  // namespace

std::string_view relation_name(Relation r) {
  switch (r) {
    case Relation::left_of: return "left_of";
    case Relation::right_of: return "right_of";
    case Relation::above: return "above";
    case Relation::below: return "below";
    case Relation::on: return "on";
    case Relation::at: return "at";
  }
  return "?";
}

std::optional<Relation> parse_relation(std::string_view name) {
  for (Relation r : {Relation::left_of, Relation::right_of, Relation::above, Relation::below, Relation::on,
                     Relation::at})
    if (relation_name(r) == name) return r;
  return std::nullopt;
}

RationaleRecord oracle_annotate(const sim::Scene& scene, const sim::Task& task) {
  const sim::Object* src = scene.find(task.source);
  const sim::Object* dst = scene.find(task.destination);
  if (!src || !dst) throw TaskError("task objects missing from scene for '" + task.name() + "'");

  RationaleRecord r;
  r.observation = {{src->kind, src->cell}, {dst->kind, dst->cell}};
  r.situation = task.instruction_words();
  const int dx = src->cell.x - dst->cell.x;
  const int dy = src->cell.y - dst->cell.y;
  if (dx < 0) r.spatial.push_back({src->kind, Relation::left_of, dst->kind});
  if (dx > 0) r.spatial.push_back({src->kind, Relation::right_of, dst->kind});
  if (dy < 0) r.spatial.push_back({src->kind, Relation::above, dst->kind});
  if (dy > 0) r.spatial.push_back({src->kind, Relation::below, dst->kind});
  if (dx == 0 && dy == 0)
    r.spatial.push_back({src->kind, sim::is_flat(dst->kind) ? Relation::on : Relation::at, dst->kind});
  const std::string s = kind_str(src->kind), d = kind_str(dst->kind);
  r.plan = {{"move", s}, {"grasp", s}, {"move", d}, {"release", s, "on", d}};
  return r;
}

std::vector<int> serialize_rationale(const RationaleRecord& r, const data::Vocabulary& vocab) {
  std::vector<int> ids{vocab.obs()};
  for (const auto& m : r.observation) {
    ids.push_back(vocab.id(sim::kind_name(m.kind)));
    ids.push_back(digit_id(vocab, m.cell.x));
    ids.push_back(digit_id(vocab, m.cell.y));
  }
  ids.push_back(vocab.sit());
  for (const auto& w : r.situation) {
    const int id = vocab.id(w);
    if (is_marker(vocab, id)) throw FormatError("situation cannot contain the marker '" + w + "'");
    ids.push_back(id);
  }
  ids.push_back(vocab.spa());
  for (const auto& f : r.spatial) {
    ids.push_back(vocab.id(sim::kind_name(f.subject)));
    ids.push_back(vocab.id(relation_name(f.relation)));
    ids.push_back(vocab.id(sim::kind_name(f.object)));
  }
  ids.push_back(vocab.plan());
  for (const auto& step : r.plan) {
    check_plan_step(step);
    for (const auto& w : step) {
      const int id = vocab.id(w);
      if (is_marker(vocab, id)) throw FormatError("plan cannot contain the marker '" + w + "'");
      ids.push_back(id);
    }
  }
  ids.push_back(vocab.eos());
  return ids;
}

RationaleRecord parse_rationale(std::span<const int> ids, const data::Vocabulary& vocab) {
  const std::array<int, 5> markers{vocab.obs(), vocab.sit(), vocab.spa(), vocab.plan(), vocab.eos()};
  std::array<std::size_t, 5> pos{};
  std::size_t next = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto it = std::find(markers.begin(), markers.end(), ids[i]);
    if (it == markers.end()) continue;
    const auto which = static_cast<std::size_t>(it - markers.begin());
    if (which != next) throw FormatError("rationale section markers out of order");
    pos[next++] = i;
  }
  if (next != markers.size() || pos[0] != 0 || pos[4] + 1 != ids.size())
    throw FormatError("rationale must be <OBS> ... <SIT> ... <SPA> ... <PLAN> ... <EOS>");
  auto section = [&](std::size_t k) { return ids.subspan(pos[k] + 1, pos[k + 1] - pos[k] - 1); };

  RationaleRecord r;
  auto obs = section(0);
  if (obs.size() % 3) throw FormatError("observation section is not (kind x y) triples");
  for (std::size_t i = 0; i < obs.size(); i += 3)
    r.observation.push_back({kind_token(vocab, obs[i]), {digit_value(vocab, obs[i + 1]), digit_value(vocab, obs[i + 2])}});

  for (int id : section(1)) {
    if (is_marker(vocab, id)) throw FormatError("unexpected marker in situation");
    r.situation.push_back(vocab.token(id));
  }

  auto spa = section(2);
  if (spa.size() % 3) throw FormatError("spatial section is not (kind relation kind) triples");
  for (std::size_t i = 0; i < spa.size(); i += 3) {
    auto rel = parse_relation(vocab.token(spa[i + 1]));
    if (!rel) throw FormatError("unknown relation '" + vocab.token(spa[i + 1]) + "'");
    r.spatial.push_back({kind_token(vocab, spa[i]), *rel, kind_token(vocab, spa[i + 2])});
  }

  for (int id : section(3)) {
    if (is_marker(vocab, id)) throw FormatError("unexpected marker in plan");
    const std::string& w = vocab.token(id);
    if (is_verb(w)) r.plan.emplace_back();
    if (r.plan.empty()) throw FormatError("plan must start with a verb");
    r.plan.back().push_back(w);
  }
  return r;
}

void validate_rationale(const RationaleRecord& r, const sim::Scene& scene) {
  auto present = [&](Kind k) -> const sim::Object& {
    const sim::Object* o = scene.find(k);
    if (!o) throw HallucinationError("rationale mentions '" + kind_str(k) + "', which is not in the scene");
    return *o;
  };
  for (const auto& m : r.observation) {
    const auto& o = present(m.kind);
    if (!(o.cell == m.cell))
      throw ConsistencyError(kind_str(m.kind) + " is observed at (" + std::to_string(m.cell.x) + ", " +
                             std::to_string(m.cell.y) + ") but lies at (" + std::to_string(o.cell.x) + ", " +
                             std::to_string(o.cell.y) + ")");
  }
  for (const auto& w : r.situation)
    if (auto k = sim::parse_kind(w)) present(*k);
  for (const auto& f : r.spatial) {
    const auto& a = present(f.subject);
    const auto& b = present(f.object);
    bool holds = false;
    switch (f.relation) {
      case Relation::left_of: holds = a.cell.x < b.cell.x; break;
      case Relation::right_of: holds = a.cell.x > b.cell.x; break;
      case Relation::above: holds = a.cell.y < b.cell.y; break;
      case Relation::below: holds = a.cell.y > b.cell.y; break;
      case Relation::on:
      case Relation::at: holds = a.cell == b.cell; break;
    }
    if (!holds)
      throw ConsistencyError("'" + kind_str(f.subject) + " " + std::string(relation_name(f.relation)) + " " +
                             kind_str(f.object) + "' contradicts the scene");
  }
  if (r.plan.empty()) throw FormatError("plan is empty");
  for (const auto& step : r.plan) {
    check_plan_step(step);
    for (const auto& w : step)
      if (auto k = sim::parse_kind(w)) present(*k);
  }
}

std::string format_rationale_text(const RationaleRecord& r) {
  std::ostringstream os;
  auto join = [&](const auto& items, auto&& fmt) {
    if (items.empty()) {
      os << "none";
      return;
    }
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (i) os << "; ";
      fmt(items[i]);
    }
  };
  os << kObservationHeader << ' ';
  join(r.observation, [&](const Mention& m) {
    os << sim::kind_name(m.kind) << " at (" << m.cell.x << ", " << m.cell.y << ")";
  });
  os << '\n' << kSituationHeader << ' ';
  if (r.situation.empty()) os << "none";
  for (std::size_t i = 0; i < r.situation.size(); ++i) os << (i ? " " : "") << r.situation[i];
  os << '\n' << kSpatialHeader << ' ';
  join(r.spatial, [&](const SpatialFact& f) {
    os << sim::kind_name(f.subject) << ' ' << relation_name(f.relation) << ' ' << sim::kind_name(f.object);
  });
  os << '\n' << kPlanningHeader << ' ';
  join(r.plan, [&](const std::vector<std::string>& step) {
    for (std::size_t i = 0; i < step.size(); ++i) os << (i ? " " : "") << step[i];
  });
  os << '\n';
  return os.str();
}

std::string describe_scene(const sim::Scene& scene) {
  std::ostringstream os;
  os << "grid " << scene.grid_w << "x" << scene.grid_h << "; gripper at (" << scene.gripper.x << ", "
     << scene.gripper.y << ")";
  if (scene.held) {
    if (const auto* h = scene.find_id(*scene.held)) os << " holding " << sim::kind_name(h->kind);
  }
  for (const auto& o : scene.objects)
    os << "; " << sim::kind_name(o.kind) << " at (" << o.cell.x << ", " << o.cell.y << ")";
  return os.str();
}

TeacherPrompt render_prompt(std::string_view scene_description, std::string_view instruction) {
  if (scene_description.empty() || instruction.empty())
    throw ConfigError("teacher prompt needs a scene description and an instruction");
  std::ostringstream os;
  os << "You are explaining a robot manipulation demonstration step by step.\n"
     << "Scene (cells are (x, y), x grows rightwards, y grows downwards): " << scene_description << "\n"
     << "Instruction: " << instruction << "\n"
     << "Answer each question on a line that begins with its header. Separate items with ';'.\n"
     << kObservationHeader << " Which task-relevant objects do you see, and at which cells? (kind at (x, y))\n"
     << kSituationHeader << " Restate what the instruction asks the robot to do.\n"
     << kSpatialHeader
     << " How is the object to move positioned relative to its target? "
        "(subject left_of|right_of|above|below|on|at object)\n"
     << kPlanningHeader << " List the steps, each starting with move, grasp or release.\n";
  return TeacherPrompt{os.str()};
}

RationaleRecord parse_and_validate(std::string_view raw, const sim::Scene& scene, const data::Vocabulary& vocab) {
  constexpr std::array<std::string_view, 4> kHeaders{kObservationHeader, kSituationHeader, kSpatialHeader,
                                                     kPlanningHeader};
  std::array<std::optional<std::string>, 4> content;
  std::optional<std::size_t> current;

  std::istringstream lines{std::string(raw)};
  std::string line;
  while (std::getline(lines, line)) {
    std::string stripped = trim(line);
    while (!stripped.empty() && (stripped[0] == '#' || stripped[0] == '*' || stripped[0] == '-'))
      stripped = trim(stripped.substr(1));
    replace_all(stripped, "**", "");
    const std::string low = lower(stripped);
    bool header = false;
    for (std::size_t h = 0; h < kHeaders.size(); ++h) {
      const std::string hl = lower(kHeaders[h]);
      if (low.rfind(hl, 0) == 0) {
        if (content[h]) throw FormatError("section '" + std::string(kHeaders[h]) + "' appears twice");
        content[h] = stripped.substr(hl.size());
        current = h;
        header = true;
        break;
      }
    }
    if (!header && current) *content[*current] += "\n" + stripped;
  }
  for (std::size_t h = 0; h < kHeaders.size(); ++h)
    if (!content[h]) throw FormatError("missing section '" + std::string(kHeaders[h]) + "'");

  RationaleRecord r;
  static const std::regex kMention(R"(^([a-z_]+)\s+(?:at\s+)?\(\s*(\d+)\s*,\s*(\d+)\s*\)$)");
  for (const auto& item : split_items(*content[0])) {
    std::string s;
    for (const auto& w : words_of(normalize_item(item))) s += (s.empty() ? "" : " ") + w;
    std::smatch m;
    if (!std::regex_match(s, m, kMention)) throw FormatError("cannot read observation item '" + item + "'");
    r.observation.push_back({kind_word(m[1].str()), {std::stoi(m[2].str()), std::stoi(m[3].str())}});
  }

  for (const auto& item : split_items(*content[1]))
    for (auto& w : words_of(normalize_item(item))) {
      require_known_word(vocab, w);
      r.situation.push_back(w);
    }

  for (const auto& item : split_items(*content[2])) {
    const auto w = words_of(normalize_item(item));
    if (w.size() != 3) throw FormatError("spatial item must be 'subject relation object': '" + item + "'");
    auto rel = parse_relation(w[1]);
    if (!rel) throw FormatError("unknown relation '" + w[1] + "'");
    r.spatial.push_back({kind_word(w[0]), *rel, kind_word(w[2])});
  }

  for (const auto& item : split_items(*content[3])) {
    auto w = words_of(normalize_item(item));
    for (const auto& x : w) require_known_word(vocab, x);
    check_plan_step(w);
    r.plan.push_back(std::move(w));
  }

  validate_rationale(r, scene);
  // The record must also be expressible in the token space.
  serialize_rationale(r, vocab);
  return r;
}

}  // namespace rfvla::teacher
