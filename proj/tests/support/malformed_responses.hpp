#pragma once

// Teacher replies that parse_and_validate must reject, paired with the error
// each one should raise. All are checked against malformed_scene().

#include <string>
#include <vector>

#include "rfvla/errors.hpp"
#include "rfvla/sim.hpp"
#include "rfvla/teacher.hpp"

namespace rfvla::testing {

enum class Rejection { format, hallucination, consistency };

struct MalformedResponse {
  std::string name;
  std::string text;
  Rejection expected;
};

inline sim::Scene malformed_scene() {
  sim::Scene s;
  s.objects = {{0, sim::Kind::spoon, {2, 3}}, {1, sim::Kind::towel, {5, 5}}, {2, sim::Kind::carrot, {0, 7}}};
  s.gripper = {1, 1};
  return s;
}

inline const std::vector<MalformedResponse>& malformed_responses() {
  static const std::vector<MalformedResponse> kCorpus{
      {"missing planning section",
       "Observation: spoon at (2, 3); towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon left_of towel; spoon above towel\n",
       Rejection::format},
      {"empty reply", "", Rejection::format},
      {"duplicated observation section",
       "Observation: spoon at (2, 3)\nObservation: towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon left_of towel\nTask Planning: move spoon; grasp spoon\n",
       Rejection::format},
      {"empty plan",
       "Observation: spoon at (2, 3); towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon left_of towel\nTask Planning: none\n",
       Rejection::format},
      {"plan step without a verb",
       "Observation: spoon at (2, 3); towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon left_of towel\nTask Planning: spoon towel; grasp spoon\n",
       Rejection::format},
      {"invented object kind",
       "Observation: spoon at (2, 3); banana at (4, 4)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon left_of towel\nTask Planning: move spoon; grasp spoon; move towel; release spoon\n",
       Rejection::hallucination},
      {"known kind absent from the scene",
       "Observation: spoon at (2, 3); towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: eggplant left_of towel\nTask Planning: move spoon; grasp spoon; move towel; release spoon\n",
       Rejection::hallucination},
      {"unknown entity in the plan",
       "Observation: spoon at (2, 3); towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon left_of towel\nTask Planning: move spoon; grasp fork; release spoon\n",
       Rejection::hallucination},
      {"wrong cell",
       "Observation: spoon at (3, 3); towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon left_of towel\nTask Planning: move spoon; grasp spoon; move towel; release spoon\n",
       Rejection::consistency},
      {"contradicted relation",
       "Observation: spoon at (2, 3); towel at (5, 5)\nSituation Analysis: put spoon on towel\n"
       "Spatial Reasoning: spoon right_of towel; spoon above towel\n"
       "Task Planning: move spoon; grasp spoon; move towel; release spoon\n",
       Rejection::consistency},
  };
  return kCorpus;
}

// Returns the rejection raised, or nothing when the text was accepted.
inline std::optional<Rejection> classify(const MalformedResponse& m, const data::Vocabulary& vocab) {
  try {
    teacher::parse_and_validate(m.text, malformed_scene(), vocab);
  } catch (const FormatError&) {
    return Rejection::format;
  } catch (const HallucinationError&) {
    return Rejection::hallucination;
  } catch (const ConsistencyError&) {
    return Rejection::consistency;
  }
  return std::nullopt;
}

}  // namespace rfvla::testing
