#include <set>

#include "doctest.h"
#include "rfvla/errors.hpp"
#include "rfvla/vocab.hpp"

using namespace rfvla;
using data::Vocabulary;

TEST_CASE("standard vocabulary") {
  const Vocabulary& v = Vocabulary::standard();
  SUBCASE("ids are a bijection") {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(v.id(v.token(static_cast<int>(i))) == static_cast<int>(i));
      seen.insert(v.token(static_cast<int>(i)));
    }
    CHECK(seen.size() == v.size());
  }
  SUBCASE("action block is contiguous in action order") {
    CHECK(v.action_end() - v.action_begin() == sim::kNumActions);
    for (int i = 0; i < sim::kNumActions; ++i) {
      const auto a = sim::Action::from_index(i);
      CHECK(v.action_id(a) == v.action_begin() + i);
      CHECK(v.action_of(v.action_id(a)) == a);
      CHECK(v.token(v.action_id(a)) == a.token());
    }
    CHECK_FALSE(v.is_action(v.eos()));
    CHECK_THROWS_AS(v.action_of(v.eos()), VocabError);
  }
  SUBCASE("tokenize and detokenize") {
    const auto ids = v.tokenize("put spoon on towel");
    CHECK(ids.size() == 4);
    CHECK(v.detokenize(ids) == "put spoon on towel");
    CHECK_THROWS_AS(v.tokenize("put banana on towel"), VocabError);
    CHECK_THROWS_AS(v.token(-1), VocabError);
  }
  SUBCASE("json round trip keeps the hash") {
    const auto j = v.to_json();
    const Vocabulary back = Vocabulary::from_json(nlohmann::json::parse(j.dump()));
    CHECK(back == v);
    CHECK(back.hash() == v.hash());
  }
  SUBCASE("tampered token list fails the hash check") {
    auto j = v.to_json();
    j["tokens"][v.size() - 1] = "zzz";
    CHECK_THROWS_AS(Vocabulary::from_json(j), ManifestError);
    auto k = v.to_json();
    k["format_version"] = 99;
    CHECK_THROWS_AS(Vocabulary::from_json(k), VersionError);
  }
}

TEST_CASE("vocabulary construction errors") {
  CHECK_THROWS_AS(Vocabulary({"<PAD>", "<PAD>"}), VocabError);
  CHECK_THROWS_AS(Vocabulary({"a", "b"}), VocabError);
}
