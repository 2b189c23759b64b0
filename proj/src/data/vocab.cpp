#include "rfvla/vocab.hpp"

#include <sstream>

#include "rfvla/errors.hpp"
#include "rfvla/hash.hpp"

namespace rfvla::data {
namespace {

std::vector<std::string> standard_tokens() {
  std::vector<std::string> t{"<PAD>", "<BOS>", "<EOS>", "<SEP>", "<OBS>", "<SIT>", "<SPA>", "<PLAN>", "<ACT>"};
  for (int i = 0; i < sim::kNumActions; ++i) t.push_back(sim::Action::from_index(i).token());
  for (sim::Kind k : sim::kAllKinds) t.emplace_back(sim::kind_name(k));
  for (const char* w : {"left_of", "right_of", "above", "below", "on", "at"}) t.emplace_back(w);
  for (const char* w : {"put", "move", "grasp", "release"}) t.emplace_back(w);
  for (char d = '0'; d <= '9'; ++d) t.emplace_back(1, d);
  return t;
}

}  // namespace

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary kStandard(standard_tokens());
  return kStandard;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw VocabError("empty token at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw VocabError("duplicate token '" + tokens_[i] + "'");
  }
  auto need = [&](const char* t) {
    auto it = index_.find(t);
    if (it == index_.end()) throw VocabError(std::string("vocabulary lacks special token ") + t);
    return it->second;
  };
  pad_ = need("<PAD>");
  bos_ = need("<BOS>");
  eos_ = need("<EOS>");
  sep_ = need("<SEP>");
  obs_ = need("<OBS>");
  sit_ = need("<SIT>");
  spa_ = need("<SPA>");
  plan_ = need("<PLAN>");
  act_ = need("<ACT>");
  action_begin_ = need(sim::Action::from_index(0).token().c_str());
  for (int i = 0; i < sim::kNumActions; ++i) {
    auto it = index_.find(sim::Action::from_index(i).token());
    if (it == index_.end() || it->second != action_begin_ + i)
      throw VocabError("action tokens must form a contiguous block in index order");
  }
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view token) const {
  auto v = find(token);
  if (!v) throw VocabError("out-of-vocabulary word '" + std::string(token) + "'");
  return *v;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw VocabError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

sim::Action Vocabulary::action_of(int id) const {
  if (!is_action(id)) throw VocabError("id " + std::to_string(id) + " is not an action token");
  return sim::Action::from_index(id - action_begin_);
}

std::vector<int> Vocabulary::encode(std::span<const std::string> words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(id(w));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> words;
  words.reserve(ids.size());
  for (int i : ids) words.push_back(token(i));
  return words;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::istringstream is{std::string(text)};
  std::vector<int> ids;
  std::string w;
  while (is >> w) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::string Vocabulary::hash() const {
  std::uint64_t h = fnv1a64("");
  for (const auto& t : tokens_) {
    h = fnv1a64(t, h);
    h = fnv1a64("\n", h);
  }
  return hex64(h);
}

nlohmann::json Vocabulary::to_json() const {
  return {{"format_version", kVocabFormatVersion}, {"hash", hash()}, {"tokens", tokens_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  if (j.at("format_version").get<int>() != kVocabFormatVersion)
    throw VersionError("unsupported vocabulary format version " + j.at("format_version").dump());
  Vocabulary v(j.at("tokens").get<std::vector<std::string>>());
  if (j.contains("hash") && j.at("hash").get<std::string>() != v.hash())
    throw ManifestError("vocabulary hash does not match its token list");
  return v;
}

}  // namespace rfvla::data
