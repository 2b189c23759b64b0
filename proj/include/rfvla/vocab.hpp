#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "rfvla/sim.hpp"

namespace rfvla::data {

// Token <-> id bijection shared by instructions, rationales and actions.
//
// Ids are contiguous from 0. The 18 action tokens occupy one contiguous
// block, ordered by sim::Action::index().
class Vocabulary {
 public:
  // Specials, actions, object kinds, relations, verbs, digits.
  static const Vocabulary& standard();

  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<int> find(std::string_view token) const;
  int id(std::string_view token) const;  // VocabError when absent
  const std::string& token(int id) const;

  int pad() const { return pad_; }
  int bos() const { return bos_; }
  int eos() const { return eos_; }
  int sep() const { return sep_; }
  int obs() const { return obs_; }
  int sit() const { return sit_; }
  int spa() const { return spa_; }
  int plan() const { return plan_; }
  int act() const { return act_; }

  int action_begin() const { return action_begin_; }
  int action_end() const { return action_begin_ + sim::kNumActions; }
  bool is_action(int id) const { return id >= action_begin() && id < action_end(); }
  int action_id(const sim::Action& a) const { return action_begin_ + a.index(); }
  sim::Action action_of(int id) const;

  std::vector<int> encode(std::span<const std::string> words) const;
  std::vector<std::string> decode(std::span<const int> ids) const;
  // Whitespace tokenization; detokenize(tokenize(t)) == t for single-spaced text.
  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;

  // FNV-1a over the newline-joined token list, as 16 hex digits.
  std::string hash() const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int pad_, bos_, eos_, sep_, obs_, sit_, spa_, plan_, act_;
  int action_begin_;
};

inline constexpr int kVocabFormatVersion = 1;

}  // namespace rfvla::data
