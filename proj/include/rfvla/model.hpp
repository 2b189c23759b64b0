#pragma once

// Tiny multimodal transformer policy.
//
// Sequence layout per sample:
//   [64 image patches][instruction][<SEP>][rationale][<ACT>]
// Image patches and instruction (and <SEP>) form a bidirectional prefix;
// everything after is causal. Logits at position t-1 predict token t, so
// <SEP>..last-rationale-1 predict the rationale and <ACT> predicts the action.
// Blocks are pre-norm: x += attn(ln1(x)); x += mlp(ln2(x)).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "rfvla/tape.hpp"
#include "rfvla/tensor.hpp"
#include "rfvla/vocab.hpp"

namespace rfvla::model {

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int dim = 64;
  int mlp_ratio = 4;
  int patch = 4;
  int grid_w = 8;
  int grid_h = 8;
  int channels = 3;
  int vocab_size = 0;
  int max_instruction = 8;
  int max_rationale = 40;
  int frozen_blocks = 2;
  bool freeze_embeddings = false;

  int num_patches() const { return grid_w * grid_h; }
  int patch_dim() const { return patch * patch * channels; }
  int max_seq() const { return num_patches() + max_instruction + 1 + max_rationale + 1; }
  void validate() const;  // ConfigError
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Param {
  std::string name;
  Tensor value;  // value.requires_grad() is the trainable flag
};

class ParamStore {
 public:
  void add(std::string name, Tensor value);
  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Param>::iterator begin() { return params_.begin(); }
  std::vector<Param>::iterator end() { return params_.end(); }
  std::vector<Param>::const_iterator begin() const { return params_.begin(); }
  std::vector<Param>::const_iterator end() const { return params_.end(); }

  std::size_t num_values() const;
  std::size_t num_trainable_values() const;
  void zero_grads();

  // Values and names only; trainable flags and grads are ignored.
  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Canonical order: patch_proj, tok_emb, pos_emb, patch_row, patch_col,
// blocks.0 .. blocks.L-1, ln_f, head. Patch tokens add a learned row and
// column embedding on top of pos_emb. Weights N(0, 0.02), norm gains 1,
// biases and offsets 0.
ParamStore init_params(const ModelConfig& config, std::uint64_t seed);
// Same shapes, every value zero.
ParamStore zero_params(const ModelConfig& config);

// Blocks below K are frozen. Embeddings and the patch projection are frozen
// when freeze_embeddings is set or K == L. ln_f and head always train.
void apply_freeze(ParamStore& params, int layers, int frozen_blocks, bool freeze_embeddings);
inline void apply_freeze(ParamStore& params, const ModelConfig& c) {
  apply_freeze(params, c.layers, c.frozen_blocks, c.freeze_embeddings);
}
bool is_embedding_param(const std::string& name);
// -1 for parameters outside the blocks.
int block_of(const std::string& name);

// Image [grid_h*patch, grid_w*patch, channels] to patch rows
// [grid_w*grid_h, patch_dim], row index y*grid_w + x.
Tensor patchify(const Tensor& image, const ModelConfig& config);

struct Sample {
  const Tensor* image = nullptr;
  std::span<const int> instruction;
  std::span<const int> rationale;  // teacher-forced input tokens
  bool with_act = true;
};

struct SampleLayout {
  std::size_t offset = 0;  // first row of this sample in the batch
  std::size_t length = 0;
  std::size_t prefix = 0;  // patches + instruction + <SEP>
  std::size_t sep = 0;     // position of <SEP>
  std::size_t rationale = 0;
  bool with_act = false;
  std::size_t act() const { return sep + rationale + 1; }
};

struct SampleAttention {
  // [layer][head], each [T x T]; `scores` are the scaled pre-mask logits.
  std::vector<std::vector<Tensor>> probs;
  std::vector<std::vector<Tensor>> scores;
};

struct ForwardOptions {
  bool rationale_logits = true;  // rows predicting each rationale token
  bool last_logits = false;      // one row at each sample's final position
  bool capture_attention = false;
};

struct ForwardOutput {
  std::vector<SampleLayout> layout;
  Var rationale_logits;  // [sum rationale lengths x V], samples in order
  std::vector<std::size_t> rationale_offsets;
  Var action_logits;  // [samples with <ACT> x V]
  Var last_logits;    // [B x V]
  std::vector<SampleAttention> attention;
};

// Binds every parameter as a tape leaf.
std::vector<Var> bind(Tape& tape, ParamStore& params);
// Binds copies of the values as constants, for passes without gradients.
std::vector<Var> bind_values(Tape& tape, const ParamStore& params);

// LengthError when a sequence exceeds the configured budgets.
ForwardOutput forward(Tape& tape, std::span<const Var> bound, const ModelConfig& config,
                      const data::Vocabulary& vocab, std::span<const Sample> batch,
                      const ForwardOptions& options = {});

// Greedy decode after <SEP>, stopping at <EOS> (included) or max_len.
std::vector<int> generate_rationale(const ParamStore& params, const ModelConfig& config,
                                    const data::Vocabulary& vocab, const Tensor& image,
                                    std::span<const int> instruction, int max_len);

// Argmax over the action block at <ACT>, lowest id on ties.
int argmax_action(std::span<const double> logits_row, const data::Vocabulary& vocab);
int predict_action(const ParamStore& params, const ModelConfig& config, const data::Vocabulary& vocab,
                   const Tensor& image, std::span<const int> instruction, std::span<const int> rationale);
// Generates the rationale first, then decodes the action.
int predict_action(const ParamStore& params, const ModelConfig& config, const data::Vocabulary& vocab,
                   const Tensor& image, std::span<const int> instruction);

enum class QuerySpan { action, rationale };

// Attention from the query span onto the patch keys, renormalized over the
// patches: [layer][head] of [Q x num_patches]. SpanError for an empty span.
std::vector<std::vector<Tensor>> extract_attention(const ForwardOutput& out, std::size_t sample, QuerySpan span,
                                                   int num_patches);

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  std::string vocab_hash;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "RFVL", u32 version, u64 header length, JSON header, f32 LE parameters.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
// Verifies magic, version and parameter count; CompatibilityError when
// `expected_vocab_hash` is given and differs. Freeze flags follow the config.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<std::string>& expected_vocab_hash = std::nullopt);

}  // namespace rfvla::model
