#include "rfvla/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "rfvla/errors.hpp"
#include "rfvla/rng.hpp"

namespace rfvla::model {
namespace {

constexpr double kMasked = -1e9;
constexpr std::size_t kPerBlock = 12;
constexpr std::size_t kLeading = 6;  // patch_proj.w, patch_proj.b, tok_emb, pos_emb, patch_row, patch_col

std::size_t expected_params(const ModelConfig& c) { return kLeading + kPerBlock * static_cast<std::size_t>(c.layers) + 4; }

struct Names {
  std::size_t block(int l, std::size_t k) const { return kLeading + kPerBlock * static_cast<std::size_t>(l) + k; }
  std::size_t tail(const ModelConfig& c, std::size_t k) const {
    return kLeading + kPerBlock * static_cast<std::size_t>(c.layers) + k;
  }
};
// Offsets within a block, in canonical order.
enum BlockParam : std::size_t { ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 };
enum TailParam : std::size_t { lnf_g, lnf_b, head_w, head_b };

Tensor prefix_lm_mask(std::size_t length, std::size_t prefix) {
  Tensor m({length, length});
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j < length; ++j) {
      const bool visible = j < prefix || j <= i;
      if (!visible) m.at(i, j) = kMasked;
    }
  return m;
}

int argmax_range(std::span<const double> row, int begin, int end) {
  int best = begin;
  for (int i = begin + 1; i < end; ++i)
    if (row[static_cast<std::size_t>(i)] > row[static_cast<std::size_t>(best)]) best = i;
  return best;
}

ForwardOutput infer(const ParamStore& params, const ModelConfig& config, const data::Vocabulary& vocab,
                    Tape& tape, const Sample& sample, const ForwardOptions& options) {
  const auto bound = bind_values(tape, params);
  return forward(tape, bound, config, vocab, std::span<const Sample>(&sample, 1), options);
}

}  // namespace

// ---------------------------------------------------------------------------
// config

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  need(layers >= 1, "layers must be at least 1");
  need(heads >= 1 && dim >= 1 && dim % heads == 0, "dim must be a positive multiple of heads");
  need(mlp_ratio >= 1, "mlp_ratio must be at least 1");
  need(patch >= 1 && grid_w >= 1 && grid_h >= 1 && channels >= 1, "image geometry must be positive");
  need(vocab_size >= 1, "vocab_size must be set");
  need(max_instruction >= 0 && max_rationale >= 0, "sequence budgets must be non-negative");
  need(frozen_blocks >= 0, "frozen_blocks must be non-negative");
  need(frozen_blocks <= layers,
       "frozen_blocks " + std::to_string(frozen_blocks) + " exceeds layers " + std::to_string(layers));
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"dim", c.dim},
          {"mlp_ratio", c.mlp_ratio},
          {"patch", c.patch},
          {"grid_w", c.grid_w},
          {"grid_h", c.grid_h},
          {"channels", c.channels},
          {"vocab_size", c.vocab_size},
          {"max_instruction", c.max_instruction},
          {"max_rationale", c.max_rationale},
          {"frozen_blocks", c.frozen_blocks},
          {"freeze_embeddings", c.freeze_embeddings}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("layers", c.layers);
  get("heads", c.heads);
  get("dim", c.dim);
  get("mlp_ratio", c.mlp_ratio);
  get("patch", c.patch);
  get("grid_w", c.grid_w);
  get("grid_h", c.grid_h);
  get("channels", c.channels);
  get("vocab_size", c.vocab_size);
  get("max_instruction", c.max_instruction);
  get("max_rationale", c.max_rationale);
  get("frozen_blocks", c.frozen_blocks);
  get("freeze_embeddings", c.freeze_embeddings);
  return c;
}

// ---------------------------------------------------------------------------
// parameters

void ParamStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(value)});
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter named " + name);
  return params_[it->second].value;
}

const Tensor& ParamStore::get(const std::string& name) const { return const_cast<ParamStore*>(this)->get(name); }

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ParamStore::num_trainable_values() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.value.requires_grad()) n += p.value.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_)
    if (p.value.requires_grad()) p.value.zero_grad();
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i)
    if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
  return true;
}

namespace {

template <typename Fill>
ParamStore build_params(const ModelConfig& c, Fill&& fill) {
  c.validate();
  const std::size_t d = static_cast<std::size_t>(c.dim);
  const std::size_t hidden = d * static_cast<std::size_t>(c.mlp_ratio);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  ParamStore ps;
  auto weight = [&](std::string name, Shape shape) { ps.add(name, fill(ps.size(), std::move(shape), 'w')); };
  auto ones = [&](std::string name, std::size_t n) { ps.add(name, fill(ps.size(), Shape{n}, '1')); };
  auto zeros = [&](std::string name, std::size_t n) { ps.add(name, fill(ps.size(), Shape{n}, '0')); };

  weight("patch_proj.w", {static_cast<std::size_t>(c.patch_dim()), d});
  zeros("patch_proj.b", d);
  weight("tok_emb", {v, d});
  weight("pos_emb", {static_cast<std::size_t>(c.max_seq()), d});
  weight("patch_row", {static_cast<std::size_t>(c.grid_h), d});
  weight("patch_col", {static_cast<std::size_t>(c.grid_w), d});
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    ones(p + "ln1.g", d);
    zeros(p + "ln1.b", d);
    weight(p + "attn.wqkv", {d, 3 * d});
    zeros(p + "attn.bqkv", 3 * d);
    weight(p + "attn.wo", {d, d});
    zeros(p + "attn.bo", d);
    ones(p + "ln2.g", d);
    zeros(p + "ln2.b", d);
    weight(p + "mlp.w1", {d, hidden});
    zeros(p + "mlp.b1", hidden);
    weight(p + "mlp.w2", {hidden, d});
    zeros(p + "mlp.b2", d);
  }
  ones("ln_f.g", d);
  zeros("ln_f.b", d);
  weight("head.w", {d, v});
  zeros("head.b", v);
  for (auto& p : ps) p.value.set_requires_grad(true);
  return ps;
}

}  // namespace

ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  ParamStore ps = build_params(config, [seed](std::size_t index, Shape shape, char kind) {
    Tensor t(std::move(shape), kind == '1' ? 1.0 : 0.0);
    if (kind == 'w') {
      SplitMix64 rng(derive_seed(seed, index));
      for (double& x : t.data()) x = 0.02 * rng.normal();
    }
    return t;
  });
  apply_freeze(ps, config);
  return ps;
}

ParamStore zero_params(const ModelConfig& config) {
  ParamStore ps = build_params(config, [](std::size_t, Shape shape, char) { return Tensor(std::move(shape)); });
  apply_freeze(ps, config);
  return ps;
}

bool is_embedding_param(const std::string& name) {
  return name.rfind("patch_proj.", 0) == 0 || name == "tok_emb" || name == "pos_emb" ||
         name == "patch_row" || name == "patch_col";
}

int block_of(const std::string& name) {
  if (name.rfind("blocks.", 0) != 0) return -1;
  return std::stoi(name.substr(7, name.find('.', 7) - 7));
}

void apply_freeze(ParamStore& params, int layers, int frozen_blocks, bool freeze_embeddings) {
  if (frozen_blocks < 0 || frozen_blocks > layers)
    throw ConfigError("cannot freeze " + std::to_string(frozen_blocks) + " of " + std::to_string(layers) + " blocks");
  const bool embeddings_frozen = freeze_embeddings || frozen_blocks == layers;
  for (auto& p : params) {
    const int b = block_of(p.name);
    bool frozen = false;
    if (b >= 0) frozen = b < frozen_blocks;
    else if (is_embedding_param(p.name)) frozen = embeddings_frozen;
    p.value.set_requires_grad(!frozen);
    if (frozen) p.value.clear_grad();
  }
}

// ---------------------------------------------------------------------------
// forward

Tensor patchify(const Tensor& image, const ModelConfig& c) {
  const std::size_t p = static_cast<std::size_t>(c.patch), ch = static_cast<std::size_t>(c.channels);
  const std::size_t gw = static_cast<std::size_t>(c.grid_w), gh = static_cast<std::size_t>(c.grid_h);
  const std::size_t w = gw * p;
  if (image.shape() != Shape{gh * p, w, ch})
    throw DimensionError("image shape " + shape_string(image.shape()) + " does not match the model grid");
  Tensor out({gw * gh, p * p * ch});
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* row = out.data().data() + (gy * gw + gx) * p * p * ch;
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t k = 0; k < ch; ++k)
            *row++ = image[((gy * p + py) * w + gx * p + px) * ch + k];
    }
  return out;
}

std::vector<Var> bind(Tape& tape, ParamStore& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(tape.leaf(p.value));
  return out;
}

std::vector<Var> bind_values(Tape& tape, const ParamStore& params) {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(tape.constant(p.value));
  return out;
}

ForwardOutput forward(Tape& tape, std::span<const Var> bound, const ModelConfig& config,
                      const data::Vocabulary& vocab, std::span<const Sample> batch, const ForwardOptions& options) {
  if (bound.size() != expected_params(config))
    throw ContractError("forward: expected " + std::to_string(expected_params(config)) + " bound parameters, got " +
                        std::to_string(bound.size()));
  if (static_cast<int>(vocab.size()) != config.vocab_size)
    throw CompatibilityError("vocabulary size differs from the model's");
  if (batch.empty()) throw DegenerateBatchError("forward: empty batch");

  const std::size_t P = static_cast<std::size_t>(config.num_patches());
  const std::size_t d = static_cast<std::size_t>(config.dim);
  const std::size_t H = static_cast<std::size_t>(config.heads);
  const std::size_t dh = d / H;
  const std::size_t B = batch.size();
  const Names names;

  ForwardOutput out;
  std::vector<std::uint32_t> token_rows, pos_rows, grid_rows, grid_cols;
  const std::size_t gw = static_cast<std::size_t>(config.grid_w), gh = static_cast<std::size_t>(config.grid_h);
  Tensor patches({B * P, static_cast<std::size_t>(config.patch_dim())});
  std::size_t offset = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const Sample& s = batch[b];
    if (!s.image) throw ContractError("forward: sample without an image");
    if (s.instruction.size() > static_cast<std::size_t>(config.max_instruction))
      throw LengthError("instruction of " + std::to_string(s.instruction.size()) + " tokens exceeds " +
                        std::to_string(config.max_instruction));
    if (s.rationale.size() > static_cast<std::size_t>(config.max_rationale))
      throw LengthError("rationale of " + std::to_string(s.rationale.size()) + " tokens exceeds " +
                        std::to_string(config.max_rationale));
    const Tensor pr = patchify(*s.image, config);
    std::copy(pr.data().begin(), pr.data().end(), patches.data().begin() + static_cast<std::ptrdiff_t>(b * pr.size()));

    SampleLayout L;
    L.offset = offset;
    L.sep = P + s.instruction.size();
    L.prefix = L.sep + 1;
    L.rationale = s.rationale.size();
    L.with_act = s.with_act;
    L.length = L.prefix + L.rationale + (s.with_act ? 1 : 0);

    auto token = [&](int id) {
      if (id < 0 || id >= config.vocab_size) throw IndexError("token id out of range: " + std::to_string(id));
      token_rows.push_back(static_cast<std::uint32_t>(B * P + static_cast<std::size_t>(id)));
    };
    for (std::size_t p = 0; p < P; ++p) token_rows.push_back(static_cast<std::uint32_t>(b * P + p));
    for (int id : s.instruction) token(id);
    token(vocab.sep());
    for (int id : s.rationale) token(id);
    if (s.with_act) token(vocab.act());
    for (std::size_t t = 0; t < L.length; ++t) {
      pos_rows.push_back(static_cast<std::uint32_t>(t));
      // Text positions point at the zero row after both grid tables.
      grid_rows.push_back(static_cast<std::uint32_t>(t < P ? t / gw : gh + gw));
      grid_cols.push_back(static_cast<std::uint32_t>(t < P ? gh + t % gw : gh + gw));
    }

    out.layout.push_back(L);
    offset += L.length;
  }

  // Embeddings: one gather over [projected patches; token table].
  Var patch_emb = tape.add(tape.matmul(tape.constant(std::move(patches)), bound[0]), bound[1]);
  const Var table_parts[] = {patch_emb, bound[2]};
  Var x = tape.add(tape.gather_rows(tape.concat_rows(table_parts), token_rows), tape.gather_rows(bound[3], pos_rows));
  const Var grid_parts[] = {bound[4], bound[5], tape.constant(Tensor({1, d}))};
  const Var grid = tape.concat_rows(grid_parts);
  x = tape.add(x, tape.add(tape.gather_rows(grid, grid_rows), tape.gather_rows(grid, grid_cols)));

  std::vector<Var> masks;
  for (const auto& L : out.layout) masks.push_back(tape.constant(prefix_lm_mask(L.length, L.prefix)));
  if (options.capture_attention) {
    out.attention.resize(B);
    for (auto& a : out.attention) {
      a.probs.resize(static_cast<std::size_t>(config.layers));
      a.scores.resize(static_cast<std::size_t>(config.layers));
    }
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < config.layers; ++l) {
    auto P_ = [&](std::size_t k) { return bound[names.block(l, k)]; };
    Var h = tape.layer_norm(x, P_(ln1_g), P_(ln1_b));
    Var qkv = tape.add(tape.matmul(h, P_(wqkv)), P_(bqkv));
    std::vector<Var> sample_out;
    sample_out.reserve(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& L = out.layout[b];
      std::vector<Var> heads;
      heads.reserve(H);
      for (std::size_t hh = 0; hh < H; ++hh) {
        Var q = tape.slice(qkv, L.offset, L.length, hh * dh, dh);
        Var k = tape.slice(qkv, L.offset, L.length, d + hh * dh, dh);
        Var v = tape.slice(qkv, L.offset, L.length, 2 * d + hh * dh, dh);
        Var scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt);
        Var probs = tape.softmax_rows(tape.add(scores, masks[b]));
        if (options.capture_attention) {
          out.attention[b].probs[static_cast<std::size_t>(l)].push_back(tape.value(probs));
          out.attention[b].scores[static_cast<std::size_t>(l)].push_back(tape.value(scores));
        }
        heads.push_back(tape.matmul(probs, v));
      }
      sample_out.push_back(H == 1 ? heads[0] : tape.concat_cols(heads));
    }
    Var attn = B == 1 ? sample_out[0] : tape.concat_rows(sample_out);
    x = tape.add(x, tape.add(tape.matmul(attn, P_(wo)), P_(bo)));
    Var h2 = tape.layer_norm(x, P_(ln2_g), P_(ln2_b));
    Var m = tape.gelu(tape.add(tape.matmul(h2, P_(w1)), P_(b1)));
    x = tape.add(x, tape.add(tape.matmul(m, P_(w2)), P_(b2)));
  }
  Var xf = tape.layer_norm(x, bound[names.tail(config, lnf_g)], bound[names.tail(config, lnf_b)]);
  const Var hw = bound[names.tail(config, head_w)], hb = bound[names.tail(config, head_b)];
  auto head_rows = [&](const std::vector<std::uint32_t>& rows) {
    return tape.add(tape.matmul(tape.gather_rows(xf, rows), hw), hb);
  };

  if (options.rationale_logits) {
    std::vector<std::uint32_t> rows;
    out.rationale_offsets.push_back(0);
    for (const auto& L : out.layout) {
      for (std::size_t j = 0; j < L.rationale; ++j) rows.push_back(static_cast<std::uint32_t>(L.offset + L.sep + j));
      out.rationale_offsets.push_back(rows.size());
    }
    if (!rows.empty()) out.rationale_logits = head_rows(rows);
  }
  std::vector<std::uint32_t> act_rows;
  for (const auto& L : out.layout)
    if (L.with_act) act_rows.push_back(static_cast<std::uint32_t>(L.offset + L.act()));
  if (!act_rows.empty()) out.action_logits = head_rows(act_rows);
  if (options.last_logits) {
    std::vector<std::uint32_t> rows;
    for (const auto& L : out.layout) rows.push_back(static_cast<std::uint32_t>(L.offset + L.length - 1));
    out.last_logits = head_rows(rows);
  }
  return out;
}

// ---------------------------------------------------------------------------
// decoding

int argmax_action(std::span<const double> row, const data::Vocabulary& vocab) {
  if (row.size() < static_cast<std::size_t>(vocab.action_end()))
    throw DimensionError("logit row shorter than the action block");
  return argmax_range(row, vocab.action_begin(), vocab.action_end());
}

std::vector<int> generate_rationale(const ParamStore& params, const ModelConfig& config,
                                    const data::Vocabulary& vocab, const Tensor& image,
                                    std::span<const int> instruction, int max_len) {
  if (max_len < 0 || max_len > config.max_rationale)
    throw LengthError("rationale budget " + std::to_string(max_len) + " outside [0, " +
                      std::to_string(config.max_rationale) + "]");
  std::vector<int> seq;
  ForwardOptions opts;
  opts.rationale_logits = false;
  opts.last_logits = true;
  while (static_cast<int>(seq.size()) < max_len) {
    Tape tape(GradMode::disabled);
    Sample s{&image, instruction, seq, false};
    const auto out = infer(params, config, vocab, tape, s, opts);
    const auto row = tape.value(out.last_logits).data();
    const int next = argmax_range(row, 0, static_cast<int>(row.size()));
    seq.push_back(next);
    if (next == vocab.eos()) break;
  }
  return seq;
}

int predict_action(const ParamStore& params, const ModelConfig& config, const data::Vocabulary& vocab,
                   const Tensor& image, std::span<const int> instruction, std::span<const int> rationale) {
  Tape tape(GradMode::disabled);
  ForwardOptions opts;
  opts.rationale_logits = false;
  const auto out = infer(params, config, vocab, tape, Sample{&image, instruction, rationale, true}, opts);
  return argmax_action(tape.value(out.action_logits).data(), vocab);
}

int predict_action(const ParamStore& params, const ModelConfig& config, const data::Vocabulary& vocab,
                   const Tensor& image, std::span<const int> instruction) {
  const auto rationale = generate_rationale(params, config, vocab, image, instruction, config.max_rationale);
  return predict_action(params, config, vocab, image, instruction, rationale);
}

std::vector<std::vector<Tensor>> extract_attention(const ForwardOutput& out, std::size_t sample, QuerySpan span,
                                                   int num_patches) {
  if (sample >= out.layout.size()) throw SpanError("sample index out of range");
  if (out.attention.size() != out.layout.size()) throw SpanError("forward pass did not capture attention");
  const auto& L = out.layout[sample];
  std::vector<std::size_t> queries;
  if (span == QuerySpan::action) {
    if (L.with_act) queries.push_back(L.act());
  } else {
    for (std::size_t j = 0; j < L.rationale; ++j) queries.push_back(L.sep + j);
  }
  if (queries.empty()) throw SpanError(span == QuerySpan::action ? "sample has no <ACT> query" : "empty rationale span");
  const std::size_t P = static_cast<std::size_t>(num_patches);
  if (P == 0 || P > L.prefix) throw SpanError("patch key span outside the prefix");

  const auto& probs = out.attention[sample].probs;
  std::vector<std::vector<Tensor>> result(probs.size());
  for (std::size_t l = 0; l < probs.size(); ++l)
    for (const Tensor& a : probs[l]) {
      Tensor r({queries.size(), P});
      for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        double total = 0.0;
        for (std::size_t k = 0; k < P; ++k) total += a.at(queries[qi], k);
        for (std::size_t k = 0; k < P; ++k) r.at(qi, k) = a.at(queries[qi], k) / total;
      }
      result[l].push_back(std::move(r));
    }
  return result;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint64_t get_le(const std::string& s, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header{{"config", to_json(ck.config)}, {"vocab_hash", ck.vocab_hash}, {"metadata", ck.metadata}};
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : ck.params) shapes.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  header["params"] = shapes;
  header["num_values"] = ck.params.num_values();
  const std::string text = header.dump();

  std::string blob = "RFVL";
  put_u32(blob, kCheckpointVersion);
  put_u64(blob, text.size());
  blob += text;
  blob.reserve(blob.size() + 4 * ck.params.num_values());
  for (const auto& p : ck.params)
    for (double v : p.value.data()) put_u32(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string blob{std::istreambuf_iterator<char>(in), {}};
  if (blob.size() < 16 || blob.compare(0, 4, "RFVL") != 0) throw LoadError(path.string() + " is not a checkpoint");
  const auto version = static_cast<std::uint32_t>(get_le(blob, 4, 4));
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t hlen = get_le(blob, 8, 8);
  if (16 + hlen > blob.size()) throw LoadError("checkpoint header is truncated");

  Checkpoint ck;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(16, hlen));
    ck.config = model_config_from_json(header.at("config"));
    ck.vocab_hash = header.at("vocab_hash").get<std::string>();
    ck.metadata = header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash)
    throw CompatibilityError("checkpoint was trained with a different vocabulary");

  ck.params = zero_params(ck.config);
  const std::size_t count = ck.params.num_values();
  if (header.value("num_values", std::size_t{0}) != count || blob.size() != 16 + hlen + 4 * count)
    throw LoadError("checkpoint parameter count does not match its configuration");
  std::size_t pos = 16 + hlen;
  for (auto& p : ck.params)
    for (double& v : p.value.data()) {
      v = static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(blob, pos, 4))));
      pos += 4;
    }
  apply_freeze(ck.params, ck.config);
  return ck;
}

}  // namespace rfvla::model
