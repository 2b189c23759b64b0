#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "rfvla/errors.hpp"
#include "rfvla/model.hpp"
#include "rfvla/rng.hpp"
#include "rfvla/sim.hpp"

using namespace rfvla;
using namespace rfvla::model;
namespace fs = std::filesystem;

namespace {

const data::Vocabulary& vocab() { return data::Vocabulary::standard(); }

ModelConfig small_config(int layers = 2, int dim = 16, int heads = 2) {
  ModelConfig c;
  c.layers = layers;
  c.dim = dim;
  c.heads = heads;
  c.mlp_ratio = 2;
  c.vocab_size = static_cast<int>(vocab().size());
  c.frozen_blocks = 0;
  return c;
}

struct Fixture {
  sim::Task task = sim::canonical_tasks()[0];
  sim::VariantSpec variant;
  sim::Scene scene;
  Tensor image;
  std::vector<int> instruction;
  std::vector<int> rationale;

  explicit Fixture(std::uint64_t seed) {
    scene = sim::reset(task, variant, seed);
    image = sim::render(scene, variant);
    instruction = vocab().encode(task.instruction_words());
    SplitMix64 rng(seed);
    for (int i = 0; i < 10; ++i) rationale.push_back(static_cast<int>(rng.below(vocab().size())));
  }
  Sample sample(bool with_act = true) const { return Sample{&image, instruction, rationale, with_act}; }
};

ForwardOutput run(Tape& tape, const ParamStore& ps, const ModelConfig& c, std::span<const Sample> batch,
                  ForwardOptions opts = {}) {
  const auto bound = bind_values(tape, ps);
  return forward(tape, bound, c, vocab(), batch, opts);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rfvla_test_model_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("parameter layout") {
  const ModelConfig c = small_config(3);
  const ParamStore ps = init_params(c, 1);
  CHECK(ps.size() == 6 + 12 * 3 + 4);
  CHECK(ps[0].name == "patch_proj.w");
  CHECK(ps[2].name == "tok_emb");
  CHECK(ps[3].name == "pos_emb");
  CHECK(ps[4].name == "patch_row");
  CHECK(ps[5].name == "patch_col");
  CHECK(ps[6].name == "blocks.0.ln1.g");
  CHECK(ps[6 + 12].name == "blocks.1.ln1.g");
  CHECK(ps.get("patch_row").shape() == Shape{static_cast<std::size_t>(c.grid_h), 16});
  CHECK(ps[ps.size() - 2].name == "head.w");
  CHECK(ps.get("pos_emb").shape() == Shape{static_cast<std::size_t>(c.max_seq()), 16});
  CHECK(init_params(c, 1) == ps);
  CHECK_FALSE(init_params(c, 2) == ps);
  for (const auto& p : ps)
    if (p.name.find(".g") != std::string::npos)
      for (double v : p.value.data()) CHECK(v == 1.0);
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  CHECK(model_config_from_json(to_json(c)) == c);
}

TEST_CASE("patchify maps cells to rows") {
  const ModelConfig c = small_config();
  Tensor img({32, 32, 3});
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img[static_cast<std::size_t>((y * 32 + x) * 3)] = (y / 4) * 8 + x / 4;
  const Tensor p = patchify(img, c);
  REQUIRE(p.shape() == Shape{64, 48});
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t k = 0; k < 48; k += 3) CHECK(p.at(r, k) == static_cast<double>(r));
  CHECK_THROWS_AS(patchify(Tensor({16, 16, 3}), c), DimensionError);
}

TEST_CASE("forward pass") {
  const ModelConfig c = small_config();
  const Fixture fx(3);
  const Sample one[] = {fx.sample()};

  SUBCASE("zero parameters give uniform logits") {
    const ParamStore z = zero_params(c);
    Tape tape(GradMode::disabled);
    const auto out = run(tape, z, c, one);
    const Tensor& a = tape.value(out.action_logits);
    REQUIRE(a.shape() == Shape{1, vocab().size()});
    for (double v : a.data()) CHECK(v == 0.0);
    CHECK(tape.value(out.rationale_logits).rows() == fx.rationale.size());
  }
  SUBCASE("attention rows are distributions that respect the mask") {
    const ParamStore ps = init_params(c, 5);
    Tape tape(GradMode::disabled);
    ForwardOptions o;
    o.capture_attention = true;
    const auto out = run(tape, ps, c, one, o);
    const auto& L = out.layout[0];
    for (const auto& layer : out.attention[0].probs)
      for (const Tensor& a : layer) {
        REQUIRE(a.rows() == L.length);
        for (std::size_t i = 0; i < L.length; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < L.length; ++j) {
            s += a.at(i, j);
            if (j >= L.prefix && j > i) CHECK(a.at(i, j) == 0.0);
          }
          CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
      }
  }
  SUBCASE("deterministic") {
    const ParamStore ps = init_params(c, 5);
    Tape t1(GradMode::disabled), t2(GradMode::disabled);
    const auto a = run(t1, ps, c, one);
    const auto b = run(t2, ps, c, one);
    CHECK(t1.value(a.action_logits) == t2.value(b.action_logits));
    CHECK(t1.value(a.rationale_logits) == t2.value(b.rationale_logits));
  }
  SUBCASE("rationale rows never see later rationale tokens") {
    const ParamStore ps = init_params(c, 6);
    for (std::size_t j = 0; j < fx.rationale.size(); ++j) {
      Fixture changed = fx;
      changed.rationale[j] = (changed.rationale[j] + 1) % static_cast<int>(vocab().size());
      const Sample alt[] = {changed.sample()};
      Tape t1(GradMode::disabled), t2(GradMode::disabled);
      const auto a = run(t1, ps, c, one);
      const auto b = run(t2, ps, c, alt);
      const Tensor& ra = t1.value(a.rationale_logits);
      const Tensor& rb = t2.value(b.rationale_logits);
      // Row i predicts token i from tokens before it, so row i sees token j only when i > j.
      for (std::size_t i = 0; i < ra.rows(); ++i) {
        double diff = 0.0;
        for (std::size_t k = 0; k < ra.cols(); ++k) diff = std::max(diff, std::abs(ra.at(i, k) - rb.at(i, k)));
        if (i <= j) CHECK(diff == 0.0);
        else CHECK(diff > 0.0);
      }
      CHECK_FALSE(t1.value(a.action_logits) == t2.value(b.action_logits));
    }
  }
  SUBCASE("the prefix is bidirectional") {
    const ParamStore ps = init_params(c, 6);
    Fixture changed = fx;
    changed.instruction.back() = vocab().id("plate");
    const Sample alt[] = {changed.sample()};
    Tape t1(GradMode::disabled), t2(GradMode::disabled);
    ForwardOptions o;
    o.capture_attention = true;
    const auto a = run(t1, ps, c, one, o);
    const auto b = run(t2, ps, c, alt, o);
    // The first patch row attends to the last instruction token.
    CHECK_FALSE(a.attention[0].probs[1][0] == b.attention[0].probs[1][0]);
  }
  SUBCASE("samples in a batch are independent") {
    const ParamStore ps = init_params(c, 7);
    const Fixture other(11);
    Fixture shorter(12);
    shorter.rationale.resize(3);
    const Sample batch[] = {fx.sample(), other.sample(), shorter.sample()};
    Tape tb(GradMode::disabled);
    const auto all = run(tb, ps, c, batch);
    for (std::size_t s = 0; s < 3; ++s) {
      Tape t(GradMode::disabled);
      const auto alone = run(t, ps, c, std::span<const Sample>(&batch[s], 1));
      const Tensor& x = t.value(alone.action_logits);
      for (std::size_t k = 0; k < x.cols(); ++k)
        CHECK(x.at(0, k) == doctest::Approx(tb.value(all.action_logits).at(s, k)).epsilon(1e-12));
    }
    CHECK(all.rationale_offsets == std::vector<std::size_t>{0, 10, 20, 23});
  }
  SUBCASE("length budgets") {
    Fixture longer = fx;
    longer.rationale.assign(static_cast<std::size_t>(c.max_rationale) + 1, vocab().eos());
    const Sample bad[] = {longer.sample()};
    Tape tape(GradMode::disabled);
    CHECK_THROWS_AS(run(tape, init_params(c, 1), c, bad), LengthError);
  }
}

TEST_CASE("freeze masks") {
  const ModelConfig c = small_config(4);
  ParamStore ps = init_params(c, 1);
  SUBCASE("K = 0 trains everything") {
    apply_freeze(ps, 4, 0, false);
    for (const auto& p : ps) CHECK(p.value.requires_grad());
  }
  SUBCASE("K = 2 freezes the lower blocks only") {
    apply_freeze(ps, 4, 2, false);
    for (const auto& p : ps) {
      const int b = block_of(p.name);
      CHECK(p.value.requires_grad() == !(b >= 0 && b < 2));
    }
  }
  SUBCASE("freeze_embeddings also freezes the patch projection") {
    apply_freeze(ps, 4, 1, true);
    CHECK_FALSE(ps.get("patch_proj.w").requires_grad());
    CHECK_FALSE(ps.get("tok_emb").requires_grad());
    CHECK(ps.get("blocks.1.mlp.w1").requires_grad());
  }
  SUBCASE("K = L leaves only the final norm and head") {
    apply_freeze(ps, 4, 4, false);
    for (const auto& p : ps)
      CHECK(p.value.requires_grad() == (p.name.rfind("ln_f.", 0) == 0 || p.name.rfind("head.", 0) == 0));
  }
  SUBCASE("K > L is rejected") {
    CHECK_THROWS_AS(apply_freeze(ps, 4, 5, false), ConfigError);
    CHECK_THROWS_AS(apply_freeze(ps, 4, -1, false), ConfigError);
  }
}

TEST_CASE("action decoding") {
  const auto& v = vocab();
  std::vector<double> row(v.size(), 0.0);
  SUBCASE("hand-set maximum") {
    row[static_cast<std::size_t>(v.action_begin() + 7)] = 2.0;
    row[0] = 10.0;  // outside the action block
    CHECK(argmax_action(row, v) == v.action_begin() + 7);
  }
  SUBCASE("ties go to the lowest id") {
    row[static_cast<std::size_t>(v.action_begin() + 3)] = 1.0;
    row[static_cast<std::size_t>(v.action_begin() + 9)] = 1.0;
    CHECK(argmax_action(row, v) == v.action_begin() + 3);
    std::fill(row.begin(), row.end(), 0.0);
    CHECK(argmax_action(row, v) == v.action_begin());
  }
  SUBCASE("always inside the action block") {
    SplitMix64 rng(17);
    for (int i = 0; i < 1000; ++i) {
      for (double& x : row) x = rng.normal() * 5.0;
      CHECK(v.is_action(argmax_action(row, v)));
    }
  }
  SUBCASE("short rows") {
    CHECK_THROWS_AS(argmax_action(std::vector<double>(3, 0.0), v), DimensionError);
  }
}

TEST_CASE("rationale generation") {
  const ModelConfig c = small_config();
  const Fixture fx(2);
  ParamStore ps = init_params(c, 4);
  SUBCASE("a rigged end token stops immediately") {
    ps.get("head.b")[static_cast<std::size_t>(vocab().eos())] = 100.0;
    CHECK(generate_rationale(ps, c, vocab(), fx.image, fx.instruction, 20) == std::vector<int>{vocab().eos()});
  }
  SUBCASE("budgets") {
    CHECK(generate_rationale(ps, c, vocab(), fx.image, fx.instruction, 0).empty());
    ps.get("head.b")[static_cast<std::size_t>(vocab().id("spoon"))] = 100.0;
    CHECK(generate_rationale(ps, c, vocab(), fx.image, fx.instruction, 7).size() == 7);
    CHECK_THROWS_AS(generate_rationale(ps, c, vocab(), fx.image, fx.instruction, c.max_rationale + 1), LengthError);
  }
  SUBCASE("greedy decoding matches the teacher-forced argmax") {
    const auto seq = generate_rationale(ps, c, vocab(), fx.image, fx.instruction, 12);
    const Sample s{&fx.image, fx.instruction, seq, false};
    Tape tape(GradMode::disabled);
    const auto out = run(tape, ps, c, std::span<const Sample>(&s, 1));
    const Tensor& r = tape.value(out.rationale_logits);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < r.cols(); ++k)
        if (r.at(i, k) > r.at(i, best)) best = k;
      CHECK(static_cast<int>(best) == seq[i]);
    }
  }
  SUBCASE("predict_action with a rationale is an action id") {
    CHECK(vocab().is_action(predict_action(ps, c, vocab(), fx.image, fx.instruction, fx.rationale)));
    CHECK(vocab().is_action(predict_action(ps, c, vocab(), fx.image, fx.instruction)));
  }
}

TEST_CASE("attention extraction") {
  const ModelConfig c = small_config();
  const Fixture fx(8);
  const Sample one[] = {fx.sample()};
  ForwardOptions o;
  o.capture_attention = true;

  SUBCASE("matches a softmax over the raw patch scores") {
    const ParamStore ps = init_params(c, 9);
    Tape tape(GradMode::disabled);
    const auto out = run(tape, ps, c, one, o);
    for (auto span : {QuerySpan::action, QuerySpan::rationale}) {
      const auto got = extract_attention(out, 0, span, 64);
      const auto& L = out.layout[0];
      std::vector<std::size_t> queries;
      if (span == QuerySpan::action) queries.push_back(L.act());
      else
        for (std::size_t j = 0; j < L.rationale; ++j) queries.push_back(L.sep + j);
      for (std::size_t l = 0; l < got.size(); ++l)
        for (std::size_t h = 0; h < got[l].size(); ++h) {
          const Tensor& s = out.attention[0].scores[l][h];
          REQUIRE(got[l][h].shape() == Shape{queries.size(), 64});
          for (std::size_t qi = 0; qi < queries.size(); ++qi) {
            double z = 0.0;
            for (std::size_t k = 0; k < 64; ++k) z += std::exp(s.at(queries[qi], k));
            for (std::size_t k = 0; k < 64; ++k)
              CHECK(std::abs(got[l][h].at(qi, k) - std::exp(s.at(queries[qi], k)) / z) <= 1e-9);
          }
        }
    }
  }
  SUBCASE("uniform attention gives 1/64") {
    Tape tape(GradMode::disabled);
    const auto out = run(tape, zero_params(c), c, one, o);
    for (const auto& layer : extract_attention(out, 0, QuerySpan::action, 64))
      for (const Tensor& t : layer)
        for (double v : t.data()) CHECK(v == doctest::Approx(1.0 / 64.0).epsilon(1e-15));
  }
  SUBCASE("span errors") {
    Tape tape(GradMode::disabled);
    const auto no_capture = run(tape, zero_params(c), c, one);
    CHECK_THROWS_AS(extract_attention(no_capture, 0, QuerySpan::action, 64), SpanError);
    Fixture bare = fx;
    bare.rationale.clear();
    const Sample s[] = {bare.sample(false)};
    Tape t2(GradMode::disabled);
    const auto out = run(t2, zero_params(c), c, s, o);
    CHECK_THROWS_AS(extract_attention(out, 0, QuerySpan::action, 64), SpanError);
    CHECK_THROWS_AS(extract_attention(out, 0, QuerySpan::rationale, 64), SpanError);
    CHECK_THROWS_AS(extract_attention(out, 1, QuerySpan::rationale, 64), SpanError);
  }
}

TEST_CASE("checkpoints") {
  ModelConfig c = small_config();
  c.frozen_blocks = 1;
  const fs::path dir = scratch("ckpt");
  Checkpoint ck{c, init_params(c, 21), vocab().hash(), {{"step", 42}}};
  save_checkpoint(dir / "a.ckpt", ck);

  SUBCASE("round trip stores 32-bit values") {
    const Checkpoint back = load_checkpoint(dir / "a.ckpt", vocab().hash());
    CHECK(back.config == c);
    CHECK(back.metadata == ck.metadata);
    REQUIRE(back.params.size() == ck.params.size());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      CHECK(back.params[i].name == ck.params[i].name);
      CHECK(back.params[i].value.requires_grad() == ck.params[i].value.requires_grad());
      for (std::size_t k = 0; k < ck.params[i].value.size(); ++k)
        CHECK(back.params[i].value[k] == static_cast<double>(static_cast<float>(ck.params[i].value[k])));
    }
    save_checkpoint(dir / "b.ckpt", back);
    std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
    CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));
  }
  SUBCASE("vocabulary mismatch") {
    CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", std::string("0000000000000000")), CompatibilityError);
  }
  SUBCASE("corruption") {
    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    const std::string blob{std::istreambuf_iterator<char>(in), {}};
    auto write = [&](const std::string& s) { std::ofstream(dir / "c.ckpt", std::ios::binary) << s; };

    std::string bad = blob;
    bad[0] = 'X';
    write(bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), LoadError);

    bad = blob;
    bad[4] = 9;
    write(bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), VersionError);

    write(blob.substr(0, blob.size() - 4));
    CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), LoadError);

    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  }
  fs::remove_all(dir);
}
