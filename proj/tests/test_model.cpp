#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/model.hpp"

using namespace ulab;
using lm::Segment;

namespace {

std::size_t closed_form_count(std::size_t V, std::size_t S, std::size_t d, std::size_t L) {
  const std::size_t block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (4 * d * d + 4 * d) + (4 * d * d + d);
  return V * d + S * d + L * block + 2 * d + d * V + V;
}

lm::PackedSequence small_sequence() {
  return lm::pack({20, 41, 60, 88}, {8, 9, 10, 30, 31}, {tok::kPositive});
}

template <typename T>
lm::ModelParams<T> zero_params(const lm::ModelConfig& c) {
  auto p = lm::init_params<T>(c);
  for (auto& [name, t] : p.tensors)
    for (auto& v : t.data) v = 0;
  return p;
}

// Emits plan[p + 1] after position p, whatever the prefix: token embeddings and
// blocks are zero, position p carries a one-hot, and the head maps it to the plan.
lm::ModelParams<double> scripted_model(const std::vector<int>& plan) {
  lm::ModelConfig c;
  auto p = zero_params<double>(c);
  for (const char* g : {"lnf.g", "h0.ln1.g", "h0.ln2.g", "h1.ln1.g", "h1.ln2.g"}) {
    for (auto& v : p.get(g).data) v = 1;
  }
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  for (std::size_t pos = 0; pos + 1 < plan.size(); ++pos) {
    p.get("pos_emb").data[pos * d + pos] = 3.0;
    p.get("head.w").data[pos * V + static_cast<std::size_t>(plan[pos + 1])] = 50.0;
  }
  return p;
}

}  // namespace

TEST_CASE("parameter count follows the closed form") {
  lm::ModelConfig c;
  CHECK(lm::init_params<float>(c).count() == closed_form_count(123, 128, 64, 2));
  auto t = testing::tiny_config();
  CHECK(lm::init_params<double>(t).count() == closed_form_count(123, 48, 8, 1));
  CHECK(lm::param_layout(c).total == closed_form_count(123, 128, 64, 2));
}

TEST_CASE("config validation rejects inconsistent shapes") {
  lm::ModelConfig c;
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.vocab_size = 5;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("init is deterministic per seed") {
  lm::ModelConfig c;
  CHECK(lm::init_params<float>(c) == lm::init_params<float>(c));
  auto c2 = c;
  c2.seed = 2;
  CHECK_FALSE(lm::init_params<float>(c) == lm::init_params<float>(c2));
}

TEST_CASE("pack and locate agree") {
  const auto s = small_sequence();
  CHECK(s.tokens.size() == 1 + 4 + 1 + 5 + 2 + 1 + 1);
  const auto l = lm::locate(s.tokens);
  CHECK(l.trace_begin == s.layout.trace_begin);
  CHECK(l.eos == s.tokens.size() - 1);
  CHECK(lm::segment_positions(s.layout, {Segment::Trace}).size() == 7);
  CHECK(lm::segment_positions(s.layout, {Segment::Answer}).size() == 2);
  auto broken = s.tokens;
  broken.pop_back();
  CHECK_THROWS_AS(lm::locate(broken), Error);
}

TEST_CASE("attention is causal") {
  const auto c = testing::tiny_config();
  const auto p = testing::generic_params(c, 4);
  auto tokens = small_sequence().tokens;
  auto logits_of = [&](const std::vector<int>& toks) {
    ad::Tape<double> tape;
    auto b = lm::bind(tape, p, false);
    return lm::forward(b, toks).logits.value();
  };
  const auto before = logits_of(tokens);
  const std::size_t j = 7;
  tokens[j] = 99;
  const auto after = logits_of(tokens);
  const std::size_t V = 123;
  for (std::size_t i = 0; i < j * V; ++i) REQUIRE(before.data[i] == after.data[i]);
  bool changed = false;
  for (std::size_t i = j * V; i < before.data.size(); ++i) changed |= before.data[i] != after.data[i];
  CHECK(changed);
}

TEST_CASE("uniform logits give nll log V") {
  const auto p = zero_params<double>(lm::ModelConfig{});
  const auto s = small_sequence();
  CHECK(lm::nll_value(p, s, {Segment::Trace, Segment::Answer}) == doctest::Approx(std::log(123.0)).epsilon(1e-12));
  CHECK(lm::nll_value(p, s, {Segment::Trace}, lm::Reduction::Sum) ==
        doctest::Approx(7 * std::log(123.0)).epsilon(1e-12));
}

TEST_CASE("mean nll over two spans is length weighted") {
  const auto c = testing::tiny_config();
  const auto p = testing::generic_params(c, 8);
  const auto s = small_sequence();
  const double t = lm::nll_value(p, s, {Segment::Trace});
  const double a = lm::nll_value(p, s, {Segment::Answer});
  const double both = lm::nll_value(p, s, {Segment::Trace, Segment::Answer});
  CHECK(both == doctest::Approx((7 * t + 2 * a) / 9).epsilon(1e-12));
  CHECK(both != doctest::Approx((t + a) / 2));
}

TEST_CASE("per-sample gradient matches finite differences") {
  const auto c = testing::tiny_config();
  const auto p = testing::generic_params(c, 12);
  const auto s = small_sequence();
  const double err = testing::model_gradcheck(
      p, [&](const lm::BoundParams<double>& b) { return lm::nll_loss(b, s, {Segment::Trace, Segment::Answer}); }, 60,
      3);
  CHECK(err < 1e-6);

  ad::Tape<double> tape;
  auto b = lm::bind(tape, p, true);
  const auto g = ad::flatten(tape.backward(lm::nll_loss(b, s, {Segment::Trace, Segment::Answer})),
                             lm::param_layout(c));
  CHECK(lm::per_sample_grad(p, s, {Segment::Trace, Segment::Answer}) == g);
}

TEST_CASE("rows outside the sequence support get exactly zero gradient") {
  const auto c = testing::tiny_config();
  const auto p = testing::generic_params(c, 13);
  const auto s = small_sequence();
  const auto g = ad::unflatten(lm::per_sample_grad(p, s, {Segment::Trace, Segment::Answer}), lm::param_layout(c));
  const std::size_t d = 8;
  const auto& tok = g.at("tok_emb").data;
  std::vector<bool> present(123, false);
  // The final token is only ever predicted, never read.
  for (std::size_t i = 0; i + 1 < s.tokens.size(); ++i) present[static_cast<std::size_t>(s.tokens[i])] = true;
  for (std::size_t v = 0; v < 123; ++v) {
    double mag = 0;
    for (std::size_t k = 0; k < d; ++k) mag += std::abs(tok[v * d + k]);
    CAPTURE(v);
    if (present[v]) CHECK(mag > 0);
    else CHECK(mag == 0);
  }
  const auto& pos = g.at("pos_emb").data;
  for (std::size_t i = (s.tokens.size() - 1) * d; i < pos.size(); ++i) REQUIRE(pos[i] == 0);
}

TEST_CASE("float and double serialization round trip bitwise") {
  lm::ModelConfig c;
  const auto p = lm::init_params<float>(c);
  const auto bytes = lm::serialize(p);
  CHECK(lm::deserialize<float>(bytes, c) == p);
  CHECK(lm::fingerprint(bytes) == lm::fingerprint(lm::serialize(lm::deserialize<float>(bytes, c))));
  const auto pd = testing::generic_params(testing::tiny_config(), 2);
  CHECK(lm::deserialize<double>(lm::serialize(pd), pd.config) == pd);
  auto other = c;
  other.d_model = 32;
  CHECK_THROWS_AS(lm::deserialize<float>(bytes, other), Error);
}

TEST_CASE("greedy decode follows a scripted model and stops at eos") {
  const std::vector<int> input{20, 41, 60};
  std::vector<int> plan{tok::kBos, 20, 41, 60, tok::kThink, 8, 9, tok::kThinkEnd, tok::kAnswer, tok::kNegative,
                        tok::kEos, 50, 51};
  const auto p = scripted_model(plan);
  const auto d = lm::greedy_decode(p, input, 20);
  CHECK(d.trace == std::vector<int>{8, 9});
  CHECK(d.answer == std::vector<int>{tok::kNegative});
  CHECK(d.well_formed);
  CHECK(d.has_answer_marker);
  CHECK(d.generated.back() == tok::kEos);

  const auto again = lm::greedy_decode(p, input, 20);
  CHECK(again.generated == d.generated);
  CHECK(lm::greedy_decode(p, input, 2).generated == std::vector<int>{8, 9});
  CHECK_FALSE(lm::greedy_decode(p, input, 2).well_formed);
}

TEST_CASE("decoding a trained-size model is deterministic") {
  const auto p = lm::init_params<float>(lm::ModelConfig{});
  const auto a = lm::greedy_decode(p, {20, 30, 40}, 10);
  const auto b = lm::greedy_decode(p, {20, 30, 40}, 10);
  CHECK(a.generated == b.generated);
  CHECK(a.generated.size() <= 10);
}
