#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "ulab/gcg.hpp"
#include "ulab/selection.hpp"

using namespace ulab;
using namespace ulab::gcg;

namespace {

std::vector<synth::ReasoningExample> forget_examples(int n, std::uint64_t seed) {
  synth::CorpusSpec s;
  s.n_examples = n;
  s.example_seed = seed;
  return synth::generate_corpus(s).examples;
}

std::vector<double> attack_gradient(const lm::ModelParams<double>& p, std::uint64_t seed) {
  return attack::objective_gradient(p, {testing::sample_target(seed)}, attack::ObjectiveKind::FlipWithCoherentTrace);
}

}  // namespace

TEST_CASE("an empty suffix reduces to the selection cosine") {
  const auto p = testing::generic_params(testing::tiny_config(), 1);
  const auto forget = forget_examples(4, 2);
  const auto g = attack_gradient(p, 3);
  std::vector<lm::PackedSequence> seqs;
  for (const auto& e : forget) seqs.push_back(e.packed());
  const auto geo = select::gradient_geometry(p, seqs, g);
  const double expected = select::relaxed_cosine(geo, std::vector<double>(4, 1.0));
  for (auto placement : {Placement::EndOfInput, Placement::EndOfAnswer}) {
    CHECK(gcg_objective(p, forget, {}, g, placement) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("the objective is a cosine and sees every suffix token") {
  const auto p = testing::generic_params(testing::tiny_config(), 4);
  const auto forget = forget_examples(3, 5);
  const auto g = attack_gradient(p, 6);
  const std::vector<int> a{40, 50, 60}, b{40, 51, 60};
  for (auto placement : {Placement::EndOfInput, Placement::EndOfAnswer}) {
    const double va = gcg_objective(p, forget, a, g, placement);
    const double vb = gcg_objective(p, forget, b, g, placement);
    CHECK(va >= -1.0);
    CHECK(va <= 1.0);
    CHECK(va != vb);
  }
  CHECK(gcg_objective(p, forget, a, g, Placement::EndOfInput) !=
        gcg_objective(p, forget, a, g, Placement::EndOfAnswer));
}

TEST_CASE("suffix placement edits the right span") {
  const auto e = forget_examples(1, 7)[0];
  const std::vector<int> delta{33, 34};
  const auto in = with_suffix(e, delta, Placement::EndOfInput);
  CHECK(in.tokens.size() == e.packed().tokens.size() + 2);
  CHECK(in.tokens[in.layout.input_end - 1] == 34);
  CHECK(in.tokens[in.layout.input_end - 2] == 33);
  const auto out = with_suffix(e, delta, Placement::EndOfAnswer);
  CHECK(out.tokens[out.layout.answer_end - 1] == 34);
  CHECK(out.tokens.back() == tok::kEos);
  CHECK(parse_placement(placement_name(Placement::EndOfAnswer)) == Placement::EndOfAnswer);
  CHECK_THROWS_AS(parse_placement("middle"), Error);
}

TEST_CASE("a full single-token sweep finds the exhaustive optimum") {
  const auto p = testing::generic_params(testing::tiny_config(), 8);
  const auto forget = forget_examples(3, 9);
  for (std::uint64_t inst = 0; inst < 10; ++inst) {
    const auto g = attack_gradient(p, 20 + inst);
    GcgConfig c;
    c.suffix_len = 1;
    c.allowed = {30, 41, 52, 63, 74, 85};
    c.topk = 6;
    c.batch = 64;
    c.seed = inst + 1;
    double best = -2;
    for (int t : c.allowed) best = std::max(best, gcg_objective(p, forget, {t}, g, c.placement));
    auto st = gcg_init(p, forget, g, c);
    gcg_step(st, p, forget, g, c);
    CAPTURE(inst);
    CHECK(st.objective == best);
    CHECK(gcg_objective(p, forget, st.delta, g, c.placement) == st.objective);
  }
}

TEST_CASE("the best-so-far trace never decreases") {
  const auto p = testing::generic_params(testing::tiny_config(), 10);
  const auto forget = forget_examples(3, 11);
  const auto g = attack_gradient(p, 12);
  GcgConfig c;
  c.suffix_len = 4;
  c.topk = 4;
  c.batch = 6;
  c.seed = 5;
  auto st = gcg_init(p, forget, g, c);
  for (int i = 0; i < 5; ++i) gcg_step(st, p, forget, g, c);
  REQUIRE(st.trace.size() == 6);
  for (std::size_t i = 1; i < st.trace.size(); ++i) CHECK(st.trace[i] >= st.trace[i - 1]);
  CHECK(st.trace.back() == st.objective);
  CHECK(st.delta.size() == 4);
  for (int t : st.delta) CHECK(t >= tok::kNumReserved);

  auto again = gcg_init(p, forget, g, c);
  for (int i = 0; i < 5; ++i) gcg_step(again, p, forget, g, c);
  CHECK(again.delta == st.delta);
  CHECK(again.trace == st.trace);
}

TEST_CASE("token gradients converge as the difference radius shrinks") {
  const auto p = testing::generic_params(testing::tiny_config(), 13);
  const auto forget = forget_examples(2, 14);
  const auto g = attack_gradient(p, 15);
  GcgConfig c;
  c.allowed = {30, 31, 32, 90};
  c.topk = 2;
  c.fd_radius = 1e-3;
  const std::vector<int> delta{30, 90};
  const auto coarse = token_gradients(p, forget, delta, g, c);
  c.fd_radius = 5e-4;
  const auto fine = token_gradients(p, forget, delta, g, c);
  REQUIRE(coarse.size() == 8);
  CHECK(testing::relative_error(coarse, fine) < 1e-4);
  CHECK(ad::norm(fine) > 0);
}

TEST_CASE("suffixes that overflow the context are rejected") {
  const auto p = testing::generic_params(testing::tiny_config(), 16);
  const auto forget = forget_examples(2, 17);
  const auto g = attack_gradient(p, 18);
  const std::vector<int> long_delta(40, 50);
  CHECK_THROWS_AS(gcg_objective(p, forget, long_delta, g, Placement::EndOfInput), Error);
  CHECK_THROWS_AS(gcg_objective(p, {}, {50}, g, Placement::EndOfInput), Error);
  GcgConfig c;
  c.allowed = {2};
  CHECK_THROWS_AS(c.validate(123), Error);
  c.allowed = {40, 41};
  c.topk = 3;
  CHECK_THROWS_AS(c.validate(123), Error);
}

TEST_CASE("suffix artifacts round trip through JSON") {
  SuffixArtifact a;
  a.delta = {40, 41, 99};
  a.trace = {0.1, 0.2, 0.25};
  a.config.suffix_len = 3;
  a.config.placement = Placement::EndOfAnswer;
  a.config.allowed = {40, 41, 99};
  a.config.topk = 2;
  const auto b = suffix_from_json(suffix_to_json(a));
  CHECK(b.delta == a.delta);
  CHECK(b.trace == a.trace);
  CHECK(b.config.placement == Placement::EndOfAnswer);
  CHECK(b.config.allowed == a.config.allowed);
  CHECK(b.config.topk == 2);
}
