#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ulab/evaluation.hpp"

using namespace ulab;
using namespace ulab::eval;

namespace {

lm::Decoded decoded(const std::vector<int>& trace, const std::vector<int>& answer) {
  std::vector<int> g = trace;
  g.push_back(tok::kThinkEnd);
  g.push_back(tok::kAnswer);
  g.insert(g.end(), answer.begin(), answer.end());
  g.push_back(tok::kEos);
  return lm::parse_generation(g);
}

synth::Corpus small_corpus() {
  synth::CorpusSpec s;
  s.n_examples = 20;
  s.example_seed = 4;
  return synth::generate_corpus(s);
}

EvalTarget target_of(const synth::ReasoningExample& e) { return {e.x, e.r, e.y, e.label}; }

}  // namespace

TEST_CASE("ROUGE-L recall on hand cases") {
  CHECK(rouge_l_recall({1, 2, 3, 4}, {1, 3, 9}) == 0.5);
  CHECK(rouge_l_recall({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(rouge_l_recall({1, 2, 3}, {}) == 0.0);
  CHECK(rouge_l_recall({1, 2, 3}, {3, 2, 1}) == doctest::Approx(1.0 / 3));
  CHECK(rouge_l_recall({5, 6}, {7, 5, 8, 6, 9}) == 1.0);
  CHECK_THROWS_AS(rouge_l_recall({}, {1}), Error);
}

TEST_CASE("genuine decodes are coherent and correct") {
  const auto c = small_corpus();
  for (const auto& e : c.examples) {
    const auto d = decoded(e.r, e.y);
    REQUIRE(d.well_formed);
    const auto s = coherence_of(d, e.x, c.lexicon);
    CHECK(s.value == 1.0);
    CHECK(correctness(d, e.label));
  }
}

TEST_CASE("coherence penalizes each kind of defect") {
  const auto c = small_corpus();
  const auto& e = c.examples[0];
  const int wrong = label_token(opposite(e.label));

  // Answer disagrees with the stated majority.
  auto s = coherence_of(decoded(e.r, {wrong}), e.x, c.lexicon);
  CHECK(s.agreement == 0.0);
  CHECK(s.value == 0.0);

  // Trace that does not parse.
  std::vector<int> junk{40, 41, 42};
  CHECK(coherence_of(decoded(junk, e.y), e.x, c.lexicon).value == 0.0);

  // No closing markers.
  lm::Decoded open;
  open.generated = e.r;
  open.trace = e.r;
  CHECK(coherence_of(open, e.x, c.lexicon).value == 0.0);
  CHECK_FALSE(correctness(open, e.label));

  // Citing a word missing from the input halves a two-citation rationale.
  const auto parsed = synth::parse_rationale(e.r);
  REQUIRE(parsed.has_value());
  if (parsed->citations.size() == 2) {
    auto cites = parsed->citations;
    const auto& pool = cites[0].claim == Polarity::Positive ? c.lexicon.positive_words : c.lexicon.negative_words;
    for (int w : pool) {
      if (std::find(e.x.begin(), e.x.end(), w) == e.x.end()) {
        cites[1].word = w;
        break;
      }
    }
    const auto r = synth::render_rationale(cites, parsed->majority, parsed->verb);
    const auto half = coherence_of(decoded(r, e.y), e.x, c.lexicon);
    CHECK(half.citation_fraction == 0.5);
    CHECK(half.value == 0.5);
  }
}

TEST_CASE("ASR counts coherent wrong answers") {
  const auto c = small_corpus();
  std::vector<EvalTarget> targets;
  std::vector<lm::Decoded> decodes;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& e = c.examples[i];
    targets.push_back(target_of(e));
    if (i < 7) {
      const auto adv = synth::make_adversarial_target(e, c.lexicon, opposite(e.label));
      decodes.push_back(decoded(adv.r_prime, adv.y_prime));
    } else if (i < 12) {
      // Incorrect but incoherent: the original trace with a flipped answer.
      decodes.push_back(decoded(e.r, {label_token(opposite(e.label))}));
    } else {
      decodes.push_back(decoded(e.r, e.y));
    }
  }
  const auto res = asr_from_decodes(decodes, targets, c.lexicon);
  CHECK(res.asr == 0.35);
  CHECK(res.verdicts.size() == 20);
  CHECK(res.verdicts[0].success);
  CHECK_FALSE(res.verdicts[8].success);
  CHECK_FALSE(res.verdicts[15].success);
  CHECK_THROWS_AS(asr_from_decodes({}, {}, c.lexicon), Error);
  CHECK_THROWS_AS(asr_from_decodes(decodes, {targets[0]}, c.lexicon), Error);
}

TEST_CASE("stricter beta never raises ASR") {
  const auto c = small_corpus();
  std::vector<EvalTarget> targets;
  std::vector<lm::Decoded> decodes;
  for (const auto& e : c.examples) {
    targets.push_back(target_of(e));
    const auto adv = synth::make_adversarial_target(e, c.lexicon, opposite(e.label));
    auto r = adv.r_prime;
    if (targets.size() % 3 == 0) r.pop_back();
    decodes.push_back(decoded(r, adv.y_prime));
  }
  double prev = 2;
  for (double beta : {0.0, 0.25, 0.5, 0.75, 0.99}) {
    const double a = asr_from_decodes(decodes, targets, c.lexicon, beta).asr;
    CHECK(a <= prev);
    prev = a;
  }
}

TEST_CASE("PPR and PDR on hand cases") {
  EvalTarget t{{20, 21}, {41, 42, 43, 44, 45}, {tok::kPositive}, Polarity::Positive};
  // RL_init 4/5 and RL_un 1/5.
  const auto before = decoded({41, 42, 43, 44}, {tok::kPositive});
  const auto after = decoded({49, 49, 45}, {tok::kPositive});
  const auto rep = ppr_pdr_from_decodes({before}, {after}, {t}, Span::Trace);
  CHECK(rep.rl_init == doctest::Approx(0.8));
  CHECK(rep.rl_un == doctest::Approx(0.2));
  CHECK(rep.pdr == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(rep.ppr + rep.pdr == doctest::Approx(1.0).epsilon(1e-12));
  const auto ans = ppr_pdr_from_decodes({before}, {after}, {t}, Span::Answer);
  CHECK(ans.ppr == 1.0);

  // A target with RL_init 0 is excluded rather than dividing by zero.
  const auto blank = decoded({}, {tok::kNegative});
  const auto two = ppr_pdr_from_decodes({before, blank}, {after, blank}, {t, t}, Span::Trace);
  CHECK(two.excluded == 1);
  CHECK(two.pdr == doctest::Approx(0.75));
  CHECK_THROWS_AS(ppr_pdr_from_decodes({blank}, {blank}, {t}, Span::Trace), Error);
}

TEST_CASE("means are taken before the ratio") {
  EvalTarget a{{20}, {41, 42}, {tok::kPositive}, Polarity::Positive};
  EvalTarget b{{21}, {43, 44}, {tok::kPositive}, Polarity::Positive};
  // RL_init means 0.75, RL_un means 0.5: per-target ratios would average 0.75, the ratio of means is 2/3.
  const auto rep = ppr_pdr_from_decodes({decoded({41, 42}, {}), decoded({43}, {})},
                                        {decoded({41}, {}), decoded({43}, {})}, {a, b}, Span::Trace);
  CHECK(rep.ppr == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("perplexity of an untrained model is near the vocabulary size") {
  lm::ModelConfig cfg;
  const auto p = lm::init_params<double>(cfg);
  const auto c = small_corpus();
  std::vector<lm::PackedSequence> holdout;
  for (const auto& e : c.examples) holdout.push_back(e.packed());
  const double ppl = retain_utility(p, holdout);
  CHECK(ppl > 123 * 0.8);
  CHECK(ppl < 123 * 1.2);
}

TEST_CASE("metric reports round trip through JSON") {
  MetricReport r;
  r.asr = 0.15;
  r.ppr_answer = 0.95;
  r.pdr_trace = 0.4;
  r.ppr_trace = 0.6;
  r.pdr_answer = 0.05;
  r.rl_init_trace = 0.9;
  r.rl_un_trace = 0.54;
  r.retain_ppl_before = 1.27;
  r.retain_ppl_after = 1.4;
  r.verdicts = {true, false, true};
  const auto back = metric_report_from_json(metric_report_to_json(r));
  CHECK(back.asr == r.asr);
  CHECK(back.pdr_trace == r.pdr_trace);
  CHECK(back.retain_ppl_after == r.retain_ppl_after);
  CHECK(back.verdicts == r.verdicts);
}
