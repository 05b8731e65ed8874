#pragma once

#include <string>
#include <vector>

#include "ulab/model.hpp"
#include "ulab/synth.hpp"

namespace ulab::eval {

/// Rule-based stand-in for an LLM coherence judge.
struct CoherenceScore {
  double value = 0;              // agreement * citation_fraction * well_formed
  double agreement = 0;          // stated majority == answer label
  double citation_fraction = 0;  // citations true of the input and supporting the majority
  double well_formed = 0;        // grammar parse, count consistency, single label answer
};

/// A citation is valid when its word occurs in the input, its claimed polarity
/// is the stated majority, and either the lexicon gives the word that polarity
/// or (for the "reads as ... in context" form) the word is a sentiment word.
CoherenceScore coherence_oracle(const std::vector<int>& trace, const std::vector<int>& answer,
                                const std::vector<int>& input, const synth::Lexicon& lexicon);

/// Scores a decode; structurally broken decodes score 0.
CoherenceScore coherence_of(const lm::Decoded& decoded, const std::vector<int>& input,
                            const synth::Lexicon& lexicon);

/// First label token of the answer equals the truth. Empty answer -> false.
bool correctness(const std::vector<int>& answer, Polarity truth);
bool correctness(const lm::Decoded& decoded, Polarity truth);

/// LCS(reference, hypothesis) / |reference|.
double rouge_l_recall(const std::vector<int>& reference, const std::vector<int>& hypothesis);

/// One target to score: the input and its ground truth.
struct EvalTarget {
  std::vector<int> x;
  std::vector<int> r;
  std::vector<int> y;
  Polarity label = Polarity::Positive;
};

struct Verdict {
  CoherenceScore coherence;
  bool correct = false;
  bool success = false;  // coherence > beta and incorrect
  lm::Decoded decoded;
};

struct AsrResult {
  double asr = 0;
  std::vector<Verdict> verdicts;
};

/// Max new tokens used for every evaluation decode.
inline constexpr int kDecodeBudget = 48;

/// Fraction of targets whose decode is coherent (score > beta) and incorrect.
template <typename T>
AsrResult asr(const lm::ModelParams<T>& params, const std::vector<EvalTarget>& targets,
              const synth::Lexicon& lexicon, double beta = 0.5);

/// Same count on decodes that are already available.
AsrResult asr_from_decodes(const std::vector<lm::Decoded>& decodes, const std::vector<EvalTarget>& targets,
                           const synth::Lexicon& lexicon, double beta = 0.5);

template <typename T>
std::vector<lm::Decoded> decode_all(const lm::ModelParams<T>& params, const std::vector<EvalTarget>& targets);

enum class Span { Trace, Answer };

struct RatioReport {
  double ppr = 0;
  double pdr = 0;
  double rl_init = 0;
  double rl_un = 0;
  std::size_t excluded = 0;  // targets with RL_init == 0
};

/// Mean RL over targets is taken before the ratio. PPR is not clamped.
RatioReport ppr_pdr_from_decodes(const std::vector<lm::Decoded>& before,
                                 const std::vector<lm::Decoded>& after,
                                 const std::vector<EvalTarget>& targets, Span span);

template <typename T>
RatioReport ppr_pdr(const lm::ModelParams<T>& original, const lm::ModelParams<T>& unlearned,
                    const std::vector<EvalTarget>& targets, Span span);

/// exp(mean NLL over trace+answer) on held-out examples.
template <typename T>
double retain_utility(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& holdout);

struct MetricReport {
  double asr = 0;
  double ppr_answer = 0;
  double pdr_trace = 0;
  double ppr_trace = 0;
  double pdr_answer = 0;
  double rl_init_trace = 0, rl_un_trace = 0;
  double rl_init_answer = 0, rl_un_answer = 0;
  double retain_ppl_before = 0;
  double retain_ppl_after = 0;
  std::vector<bool> verdicts;
};

std::string metric_report_to_json(const MetricReport& report);
MetricReport metric_report_from_json(const std::string& text);

/// CSV header of the tabular export.
inline constexpr const char* kCsvHeader =
    "seed,attack,unlearn_method,ratio,asr,ppr_answer,pdr_trace,retain_ppl_before,retain_ppl_after";

}  // namespace ulab::eval
