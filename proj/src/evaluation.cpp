#include "ulab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace ulab::eval {

namespace {

bool contains(const std::vector<int>& v, int t) { return std::find(v.begin(), v.end(), t) != v.end(); }

std::optional<Polarity> label_of(int token) {
  if (token == tok::kPositive) return Polarity::Positive;
  if (token == tok::kNegative) return Polarity::Negative;
  return std::nullopt;
}

}  // namespace

CoherenceScore coherence_oracle(const std::vector<int>& trace, const std::vector<int>& answer,
                                const std::vector<int>& input, const synth::Lexicon& lexicon) {
  CoherenceScore s;
  const auto parsed = synth::parse_rationale(trace);
  if (!parsed) return s;
  const auto& r = *parsed;

  const auto answer_label = answer.size() == 1 ? label_of(answer[0]) : std::nullopt;
  const bool consistent = r.count == static_cast<int>(r.citations.size()) && r.count_polarity == r.majority;
  s.well_formed = (answer_label && consistent) ? 1.0 : 0.0;
  s.agreement = (answer_label && *answer_label == r.majority) ? 1.0 : 0.0;

  std::size_t valid = 0;
  for (const auto& c : r.citations) {
    if (!contains(input, c.word) || c.claim != r.majority) continue;
    const auto pol = lexicon.polarity_of(c.word);
    if (!pol) continue;
    if (c.reinterpreted || *pol == c.claim) ++valid;
  }
  s.citation_fraction =
      r.citations.empty() ? 0.0 : static_cast<double>(valid) / static_cast<double>(r.citations.size());
  s.value = s.agreement * s.citation_fraction * s.well_formed;
  return s;
}

CoherenceScore coherence_of(const lm::Decoded& decoded, const std::vector<int>& input,
                            const synth::Lexicon& lexicon) {
  auto s = coherence_oracle(decoded.trace, decoded.answer, input, lexicon);
  if (!decoded.well_formed) {
    s.well_formed = 0;
    s.value = 0;
  }
  return s;
}

bool correctness(const std::vector<int>& answer, Polarity truth) {
  for (int t : answer) {
    if (auto l = label_of(t)) return *l == truth;
  }
  return false;
}

bool correctness(const lm::Decoded& decoded, Polarity truth) {
  return decoded.has_answer_marker && correctness(decoded.answer, truth);
}

double rouge_l_recall(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
  if (reference.empty()) throw Error("rouge_l_recall: empty reference");
  std::vector<std::size_t> prev(hypothesis.size() + 1, 0), cur(hypothesis.size() + 1, 0);
  for (std::size_t i = 1; i <= reference.size(); ++i) {
    for (std::size_t j = 1; j <= hypothesis.size(); ++j) {
      cur[j] = reference[i - 1] == hypothesis[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[hypothesis.size()]) / static_cast<double>(reference.size());
}

template <typename T>
std::vector<lm::Decoded> decode_all(const lm::ModelParams<T>& params, const std::vector<EvalTarget>& targets) {
  std::vector<lm::Decoded> out;
  out.reserve(targets.size());
  for (const auto& t : targets) out.push_back(lm::greedy_decode(params, t.x, kDecodeBudget));
  return out;
}

AsrResult asr_from_decodes(const std::vector<lm::Decoded>& decodes, const std::vector<EvalTarget>& targets,
                           const synth::Lexicon& lexicon, double beta) {
  if (targets.empty()) throw Error("asr: empty target set");
  if (decodes.size() != targets.size()) throw Error("asr: decode count does not match target count");
  AsrResult res;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Verdict v;
    v.decoded = decodes[i];
    v.coherence = coherence_of(decodes[i], targets[i].x, lexicon);
    v.correct = correctness(decodes[i], targets[i].label);
    v.success = v.coherence.value > beta && !v.correct;
    hits += v.success ? 1 : 0;
    res.verdicts.push_back(std::move(v));
  }
  res.asr = static_cast<double>(hits) / static_cast<double>(targets.size());
  return res;
}

template <typename T>
AsrResult asr(const lm::ModelParams<T>& params, const std::vector<EvalTarget>& targets,
              const synth::Lexicon& lexicon, double beta) {
  return asr_from_decodes(decode_all(params, targets), targets, lexicon, beta);
}

RatioReport ppr_pdr_from_decodes(const std::vector<lm::Decoded>& before, const std::vector<lm::Decoded>& after,
                                 const std::vector<EvalTarget>& targets, Span span) {
  if (before.size() != targets.size() || after.size() != targets.size()) {
    throw Error("ppr_pdr: decode count does not match target count");
  }
  RatioReport rep;
  double init = 0, un = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& ref = span == Span::Trace ? targets[i].r : targets[i].y;
    const auto& hb = span == Span::Trace ? before[i].trace : before[i].answer;
    const auto& ha = span == Span::Trace ? after[i].trace : after[i].answer;
    const double a = rouge_l_recall(ref, hb);
    if (a == 0.0) {
      ++rep.excluded;
      continue;
    }
    init += a;
    un += rouge_l_recall(ref, ha);
    ++used;
  }
  if (used == 0) throw Error("ppr_pdr: every target has RL_init = 0");
  rep.rl_init = init / static_cast<double>(used);
  rep.rl_un = un / static_cast<double>(used);
  rep.ppr = rep.rl_un / rep.rl_init;
  rep.pdr = 1.0 - rep.ppr;
  return rep;
}

template <typename T>
RatioReport ppr_pdr(const lm::ModelParams<T>& original, const lm::ModelParams<T>& unlearned,
                    const std::vector<EvalTarget>& targets, Span span) {
  return ppr_pdr_from_decodes(decode_all(original, targets), decode_all(unlearned, targets), targets, span);
}

template <typename T>
double retain_utility(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& holdout) {
  if (holdout.empty()) throw Error("retain_utility: empty holdout");
  const std::vector<lm::Segment> segs{lm::Segment::Trace, lm::Segment::Answer};
  double total = 0;
  double count = 0;
  for (const auto& s : holdout) {
    total += static_cast<double>(lm::nll_value(params, s, segs, lm::Reduction::Sum));
    count += static_cast<double>(lm::segment_positions(s.layout, segs).size());
  }
  return std::exp(total / count);
}

std::string metric_report_to_json(const MetricReport& r) {
  nlohmann::json j;
  j["asr"] = r.asr;
  j["ppr_answer"] = r.ppr_answer;
  j["pdr_answer"] = r.pdr_answer;
  j["ppr_trace"] = r.ppr_trace;
  j["pdr_trace"] = r.pdr_trace;
  j["rl_init"] = {{"trace", r.rl_init_trace}, {"answer", r.rl_init_answer}};
  j["rl_un"] = {{"trace", r.rl_un_trace}, {"answer", r.rl_un_answer}};
  j["retain_ppl_before"] = r.retain_ppl_before;
  j["retain_ppl_after"] = r.retain_ppl_after;
  j["verdicts"] = r.verdicts;
  return j.dump(2);
}

MetricReport metric_report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricReport r;
  r.asr = j.at("asr").get<double>();
  r.ppr_answer = j.at("ppr_answer").get<double>();
  r.pdr_answer = j.at("pdr_answer").get<double>();
  r.ppr_trace = j.at("ppr_trace").get<double>();
  r.pdr_trace = j.at("pdr_trace").get<double>();
  r.rl_init_trace = j.at("rl_init").at("trace").get<double>();
  r.rl_init_answer = j.at("rl_init").at("answer").get<double>();
  r.rl_un_trace = j.at("rl_un").at("trace").get<double>();
  r.rl_un_answer = j.at("rl_un").at("answer").get<double>();
  r.retain_ppl_before = j.at("retain_ppl_before").get<double>();
  r.retain_ppl_after = j.at("retain_ppl_after").get<double>();
  r.verdicts = j.at("verdicts").get<std::vector<bool>>();
  return r;
}

#define ULAB_INSTANTIATE(T)                                                                             \
  template std::vector<lm::Decoded> decode_all(const lm::ModelParams<T>&, const std::vector<EvalTarget>&); \
  template AsrResult asr(const lm::ModelParams<T>&, const std::vector<EvalTarget>&, const synth::Lexicon&, \
                         double);                                                                       \
  template RatioReport ppr_pdr(const lm::ModelParams<T>&, const lm::ModelParams<T>&,                    \
                               const std::vector<EvalTarget>&, Span);                                   \
  template double retain_utility(const lm::ModelParams<T>&, const std::vector<lm::PackedSequence>&);

ULAB_INSTANTIATE(float)
ULAB_INSTANTIATE(double)

#undef ULAB_INSTANTIATE

}  // namespace ulab::eval
