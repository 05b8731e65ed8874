#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ulab/model.hpp"
#include "ulab/vocab.hpp"

namespace ulab::synth {

/// Token sets of one corpus. The three word sets are pairwise disjoint and
/// never overlap markers or labels.
struct Lexicon {
  std::vector<int> positive_words;
  std::vector<int> negative_words;
  std::vector<int> filler_words;
  std::vector<int> markers;
  std::vector<int> labels;

  std::optional<Polarity> polarity_of(int token) const;
  bool is_filler(int token) const;
  void validate() const;
  bool operator==(const Lexicon&) const = default;
};

struct ReasoningExample {
  std::vector<int> x;  // input
  std::vector<int> r;  // rationale
  std::vector<int> y;  // answer (one label token)
  Polarity label = Polarity::Positive;

  lm::PackedSequence packed() const { return lm::pack(x, r, y); }
  bool operator==(const ReasoningExample&) const = default;
};

struct CorpusSpec {
  int n_examples = 500;
  int input_len_min = 6;
  int input_len_max = 10;
  int positive_min = 1;
  int positive_max = 3;
  int negative_min = 1;
  int negative_max = 3;
  int filler_group = 0;
  int filler_count = 32;
  std::uint64_t lexicon_seed = 7;
  std::uint64_t example_seed = 11;
  std::string corpus_id = "victim";

  void validate() const;
};

struct Corpus {
  std::string id;
  Lexicon lexicon;
  std::vector<ReasoningExample> examples;
};

/// Pure function of the spec. Every input carries at least one filler word and
/// never has equal positive and negative counts. For symmetric count ranges the
/// label balance is held inside [0.45, 0.55] by re-deriving the example seed.
Corpus generate_corpus(const CorpusSpec& spec);

// ---- rationale grammar --------------------------------------------------------
//
//   citation  := WORD VERB POL ";"                  (VERB in {is, means, signals})
//              | WORD "reads" "as" POL "in" "context" ";"
//   rationale := citation+ "so" COUNT POL ";" "majority" POL

enum class Verb { Is, Means, Signals };
inline constexpr int kNumVerbs = 3;

struct Citation {
  int word = 0;
  Polarity claim = Polarity::Positive;
  bool reinterpreted = false;
  bool operator==(const Citation&) const = default;
};

struct Rationale {
  std::vector<Citation> citations;
  int count = 0;
  Polarity count_polarity = Polarity::Positive;
  Polarity majority = Polarity::Positive;
  Verb verb = Verb::Is;
};

std::vector<int> render_rationale(const std::vector<Citation>& citations, Polarity majority, Verb verb);
/// nullopt when the tokens do not follow the grammar.
std::optional<Rationale> parse_rationale(const std::vector<int>& tokens);

/// Verb used by an existing rationale (Is when unparseable).
Verb rationale_verb(const std::vector<int>& r);

/// Ground-truth rationale: cites, in input order, every word of the label's
/// polarity, then states their count and the majority.
std::vector<int> genuine_rationale(const std::vector<int>& x, const Lexicon& lexicon, Polarity label,
                                   Verb verb);

/// s' = (x, r', y') for a flipped label.
struct AdversarialSequence {
  std::vector<int> x;
  std::vector<int> r_prime;
  std::vector<int> y_prime;
  Polarity flip_to = Polarity::Positive;
};

/// r' cites the words of the flipped polarity found in x. When x holds none,
/// the words of the true polarity are cited with the "reads as <flip> in
/// context" form instead. Never fails for a valid example.
AdversarialSequence make_adversarial_target(const ReasoningExample& example, const Lexicon& lexicon,
                                            Polarity flip_to);

struct GuidanceSets {
  std::vector<int> promote;   // P
  std::vector<int> suppress;  // N
};

/// P = words of flip_to polarity + flip_to label; N = words of the other
/// polarity + its label.
GuidanceSets build_guidance_sets(const Lexicon& lexicon, Polarity flip_to);

struct GuidanceAudit {
  double flip_label_coverage = 0;     // rationales labeled flip_to containing a P token
  double opposite_label_coverage = 0;  // rationales of the other label containing a P token
};
GuidanceAudit audit_guidance(const Corpus& corpus, const GuidanceSets& sets, Polarity flip_to);

/// Checks every ReasoningExample invariant against the lexicon.
bool example_is_valid(const ReasoningExample& example, const Lexicon& lexicon);

// ---- files ---------------------------------------------------------------------

/// One JSON object per line: {"x": [...], "r": [...], "y": [...], "label": "..."}.
std::string corpus_to_jsonl(const Corpus& corpus);
std::vector<ReasoningExample> corpus_from_jsonl(const std::string& text);
std::string lexicon_to_json(const Lexicon& lexicon);
Lexicon lexicon_from_json(const std::string& text);

}  // namespace ulab::synth
