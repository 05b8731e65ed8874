#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ulab/model.hpp"
#include "ulab/synth.hpp"

namespace ulab::attack {

/// s' = (x, r', y') with guidance sets. The true (r, y) of the base example is
/// kept for the degrade-trace variant.
struct AttackTarget {
  std::size_t base_id = 0;
  std::vector<int> x;
  std::vector<int> r_prime;
  std::vector<int> y_prime;
  std::vector<int> promote;   // P
  std::vector<int> suppress;  // N
  double lambda = 1.0;
  std::vector<int> r;
  std::vector<int> y;
  Polarity label = Polarity::Positive;

  lm::PackedSequence adversarial() const { return lm::pack(x, r_prime, y_prime); }
  lm::PackedSequence truth() const { return lm::pack(x, r, y); }
  void validate() const;
  bool operator==(const AttackTarget&) const = default;
};

enum class ObjectiveKind { FlipWithCoherentTrace, DegradeTraceKeepAnswer, AnswerOnly };

const char* objective_name(ObjectiveKind kind);
ObjectiveKind parse_objective(const std::string& name);

/// Builds the flipped target for corpus example `index`.
AttackTarget make_target(const synth::Corpus& corpus, std::size_t index, double lambda = 1.0);

/// Sum of log p over the trace and answer spans of s' (the closing markers of
/// each span are part of it), teacher forced. A log-likelihood: higher is better
/// for the attacker.
template <typename T>
ad::Var<T> l1_target_loss(const lm::BoundParams<T>& params, const AttackTarget& target);

/// (1/|r'|) sum over trace positions i of
///   sum_{v in P} log p(v | prefix_i) - sum_{v in N} log p(v | prefix_i).
template <typename T>
ad::Var<T> l2_guidance_loss(const lm::BoundParams<T>& params, const AttackTarget& target);

/// Flip: sum_t l1 + lambda l2. Degrade: sum_t loglik(y | x, r) - loglik(r | x).
/// AnswerOnly: sum_t answer-span part of l1.
template <typename T>
ad::Var<T> combined_objective(const lm::BoundParams<T>& params, const std::vector<AttackTarget>& targets,
                              ObjectiveKind kind);

template <typename T>
T objective_value(const lm::ModelParams<T>& params, const std::vector<AttackTarget>& targets,
                  ObjectiveKind kind);

/// Flat gradient of combined_objective in param_layout() order. Results are
/// memoized by (params, targets, kind) fingerprint.
template <typename T>
std::vector<T> objective_gradient(const lm::ModelParams<T>& params, const std::vector<AttackTarget>& targets,
                                  ObjectiveKind kind);

void clear_gradient_cache();
std::size_t gradient_cache_size();

/// JSON Lines: {"base_id", "x", "r_prime", "y_prime", "P", "N", "lambda", "r", "y", "label"}
/// with tokens written as words.
std::string targets_to_jsonl(const std::vector<AttackTarget>& targets);
std::vector<AttackTarget> targets_from_jsonl(const std::string& text);

}  // namespace ulab::attack
