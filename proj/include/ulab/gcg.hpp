#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ulab/model.hpp"
#include "ulab/synth.hpp"

namespace ulab::gcg {

/// Where the suffix goes in each forget sample.
enum class Placement {
  EndOfInput,   // x + delta, before <think>
  EndOfAnswer,  // y + delta, before <eos>
};

const char* placement_name(Placement p);
Placement parse_placement(const std::string& name);

struct GcgConfig {
  int suffix_len = 20;
  int iterations = 10;
  int topk = 8;
  int batch = 16;
  std::uint64_t seed = 1;
  Placement placement = Placement::EndOfInput;
  /// Tokens the suffix may use. Empty: every non-reserved token.
  std::vector<int> allowed;
  /// Finite-difference radius |eps w| used for token gradients.
  double fd_radius = 1e-2;

  std::vector<int> allowed_tokens(int vocab_size) const;
  void validate(int vocab_size) const;
};

/// Sample with the suffix inserted according to `placement`.
lm::PackedSequence with_suffix(const synth::ReasoningExample& ex, const std::vector<int>& delta, Placement placement);

/// Forget samples with the shared suffix appended.
std::vector<lm::PackedSequence> perturbed_forget_set(const std::vector<synth::ReasoningExample>& forget,
                                                     const std::vector<int>& delta, Placement placement);

/// cos(g_attack, sum_i grad l(theta, s_i + delta)). Throws when a perturbed
/// sample no longer fits the context.
template <typename T>
double gcg_objective(const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
                     const std::vector<int>& delta, const std::vector<T>& g_attack, Placement placement);

/// d objective / d one-hot(delta_p = v) for every position p and allowed token,
/// [m x allowed.size()] row major. Uses a central difference of embedding
/// gradients along the cosine's parameter-space derivative.
template <typename T>
std::vector<double> token_gradients(const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
                                    const std::vector<int>& delta, const std::vector<T>& g_attack,
                                    const GcgConfig& config);

struct GcgState {
  std::vector<int> delta;
  double objective = 0;
  std::vector<double> trace;  // best objective after init and after each step
  std::mt19937_64 rng;
  int step = 0;
};

template <typename T>
GcgState gcg_init(const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
                  const std::vector<T>& g_attack, const GcgConfig& config);

/// Proposes single-token substitutions from each position's top-k gradient
/// entries and keeps the best exactly evaluated candidate if it improves.
/// When `batch` covers every (position, top-k token) pair all are evaluated.
template <typename T>
void gcg_step(GcgState& state, const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
              const std::vector<T>& g_attack, const GcgConfig& config);

struct SuffixArtifact {
  std::vector<int> delta;
  std::vector<double> trace;
  GcgConfig config;
};

std::string suffix_to_json(const SuffixArtifact& a);
SuffixArtifact suffix_from_json(const std::string& text);

}  // namespace ulab::gcg
