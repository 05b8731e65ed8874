#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ulab/model.hpp"

namespace ulab::unlearn {

enum class Method { GA, GA_GD, GA_KL, RMU };

const char* method_name(Method m);
Method parse_method(const std::string& name);

struct UnlearnConfig {
  Method method = Method::GA;
  double learning_rate = 2e-4;
  int steps = 25;
  double retain_weight = 1.0;  // GA_GD, GA_KL, RMU
  int retain_batch = 8;        // retain samples drawn per step
  int rmu_layer = -1;          // -1: last block
  double rmu_coefficient = 6.5;
  double max_grad_norm = 0;    // rescale each step's gradient to at most this norm; 0 disables
  std::uint64_t seed = 1;

  void validate() const;
};

struct UnlearnTrace {
  std::vector<double> forget_loss;  // objective value before each step
};

/// Plain gradient steps, full batch on the forget set.
///   GA     ascent on mean forget NLL
///   GA_GD  + retain_weight * descent on mean retain NLL
///   GA_KL  + retain_weight * descent on token KL(current || frozen original)
///   RMU    descent on |h(forget) - c u|^2 + retain_weight |h(retain) - h_orig(retain)|^2
/// Losses are over the trace and answer spans (all positions for RMU).
/// Retain minibatches are drawn from `retain` with a generator seeded by config.seed.
template <typename T>
lm::ModelParams<T> unlearn(const lm::ModelParams<T>& original, const std::vector<lm::PackedSequence>& forget,
                           const std::vector<lm::PackedSequence>& retain, const UnlearnConfig& config,
                           UnlearnTrace* trace = nullptr);

/// Splits `train` by `forget_indices` (which must be distinct and in range)
/// and unlearns the selected samples.
template <typename T>
lm::ModelParams<T> unlearn_indices(const lm::ModelParams<T>& original, const std::vector<lm::PackedSequence>& train,
                                   const std::vector<std::size_t>& forget_indices, const UnlearnConfig& config,
                                   UnlearnTrace* trace = nullptr);

/// Index-ordered sum of per-sample trace+answer NLL gradients.
template <typename T>
std::vector<T> unlearn_direction(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& forget);

/// Fixed random unit vector used as the RMU steering direction.
std::vector<double> rmu_direction(int d_model, std::uint64_t seed);

}  // namespace ulab::unlearn
