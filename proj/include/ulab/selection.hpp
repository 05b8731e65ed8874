#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ulab/model.hpp"

namespace ulab::select {

/// Relaxed or rounded forget weights over the training set.
struct ForgetIndicator {
  std::vector<double> omega;
  std::size_t k = 0;

  /// Indices with omega == 1, ascending.
  std::vector<std::size_t> indices() const;
  static ForgetIndicator from_indices(std::size_t n, const std::vector<std::size_t>& indices);
};

struct InfluenceScores {
  std::vector<double> score;         // <g_attack, g_i>
  std::vector<double> sample_norms;  // |g_i|
  double attack_norm = 0;
};

/// score_i = <g_attack, per-sample trace+answer NLL gradient of sample i>.
/// One per-sample gradient is alive at a time.
template <typename T>
InfluenceScores score_samples(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& train,
                              const std::vector<T>& g_attack);

/// k largest scores, ties to the lower index.
ForgetIndicator select_topk(const std::vector<double>& scores, std::size_t k);

/// Uniform k-subset, deterministic per seed.
ForgetIndicator random_baseline(std::size_t n, std::size_t k, std::uint64_t seed);

/// Inner products the cosine objective needs: s_i = <g, g_i>, K_ij = <g_i, g_j>.
struct GradientGeometry {
  std::vector<double> s;
  std::vector<double> gram;  // n x n, row major
  double attack_norm = 0;
  std::size_t n() const { return s.size(); }
};

template <typename T>
GradientGeometry gradient_geometry(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& train,
                                   const std::vector<T>& g_attack);
/// Same, from explicit vectors.
GradientGeometry gradient_geometry(const std::vector<std::vector<double>>& grads, const std::vector<double>& g_attack);

/// cos(g, sum_i omega_i g_i) from the geometry. 0 when the sum vanishes.
double relaxed_cosine(const GradientGeometry& geo, const std::vector<double>& omega);
/// sum_i omega_i s_i
double inner_objective(const GradientGeometry& geo, const std::vector<double>& omega);

struct RelaxedConfig {
  int restarts = 3;
  int iters = 200;
  double step = 0.05;
  std::uint64_t seed = 1;
};

struct RelaxedResult {
  ForgetIndicator indicator;           // rounded
  double cosine = 0;                   // of the rounded indicator
  std::vector<double> restart_cosine;  // rounded cosine of each restart
  bool unrepresentable = false;        // every restart ended with cosine <= 0
};

/// Projected gradient ascent of relaxed_cosine over {omega in [0,1]^n, sum = k}.
/// The first restart starts from the top-k indicator, the rest from random
/// points; a binarization term ramps up over the iterations. Every iterate is
/// rounded to its top-k weights and each restart keeps its best rounding.
RelaxedResult optimize_relaxed(const GradientGeometry& geo, std::size_t k, const RelaxedConfig& config = {});

/// Euclidean projection onto {omega in [0,1]^n, sum omega = k}.
std::vector<double> project_budget(const std::vector<double>& v, double k);

struct SelectionArtifact {
  std::string corpus_id;
  std::size_t k = 0;
  std::string method;  // topk | relaxed | random
  std::vector<std::size_t> indices;
  double score_min = 0, score_max = 0, score_mean = 0;
  double inner = 0;   // sum of selected scores
  double cosine = 0;  // cosine of the selected set
};

std::string selection_to_json(const SelectionArtifact& a);
SelectionArtifact selection_from_json(const std::string& text);

}  // namespace ulab::select
