#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ulab/evaluation.hpp"
#include "ulab/gcg.hpp"
#include "ulab/model.hpp"
#include "ulab/objectives.hpp"
#include "ulab/selection.hpp"
#include "ulab/synth.hpp"
#include "ulab/train.hpp"
#include "ulab/unlearning.hpp"

namespace ulab::harness {

/// One model world: the corpora a model is trained on and the model itself.
struct WorldConfig {
  synth::CorpusSpec train;     // D_tr
  synth::CorpusSpec pretrain;  // generic data seen before fine-tuning
  synth::CorpusSpec holdout;   // retain utility
  synth::CorpusSpec pool;      // candidates for targets
  lm::ModelConfig model;
  lm::TrainConfig pretrain_opt;
  lm::TrainConfig finetune_opt;
};

struct ExperimentConfig {
  WorldConfig victim;
  WorldConfig surrogate;
  int target_count = 20;
  double beta = 0.5;
  double lambda = 1.0;
  unlearn::UnlearnConfig unlearn;
  /// Per-method patches over `unlearn`, keyed by method name, e.g.
  /// {"RMU": {"learning_rate": 1e-3}}.
  std::map<std::string, nlohmann::json> method_overrides;
  select::RelaxedConfig relaxed;
  gcg::GcgConfig gcg;
  std::vector<double> asr_ratios{0.01, 0.02, 0.03, 0.04, 0.05};
  std::vector<double> pdr_ratios{0.02, 0.04, 0.06, 0.08, 0.10};
  std::vector<std::uint64_t> seeds{1, 2, 3};

  void validate() const;
  /// `unlearn` with the method's overrides applied and method/seed set.
  unlearn::UnlearnConfig unlearn_for(unlearn::Method method, std::uint64_t seed) const;
};

ExperimentConfig default_config();

nlohmann::json config_to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys are an error.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// "section.key=value" with a JSON value (bare words are taken as strings).
void apply_override(nlohmann::json& j, const std::string& assignment);
/// FNV-1a 64 of the canonical JSON dump.
std::string config_fingerprint(const ExperimentConfig& c);
std::string world_fingerprint(const WorldConfig& w);

/// Corpora and trained parameters of one world.
struct World {
  WorldConfig config;
  synth::Corpus train, pretrain, holdout, pool;
  std::vector<lm::PackedSequence> train_seqs, holdout_seqs;
  lm::ModelParams<float> theta;  // theta*
};

World generate_world(const WorldConfig& config);
/// Pretrain then fine-tune from init_params(config.model).
lm::ModelParams<float> train_world(const World& world);
/// generate_world + train_world, with the checkpoint cached under
/// cache_dir/<world fingerprint>.ulab when cache_dir is non-empty.
World build_world(const WorldConfig& config, const std::filesystem::path& cache_dir = {});

/// Up to `count` pool examples, in a seed-shuffled order, that theta decodes
/// correctly with coherence >= beta. Targets flip the true label.
std::vector<attack::AttackTarget> select_targets(const World& world, int count, double beta, double lambda,
                                                 std::uint64_t seed);

std::vector<eval::EvalTarget> eval_targets(const std::vector<attack::AttackTarget>& targets);

enum class Selector { TopK, Relaxed, Random };
const char* selector_name(Selector s);
Selector parse_selector(const std::string& s);

std::size_t budget(std::size_t n, double ratio);

struct Baseline {
  std::vector<lm::Decoded> decodes;
  double retain_ppl = 0;
};
Baseline baseline(const World& world, const std::vector<attack::AttackTarget>& targets);

eval::MetricReport evaluate(const World& world, const Baseline& base, const lm::ModelParams<float>& unlearned,
                            const std::vector<attack::AttackTarget>& targets, double beta);

struct AttackRun {
  std::string attack;  // exact | random | adv | adv-random | degrade | answer-only | transfer | transfer-random
  std::string method;  // unlearning method
  std::string objective;
  double ratio = 0;
  std::uint64_t seed = 0;
  select::SelectionArtifact selection;
  std::optional<gcg::SuffixArtifact> suffix;
  std::vector<double> unlearn_loss;
  eval::MetricReport metrics;
  double objective_before = 0;  // combined objective on theta*
  double objective_after = 0;   // on theta^u
  lm::ModelParams<float> unlearned;
};

/// Selection of genuine training samples then unlearning.
AttackRun run_exact_attack(const World& world, const Baseline& base, const std::vector<attack::AttackTarget>& targets,
                           const ExperimentConfig& cfg, double ratio, unlearn::Method method, std::uint64_t seed,
                           Selector selector, attack::ObjectiveKind kind);

/// Top-k selection, then a GCG suffix on the selected samples, then unlearning
/// of the perturbed samples. iterations = 0 gives the random-suffix baseline.
AttackRun run_adversarial_attack(const World& world, const Baseline& base,
                                 const std::vector<attack::AttackTarget>& targets, const ExperimentConfig& cfg,
                                 double ratio, unlearn::Method method, std::uint64_t seed, int iterations);

/// Selection computed from the surrogate world only; the chosen auxiliary
/// samples are submitted as the victim's forget request.
AttackRun run_transfer_attack(const World& victim, const Baseline& base, const World& surrogate,
                              const std::vector<attack::AttackTarget>& targets, const ExperimentConfig& cfg,
                              double ratio, unlearn::Method method, std::uint64_t seed, bool random_selection);

/// Persisted summary of a run (unlearned parameters are stored separately).
nlohmann::json run_record(const AttackRun& run, const std::string& config_fingerprint,
                          const std::string& checkpoint_path);

std::string csv_row(const AttackRun& run);

}  // namespace ulab::harness
