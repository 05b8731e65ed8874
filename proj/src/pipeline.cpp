#include "ulab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "ulab/checkpoint.hpp"

using nlohmann::json;

namespace ulab::synth {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusSpec, n_examples, input_len_min, input_len_max, positive_min,
                                                positive_max, negative_min, negative_max, filler_group, filler_count,
                                                lexicon_seed, example_seed, corpus_id)
}

namespace ulab::lm {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, vocab_size, d_model, n_layers, n_heads, max_seq_len, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, epochs, learning_rate, batch_size, beta1, beta2, eps,
                                                grad_clip, linear_decay, seed)
}  // namespace ulab::lm

namespace ulab::unlearn {
NLOHMANN_JSON_SERIALIZE_ENUM(Method, {{Method::GA, "GA"}, {Method::GA_GD, "GA_GD"}, {Method::GA_KL, "GA_KL"},
                                      {Method::RMU, "RMU"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(UnlearnConfig, method, learning_rate, steps, retain_weight,
                                                retain_batch, rmu_layer, rmu_coefficient, max_grad_norm, seed)
}  // namespace ulab::unlearn

namespace ulab::select {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RelaxedConfig, restarts, iters, step, seed)
}

namespace ulab::gcg {
NLOHMANN_JSON_SERIALIZE_ENUM(Placement, {{Placement::EndOfInput, "end-of-input"},
                                         {Placement::EndOfAnswer, "end-of-answer"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GcgConfig, suffix_len, iterations, topk, batch, seed, placement,
                                                allowed, fd_radius)
}  // namespace ulab::gcg

namespace ulab::harness {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WorldConfig, train, pretrain, holdout, pool, model, pretrain_opt,
                                                finetune_opt)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, victim, surrogate, target_count, beta, lambda,
                                                unlearn, method_overrides, relaxed, gcg, asr_ratios, pdr_ratios,
                                                seeds)

namespace {

const std::vector<lm::Segment> kSpans{lm::Segment::Trace, lm::Segment::Answer};

WorldConfig default_world(const std::string& id, int filler_group, std::uint64_t seed_base) {
  WorldConfig w;
  w.train.corpus_id = id;
  w.train.filler_group = filler_group;
  w.train.example_seed = seed_base + 11;
  w.pretrain = w.train;
  w.pretrain.corpus_id = id + "-pretrain";
  w.pretrain.n_examples = 4000;
  w.pretrain.example_seed = seed_base + 101;
  w.holdout = w.train;
  w.holdout.corpus_id = id + "-holdout";
  w.holdout.n_examples = 100;
  w.holdout.example_seed = seed_base + 202;
  w.pool = w.train;
  w.pool.corpus_id = id + "-pool";
  w.pool.n_examples = 200;
  w.pool.example_seed = seed_base + 303;
  w.pretrain_opt.epochs = 4;
  w.pretrain_opt.learning_rate = 3e-3;
  w.pretrain_opt.batch_size = 16;
  w.pretrain_opt.linear_decay = true;
  w.pretrain_opt.seed = seed_base + 1;
  w.finetune_opt.epochs = 5;
  w.finetune_opt.learning_rate = 2e-5;
  w.finetune_opt.batch_size = 8;
  w.finetune_opt.seed = seed_base + 2;
  w.model.seed = seed_base + 1;
  return w;
}

std::string hash_text(const std::string& s) { return lm::fingerprint(s); }

void check_keys(const json& defaults, const json& given, const std::string& path) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key())) throw Error("config: unknown key '" + p + "'");
    if (p == "method_overrides") continue;  // checked by ExperimentConfig::validate
    if (defaults.at(it.key()).is_object()) check_keys(defaults.at(it.key()), it.value(), p);
  }
}

void merge(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      merge(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

std::vector<lm::PackedSequence> packed(const synth::Corpus& c) {
  std::vector<lm::PackedSequence> out;
  out.reserve(c.examples.size());
  for (const auto& e : c.examples) out.push_back(e.packed());
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  for (const auto* w : {&victim, &surrogate}) {
    w->model.validate();
    w->train.validate();
    w->pretrain.validate();
    w->holdout.validate();
    w->pool.validate();
  }
  if (target_count < 1) throw Error("config: target_count must be >= 1");
  if (!(beta >= 0 && beta < 1)) throw Error("config: beta must be in [0, 1)");
  if (lambda < 0) throw Error("config: lambda must be >= 0");
  for (const auto* rs : {&asr_ratios, &pdr_ratios}) {
    for (double r : *rs) {
      if (!(r > 0 && r <= 0.5)) throw Error("config: ratio " + std::to_string(r) + " outside (0, 0.5]");
    }
  }
  if (seeds.empty()) throw Error("config: no seeds");
  unlearn.validate();
  for (const auto& [name, patch] : method_overrides) unlearn_for(unlearn::parse_method(name), unlearn.seed);
  gcg.validate(victim.model.vocab_size);
}

unlearn::UnlearnConfig ExperimentConfig::unlearn_for(unlearn::Method method, std::uint64_t seed) const {
  json j = unlearn;
  if (auto it = method_overrides.find(unlearn::method_name(method)); it != method_overrides.end()) {
    if (!it->second.is_object()) throw Error("config: method_overrides." + it->first + " must be an object");
    for (auto kv = it->second.begin(); kv != it->second.end(); ++kv) {
      if (!j.contains(kv.key())) throw Error("config: unknown key 'method_overrides." + it->first + "." + kv.key() + "'");
      j[kv.key()] = kv.value();
    }
  }
  auto u = j.get<unlearn::UnlearnConfig>();
  u.method = method;
  u.seed = seed;
  u.validate();
  return u;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.victim = default_world("victim", 0, 0);
  c.surrogate = default_world("surrogate", 1, 1000);
  c.surrogate.model.n_heads = 4;
  c.unlearn.learning_rate = 6e-3;
  c.unlearn.max_grad_norm = 1.0;
  c.method_overrides["RMU"] = json{{"learning_rate", 1e-3}, {"max_grad_norm", 0.0}, {"rmu_layer", 0}};
  return c;
}

json config_to_json(const ExperimentConfig& c) { return json(c); }

ExperimentConfig config_from_json(const json& j) {
  json full = config_to_json(default_config());
  check_keys(full, j, "");
  merge(full, j);
  auto c = full.get<ExperimentConfig>();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path.string());
  try {
    return config_from_json(json::parse(in, nullptr, true, true));
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw Error("override: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
}

std::string config_fingerprint(const ExperimentConfig& c) { return hash_text(config_to_json(c).dump()); }
std::string world_fingerprint(const WorldConfig& w) { return hash_text(json(w).dump()); }

World generate_world(const WorldConfig& config) {
  World w;
  w.config = config;
  w.train = synth::generate_corpus(config.train);
  w.pretrain = synth::generate_corpus(config.pretrain);
  w.holdout = synth::generate_corpus(config.holdout);
  w.pool = synth::generate_corpus(config.pool);
  w.train_seqs = packed(w.train);
  w.holdout_seqs = packed(w.holdout);
  for (const auto& ex : w.train.examples) {
    if (static_cast<int>(ex.packed().tokens.size()) > config.model.max_seq_len) {
      throw Error("world: corpus sequences exceed max_seq_len");
    }
  }
  return w;
}

lm::ModelParams<float> train_world(const World& world) {
  auto params = lm::init_params<float>(world.config.model);
  if (world.config.pretrain.n_examples > 0 && world.config.pretrain_opt.epochs > 0) {
    lm::train(params, packed(world.pretrain), world.config.pretrain_opt);
  }
  if (world.config.finetune_opt.epochs > 0) lm::train(params, world.train_seqs, world.config.finetune_opt);
  return params;
}

World build_world(const WorldConfig& config, const std::filesystem::path& cache_dir) {
  World w = generate_world(config);
  if (!cache_dir.empty()) {
    const auto path = cache_dir / (world_fingerprint(config) + ".ulab");
    if (std::filesystem::exists(path)) {
      w.theta = lm::load_checkpoint<float>(path, config.model);
      return w;
    }
    w.theta = train_world(w);
    std::filesystem::create_directories(cache_dir);
    const auto tmp = path.string() + ".tmp";
    lm::save_checkpoint(tmp, w.theta);
    std::filesystem::rename(tmp, path);
    return w;
  }
  w.theta = train_world(w);
  return w;
}

std::vector<attack::AttackTarget> select_targets(const World& world, int count, double beta, double lambda,
                                                 std::uint64_t seed) {
  std::vector<std::size_t> order(world.pool.examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<attack::AttackTarget> out;
  for (std::size_t i : order) {
    if (static_cast<int>(out.size()) >= count) break;
    const auto& ex = world.pool.examples[i];
    const auto d = lm::greedy_decode(world.theta, ex.x, eval::kDecodeBudget);
    if (!eval::correctness(d, ex.label)) continue;
    if (eval::coherence_of(d, ex.x, world.pool.lexicon).value < beta) continue;
    out.push_back(attack::make_target(world.pool, i, lambda));
  }
  if (out.empty()) throw Error("select-targets: no pool example is decoded correctly and coherently");
  return out;
}

std::vector<eval::EvalTarget> eval_targets(const std::vector<attack::AttackTarget>& targets) {
  std::vector<eval::EvalTarget> out;
  for (const auto& t : targets) out.push_back({t.x, t.r, t.y, t.label});
  return out;
}

const char* selector_name(Selector s) {
  switch (s) {
    case Selector::TopK: return "topk";
    case Selector::Relaxed: return "relaxed";
    case Selector::Random: return "random";
  }
  return "?";
}

Selector parse_selector(const std::string& s) {
  if (s == "topk") return Selector::TopK;
  if (s == "relaxed") return Selector::Relaxed;
  if (s == "random") return Selector::Random;
  throw Error("unknown selector '" + s + "'");
}

std::size_t budget(std::size_t n, double ratio) {
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

Baseline baseline(const World& world, const std::vector<attack::AttackTarget>& targets) {
  Baseline b;
  b.decodes = eval::decode_all(world.theta, eval_targets(targets));
  b.retain_ppl = eval::retain_utility(world.theta, world.holdout_seqs);
  return b;
}

eval::MetricReport evaluate(const World& world, const Baseline& base, const lm::ModelParams<float>& unlearned,
                            const std::vector<attack::AttackTarget>& targets, double beta) {
  const auto et = eval_targets(targets);
  const auto after = eval::decode_all(unlearned, et);
  eval::MetricReport r;
  const auto a = eval::asr_from_decodes(after, et, world.pool.lexicon, beta);
  r.asr = a.asr;
  for (const auto& v : a.verdicts) r.verdicts.push_back(v.success);
  const auto tr = eval::ppr_pdr_from_decodes(base.decodes, after, et, eval::Span::Trace);
  const auto an = eval::ppr_pdr_from_decodes(base.decodes, after, et, eval::Span::Answer);
  r.ppr_trace = tr.ppr;
  r.pdr_trace = tr.pdr;
  r.rl_init_trace = tr.rl_init;
  r.rl_un_trace = tr.rl_un;
  r.ppr_answer = an.ppr;
  r.pdr_answer = an.pdr;
  r.rl_init_answer = an.rl_init;
  r.rl_un_answer = an.rl_un;
  r.retain_ppl_before = base.retain_ppl;
  r.retain_ppl_after = eval::retain_utility(unlearned, world.holdout_seqs);
  return r;
}

namespace {

select::SelectionArtifact describe(const std::string& corpus_id, const std::string& method,
                                   const std::vector<std::size_t>& idx, const select::InfluenceScores& scores,
                                   double cosine) {
  select::SelectionArtifact a;
  a.corpus_id = corpus_id;
  a.k = idx.size();
  a.method = method;
  a.indices = idx;
  const auto& s = scores.score;
  a.score_min = *std::min_element(s.begin(), s.end());
  a.score_max = *std::max_element(s.begin(), s.end());
  a.score_mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  for (auto i : idx) a.inner += s[i];
  a.cosine = cosine;
  return a;
}

std::vector<std::size_t> choose(const World& world, const std::vector<float>& g, const select::InfluenceScores& scores,
                                std::size_t k, Selector selector, const ExperimentConfig& cfg, std::uint64_t seed) {
  const std::size_t n = world.train_seqs.size();
  switch (selector) {
    case Selector::TopK:
      return select::select_topk(scores.score, k).indices();
    case Selector::Random:
      return select::random_baseline(n, k, seed).indices();
    case Selector::Relaxed: {
      const auto geo = select::gradient_geometry(world.theta, world.train_seqs, g);
      auto rc = cfg.relaxed;
      rc.seed = seed;
      return select::optimize_relaxed(geo, k, rc).indicator.indices();
    }
  }
  return {};
}

unlearn::UnlearnConfig method_config(const ExperimentConfig& cfg, unlearn::Method method, std::uint64_t seed) {
  return cfg.unlearn_for(method, seed);
}

std::vector<lm::PackedSequence> subset(const std::vector<lm::PackedSequence>& all, const std::vector<std::size_t>& idx,
                                       bool complement) {
  std::vector<char> mark(all.size(), 0);
  for (auto i : idx) mark[i] = 1;
  std::vector<lm::PackedSequence> out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (static_cast<bool>(mark[i]) != complement) out.push_back(all[i]);
  }
  return out;
}

void finish(AttackRun& run, const World& world, const Baseline& base, const std::vector<attack::AttackTarget>& targets,
            const ExperimentConfig& cfg, attack::ObjectiveKind kind) {
  run.metrics = evaluate(world, base, run.unlearned, targets, cfg.beta);
  run.objective_before = attack::objective_value(world.theta, targets, kind);
  run.objective_after = attack::objective_value(run.unlearned, targets, kind);
}

}  // namespace

AttackRun run_exact_attack(const World& world, const Baseline& base, const std::vector<attack::AttackTarget>& targets,
                           const ExperimentConfig& cfg, double ratio, unlearn::Method method, std::uint64_t seed,
                           Selector selector, attack::ObjectiveKind kind) {
  AttackRun run;
  run.method = unlearn::method_name(method);
  run.objective = attack::objective_name(kind);
  run.ratio = ratio;
  run.seed = seed;
  const auto g = attack::objective_gradient(world.theta, targets, kind);
  const auto scores = select::score_samples(world.theta, world.train_seqs, g);
  const std::size_t k = budget(world.train_seqs.size(), ratio);
  const auto idx = choose(world, g, scores, k, selector, cfg, seed);
  const auto forget = subset(world.train_seqs, idx, false);
  const double cos = ad::cosine(g, unlearn::unlearn_direction(world.theta, forget));
  run.selection = describe(world.train.id, selector_name(selector), idx, scores, cos);

  if (kind == attack::ObjectiveKind::FlipWithCoherentTrace) {
    run.attack = selector == Selector::Random ? "random" : "exact";
  } else {
    run.attack = std::string(attack::objective_name(kind)) + (selector == Selector::Random ? "-random" : "");
  }
  unlearn::UnlearnTrace trace;
  run.unlearned = unlearn::unlearn(world.theta, forget, subset(world.train_seqs, idx, true),
                                   method_config(cfg, method, seed), &trace);
  run.unlearn_loss = trace.forget_loss;
  finish(run, world, base, targets, cfg, kind);
  return run;
}

AttackRun run_adversarial_attack(const World& world, const Baseline& base,
                                 const std::vector<attack::AttackTarget>& targets, const ExperimentConfig& cfg,
                                 double ratio, unlearn::Method method, std::uint64_t seed, int iterations) {
  const auto kind = attack::ObjectiveKind::FlipWithCoherentTrace;
  AttackRun run;
  run.attack = iterations > 0 ? "adv" : "adv-random";
  run.method = unlearn::method_name(method);
  run.objective = attack::objective_name(kind);
  run.ratio = ratio;
  run.seed = seed;
  const auto g = attack::objective_gradient(world.theta, targets, kind);
  const auto scores = select::score_samples(world.theta, world.train_seqs, g);
  const auto idx = select::select_topk(scores.score, budget(world.train_seqs.size(), ratio)).indices();
  std::vector<synth::ReasoningExample> forget_ex;
  for (auto i : idx) forget_ex.push_back(world.train.examples[i]);

  auto gc = cfg.gcg;
  gc.seed = seed;
  gc.iterations = iterations;
  auto state = gcg::gcg_init(world.theta, forget_ex, g, gc);
  for (int it = 0; it < iterations; ++it) gcg::gcg_step(state, world.theta, forget_ex, g, gc);
  run.suffix = gcg::SuffixArtifact{state.delta, state.trace, gc};

  const auto forget = gcg::perturbed_forget_set(forget_ex, state.delta, gc.placement);
  run.selection = describe(world.train.id, "topk", idx, scores, state.objective);
  unlearn::UnlearnTrace trace;
  run.unlearned = unlearn::unlearn(world.theta, forget, subset(world.train_seqs, idx, true),
                                   method_config(cfg, method, seed), &trace);
  run.unlearn_loss = trace.forget_loss;
  finish(run, world, base, targets, cfg, kind);
  return run;
}

AttackRun run_transfer_attack(const World& victim, const Baseline& base, const World& surrogate,
                              const std::vector<attack::AttackTarget>& targets, const ExperimentConfig& cfg,
                              double ratio, unlearn::Method method, std::uint64_t seed, bool random_selection) {
  const auto kind = attack::ObjectiveKind::FlipWithCoherentTrace;
  AttackRun run;
  run.attack = random_selection ? "transfer-random" : "transfer";
  run.method = unlearn::method_name(method);
  run.objective = attack::objective_name(kind);
  run.ratio = ratio;
  run.seed = seed;
  // Attacker side: surrogate model and auxiliary corpus only.
  const auto g = attack::objective_gradient(surrogate.theta, targets, kind);
  const auto scores = select::score_samples(surrogate.theta, surrogate.train_seqs, g);
  const std::size_t k = budget(surrogate.train_seqs.size(), ratio);
  const auto idx = random_selection ? select::random_baseline(surrogate.train_seqs.size(), k, seed).indices()
                                    : select::select_topk(scores.score, k).indices();
  const auto forget = subset(surrogate.train_seqs, idx, false);
  run.selection = describe(surrogate.train.id, random_selection ? "random" : "topk", idx, scores,
                           ad::cosine(g, unlearn::unlearn_direction(surrogate.theta, forget)));

  // Service side: the submitted samples are unlearned from the victim.
  std::vector<lm::PackedSequence> retain;
  for (const auto& s : victim.train_seqs) {
    const bool submitted = std::any_of(forget.begin(), forget.end(), [&](const auto& f) { return f.tokens == s.tokens; });
    if (!submitted) retain.push_back(s);
  }
  unlearn::UnlearnTrace trace;
  run.unlearned = unlearn::unlearn(victim.theta, forget, retain, method_config(cfg, method, seed), &trace);
  run.unlearn_loss = trace.forget_loss;
  finish(run, victim, base, targets, cfg, kind);
  return run;
}

json run_record(const AttackRun& run, const std::string& config_fingerprint, const std::string& checkpoint_path) {
  json j;
  j["config_fingerprint"] = config_fingerprint;
  j["attack"] = run.attack;
  j["unlearn_method"] = run.method;
  j["objective"] = run.objective;
  j["ratio"] = run.ratio;
  j["seed"] = run.seed;
  j["checkpoint"] = checkpoint_path;
  j["checkpoint_fingerprint"] = lm::fingerprint(lm::serialize(run.unlearned));
  j["selection"] = json::parse(select::selection_to_json(run.selection));
  if (run.suffix) j["suffix"] = json::parse(gcg::suffix_to_json(*run.suffix));
  j["metrics"] = json::parse(eval::metric_report_to_json(run.metrics));
  j["unlearn_loss"] = run.unlearn_loss;
  j["objective_before"] = run.objective_before;
  j["objective_after"] = run.objective_after;
  return j;
}

std::string csv_row(const AttackRun& run) {
  std::ostringstream out;
  out.precision(17);
  out << run.seed << ',' << run.attack << ',' << run.method << ',' << run.ratio << ',' << run.metrics.asr << ','
      << run.metrics.ppr_answer << ',' << run.metrics.pdr_trace << ',' << run.metrics.retain_ppl_before << ','
      << run.metrics.retain_ppl_after;
  return out.str();
}

}  // namespace ulab::harness
