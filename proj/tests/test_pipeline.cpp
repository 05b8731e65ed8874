#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "ulab/checkpoint.hpp"
#include "ulab/pipeline.hpp"

using namespace ulab;
using namespace ulab::harness;
using nlohmann::json;

namespace {

// Small enough to train in seconds, large enough to decode its corpus.
WorldConfig small_world(const std::string& id, int filler_group, std::uint64_t seed) {
  auto w = default_config().victim;
  for (auto* s : {&w.train, &w.pretrain, &w.holdout, &w.pool}) {
    s->filler_group = filler_group;
    s->corpus_id = id + "-" + s->corpus_id;
  }
  w.train.n_examples = 60;
  w.train.example_seed = seed + 1;
  w.pretrain.n_examples = 1500;
  w.pretrain.example_seed = seed + 2;
  w.holdout.n_examples = 20;
  w.holdout.example_seed = seed + 3;
  w.pool.n_examples = 40;
  w.pool.example_seed = seed + 4;
  w.model.d_model = 32;
  w.model.n_layers = 1;
  w.model.seed = seed;
  w.pretrain_opt.epochs = 4;
  w.finetune_opt.epochs = 1;
  return w;
}

const World& small_victim() {
  static const World w = build_world(small_world("small", 0, 50));
  return w;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ulab_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("defaults follow the documented desk-scale setup") {
  const auto c = default_config();
  CHECK_NOTHROW(c.validate());
  CHECK(c.victim.train.n_examples == 500);
  CHECK(c.victim.holdout.n_examples == 100);
  CHECK(c.target_count == 20);
  CHECK(c.beta == 0.5);
  CHECK(c.lambda == 1.0);
  CHECK(c.victim.finetune_opt.epochs == 5);
  CHECK(c.victim.finetune_opt.learning_rate == 2e-5);
  CHECK(c.asr_ratios == std::vector<double>{0.01, 0.02, 0.03, 0.04, 0.05});
  CHECK(c.pdr_ratios == std::vector<double>{0.02, 0.04, 0.06, 0.08, 0.10});
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(c.unlearn.steps == 25);
  CHECK_FALSE(world_fingerprint(c.victim) == world_fingerprint(c.surrogate));
  CHECK_FALSE(c.victim.model.n_heads == c.surrogate.model.n_heads);
}

TEST_CASE("config JSON round trips and rejects unknown keys") {
  const auto c = default_config();
  const auto back = config_from_json(config_to_json(c));
  CHECK(config_fingerprint(back) == config_fingerprint(c));
  CHECK(config_fingerprint(config_from_json(json::object())) == config_fingerprint(c));

  const auto partial = config_from_json(json{{"beta", 0.7}, {"unlearn", {{"steps", 3}}}});
  CHECK(partial.beta == 0.7);
  CHECK(partial.unlearn.steps == 3);
  CHECK(partial.unlearn.learning_rate == c.unlearn.learning_rate);
  CHECK_FALSE(config_fingerprint(partial) == config_fingerprint(c));

  CHECK_THROWS_AS(config_from_json(json{{"betta", 0.7}}), Error);
  CHECK_THROWS_AS(config_from_json(json{{"unlearn", {{"stepz", 3}}}}), Error);
  CHECK_THROWS_AS(config_from_json(json{{"asr_ratios", {0.6}}}), Error);
  CHECK_THROWS_AS(config_from_json(json{{"seeds", json::array()}}), Error);
  CHECK_THROWS_AS(load_config("/nonexistent/ulab.json"), Error);
}

TEST_CASE("config files accept comments") {
  const auto dir = scratch_dir("config");
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "c.json");
    out << "{\n  // fewer targets\n  \"target_count\": 5\n}\n";
  }
  CHECK(load_config(dir / "c.json").target_count == 5);
  std::filesystem::remove_all(dir);
}

TEST_CASE("overrides address nested keys") {
  auto j = config_to_json(default_config());
  apply_override(j, "unlearn.learning_rate=0.01");
  apply_override(j, "gcg.placement=end-of-answer");
  apply_override(j, "seeds=[4,5]");
  const auto c = config_from_json(j);
  CHECK(c.unlearn.learning_rate == 0.01);
  CHECK(c.gcg.placement == gcg::Placement::EndOfAnswer);
  CHECK(c.seeds == std::vector<std::uint64_t>{4, 5});
  CHECK_THROWS_AS(apply_override(j, "unlearn.rate=1"), Error);
  CHECK_THROWS_AS(apply_override(j, "beta"), Error);
  CHECK_THROWS_AS(apply_override(j, "=3"), Error);
}

TEST_CASE("method overrides patch the shared unlearning settings") {
  const auto c = default_config();
  const auto ga = c.unlearn_for(unlearn::Method::GA, 7);
  const auto rmu = c.unlearn_for(unlearn::Method::RMU, 7);
  CHECK(ga.method == unlearn::Method::GA);
  CHECK(ga.seed == 7);
  CHECK(ga.learning_rate == c.unlearn.learning_rate);
  CHECK(rmu.method == unlearn::Method::RMU);
  CHECK(rmu.learning_rate == 1e-3);
  CHECK(rmu.max_grad_norm == 0.0);
  CHECK(rmu.steps == c.unlearn.steps);

  CHECK_THROWS_AS(config_from_json(json{{"method_overrides", {{"GA", {{"lr", 1}}}}}}), Error);
  CHECK_THROWS_AS(config_from_json(json{{"method_overrides", {{"NPO", {{"steps", 1}}}}}}), Error);
  CHECK_THROWS_AS(config_from_json(json{{"method_overrides", {{"GA", {{"learning_rate", -1}}}}}}), Error);
  const auto patched = config_from_json(json{{"method_overrides", {{"GA_KL", {{"retain_weight", 3.0}}}}}});
  CHECK(patched.unlearn_for(unlearn::Method::GA_KL, 1).retain_weight == 3.0);
  CHECK(patched.unlearn_for(unlearn::Method::RMU, 1).learning_rate == 1e-3);
}

TEST_CASE("budgets round and clamp") {
  CHECK(budget(500, 0.05) == 25);
  CHECK(budget(500, 0.01) == 5);
  CHECK(budget(500, 0.10) == 50);
  CHECK(budget(10, 0.01) == 1);
  CHECK(budget(7, 0.5) == 4);
  CHECK(parse_selector(selector_name(Selector::Relaxed)) == Selector::Relaxed);
  CHECK_THROWS_AS(parse_selector("best"), Error);
}

TEST_CASE("training the same world twice gives the same checkpoint") {
  const auto dir = scratch_dir("cache");
  const auto cfg = small_world("small", 0, 50);
  const auto a = build_world(cfg, dir);
  const auto path = dir / (world_fingerprint(cfg) + ".ulab");
  REQUIRE(std::filesystem::exists(path));
  CHECK(lm::serialize(a.theta) == lm::serialize(small_victim().theta));
  const auto b = build_world(cfg, dir);
  CHECK(lm::fingerprint(lm::serialize(b.theta)) == lm::fingerprint(lm::serialize(a.theta)));
  std::filesystem::remove_all(dir);
}

TEST_CASE("selected targets are decoded correctly and coherently") {
  const auto& w = small_victim();
  const auto targets = select_targets(w, 5, 0.5, 1.0, 3);
  REQUIRE_FALSE(targets.empty());
  for (const auto& t : targets) {
    const auto d = lm::greedy_decode(w.theta, t.x, eval::kDecodeBudget);
    CHECK(eval::correctness(d, t.label));
    CHECK(eval::coherence_of(d, t.x, w.pool.lexicon).value >= 0.5);
    CHECK(t.y_prime == std::vector<int>{label_token(opposite(t.label))});
  }
  CHECK(select_targets(w, 5, 0.5, 1.0, 3) == targets);
}

TEST_CASE("transfer with the victim as its own surrogate is the white-box attack") {
  const auto& w = small_victim();
  const auto targets = select_targets(w, 4, 0.5, 1.0, 1);
  const auto base = baseline(w, targets);
  auto cfg = default_config();
  cfg.unlearn.steps = 3;
  const auto exact = run_exact_attack(w, base, targets, cfg, 0.1, unlearn::Method::GA, 1, Selector::TopK,
                                      attack::ObjectiveKind::FlipWithCoherentTrace);
  const auto transfer = run_transfer_attack(w, base, w, targets, cfg, 0.1, unlearn::Method::GA, 1, false);
  CHECK(transfer.selection.indices == exact.selection.indices);
  CHECK(transfer.unlearned == exact.unlearned);
  CHECK(transfer.metrics.asr == exact.metrics.asr);
  CHECK(transfer.metrics.pdr_trace == exact.metrics.pdr_trace);
  CHECK(transfer.attack == "transfer");
}

TEST_CASE("transfer selection never reads the victim") {
  const auto& w = small_victim();
  static const World surrogate = build_world(small_world("aux", 1, 90));
  const auto targets = select_targets(w, 4, 0.5, 1.0, 2);
  const auto base = baseline(w, targets);
  auto cfg = default_config();
  cfg.unlearn.steps = 2;
  World shifted = w;
  auto theta = shifted.theta.flat();
  for (auto& v : theta) v *= 0.9f;
  shifted.theta.set_flat(theta);
  const auto a = run_transfer_attack(w, base, surrogate, targets, cfg, 0.1, unlearn::Method::GA, 2, false);
  const auto b = run_transfer_attack(shifted, base, surrogate, targets, cfg, 0.1, unlearn::Method::GA, 2, false);
  CHECK(a.selection.indices == b.selection.indices);
  CHECK(a.selection.cosine == b.selection.cosine);
  CHECK(a.selection.corpus_id == surrogate.train.id);
  CHECK_FALSE(a.unlearned == b.unlearned);
}

TEST_CASE("run records carry what is needed to replay a run") {
  const auto& w = small_victim();
  const auto targets = select_targets(w, 3, 0.5, 1.0, 4);
  const auto base = baseline(w, targets);
  auto cfg = default_config();
  cfg.unlearn.steps = 2;
  cfg.gcg.suffix_len = 3;
  const auto run = run_adversarial_attack(w, base, targets, cfg, 0.05, unlearn::Method::GA, 4, 2);
  const auto rec = run_record(run, config_fingerprint(cfg), "runs/x.ulab");
  CHECK(rec.at("attack") == "adv");
  CHECK(rec.at("config_fingerprint") == config_fingerprint(cfg));
  CHECK(rec.at("suffix").at("delta").size() == 3);
  CHECK(rec.at("unlearn_loss").size() == 2);
  CHECK(rec.at("checkpoint_fingerprint") == lm::fingerprint(lm::serialize(run.unlearned)));
  for (std::size_t i = 1; i < run.suffix->trace.size(); ++i) CHECK(run.suffix->trace[i] >= run.suffix->trace[i - 1]);

  const auto row = csv_row(run);
  CHECK(std::count(row.begin(), row.end(), ',') == 8);
  const std::string header = eval::kCsvHeader;
  CHECK(std::count(header.begin(), header.end(), ',') == 8);
}
