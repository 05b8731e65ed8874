#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ulab/objectives.hpp"

using namespace ulab;
using namespace ulab::attack;

namespace {

lm::ModelParams<double> uniform_params() {
  auto p = lm::init_params<double>(testing::tiny_config());
  for (auto& [name, t] : p.tensors)
    for (auto& v : t.data) v = 0;
  return p;
}

template <typename F>
double eval_var(const lm::ModelParams<double>& p, F&& f) {
  ad::Tape<double> tape;
  auto b = lm::bind(tape, p, false);
  return f(b).value().item();
}

const double kLogV = std::log(123.0);

}  // namespace

TEST_CASE("uniform logits give closed-form objective values") {
  const auto p = uniform_params();
  const auto t = testing::sample_target(4);
  const double n_trace = static_cast<double>(t.r_prime.size() + 2);
  const double n_answer = static_cast<double>(t.y_prime.size() + 1);
  const double l1 = eval_var(p, [&](auto& b) { return l1_target_loss(b, t); });
  CHECK(l1 == doctest::Approx(-(n_trace + n_answer) * kLogV).epsilon(1e-12));
  const double l2 = eval_var(p, [&](auto& b) { return l2_guidance_loss(b, t); });
  const double net = static_cast<double>(t.promote.size()) - static_cast<double>(t.suppress.size());
  CHECK(l2 == doctest::Approx(-net * kLogV).epsilon(1e-12));

  CHECK(objective_value(p, {t}, ObjectiveKind::AnswerOnly) == doctest::Approx(-n_answer * kLogV).epsilon(1e-12));
  const double degrade = objective_value(p, {t}, ObjectiveKind::DegradeTraceKeepAnswer);
  const double truth_trace = static_cast<double>(t.r.size() + 2), truth_answer = static_cast<double>(t.y.size() + 1);
  CHECK(degrade == doctest::Approx((truth_trace - truth_answer) * kLogV).epsilon(1e-12));
}

TEST_CASE("guidance term is zero when both sets carry the same tokens") {
  const auto p = testing::generic_params(testing::tiny_config(), 6);
  auto t = testing::sample_target(5);
  t.suppress = t.promote;
  CHECK(eval_var(p, [&](auto& b) { return l2_guidance_loss(b, t); }) == doctest::Approx(0.0).epsilon(1e-12));
  t.promote.clear();
  t.suppress.clear();
  CHECK_THROWS_AS(eval_var(p, [&](auto& b) { return l2_guidance_loss(b, t); }), Error);
}

TEST_CASE("the combined objective is l1 plus lambda l2") {
  const auto p = testing::generic_params(testing::tiny_config(), 7);
  auto t = testing::sample_target(6);
  const double l1 = eval_var(p, [&](auto& b) { return l1_target_loss(b, t); });
  const double l2 = eval_var(p, [&](auto& b) { return l2_guidance_loss(b, t); });
  for (double lambda : {0.0, 1.0, 2.5}) {
    t.lambda = lambda;
    CHECK(objective_value(p, {t}, ObjectiveKind::FlipWithCoherentTrace) ==
          doctest::Approx(l1 + lambda * l2).epsilon(1e-12));
  }
}

TEST_CASE("objectives sum over targets in value and gradient") {
  clear_gradient_cache();
  const auto p = testing::generic_params(testing::tiny_config(), 8);
  const auto a = testing::sample_target(7), b = testing::sample_target(8);
  for (auto kind : {ObjectiveKind::FlipWithCoherentTrace, ObjectiveKind::DegradeTraceKeepAnswer,
                    ObjectiveKind::AnswerOnly}) {
    CAPTURE(objective_name(kind));
    CHECK(objective_value(p, {a, b}, kind) ==
          doctest::Approx(objective_value(p, {a}, kind) + objective_value(p, {b}, kind)).epsilon(1e-12));
    const auto ga = objective_gradient(p, {a}, kind), gb = objective_gradient(p, {b}, kind);
    const auto gab = objective_gradient(p, {a, b}, kind);
    double worst = 0;
    for (std::size_t i = 0; i < gab.size(); ++i) worst = std::max(worst, std::abs(gab[i] - ga[i] - gb[i]));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("objective gradients match finite differences") {
  const auto p = testing::generic_params(testing::tiny_config(), 9);
  const auto t = testing::sample_target(9);
  for (auto kind : {ObjectiveKind::FlipWithCoherentTrace, ObjectiveKind::DegradeTraceKeepAnswer,
                    ObjectiveKind::AnswerOnly}) {
    CAPTURE(objective_name(kind));
    const double err = testing::model_gradcheck(
        p, [&](const lm::BoundParams<double>& b) { return combined_objective(b, {t}, kind); }, 40, 11);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("guidance is a per-position mean while l1 grows with the span") {
  const auto p = uniform_params();
  auto t = testing::sample_target(10);
  auto doubled = t;
  doubled.r_prime.insert(doubled.r_prime.end(), t.r_prime.begin(), t.r_prime.end());
  const double l2 = eval_var(p, [&](auto& b) { return l2_guidance_loss(b, t); });
  const double l2d = eval_var(p, [&](auto& b) { return l2_guidance_loss(b, doubled); });
  CHECK(l2d == doctest::Approx(l2).epsilon(1e-12));
  const double l1 = eval_var(p, [&](auto& b) { return l1_target_loss(b, t); });
  const double l1d = eval_var(p, [&](auto& b) { return l1_target_loss(b, doubled); });
  CHECK(l1d - l1 == doctest::Approx(-static_cast<double>(t.r_prime.size()) * kLogV).epsilon(1e-12));
}

TEST_CASE("ascending the objective raises the flip likelihood") {
  clear_gradient_cache();
  auto p = testing::generic_params(testing::tiny_config(), 10);
  const auto t = testing::sample_target(11);
  const double before = objective_value(p, {t}, ObjectiveKind::FlipWithCoherentTrace);
  for (int step = 0; step < 5; ++step) {
    const auto g = objective_gradient(p, {t}, ObjectiveKind::FlipWithCoherentTrace);
    auto theta = p.flat();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += 1e-3 * g[i];
    p.set_flat(theta);
  }
  CHECK(objective_value(p, {t}, ObjectiveKind::FlipWithCoherentTrace) > before);
}

TEST_CASE("gradients are cached per parameters, targets and kind") {
  clear_gradient_cache();
  const auto p = testing::generic_params(testing::tiny_config(), 12);
  const auto t = testing::sample_target(12);
  const auto g1 = objective_gradient(p, {t}, ObjectiveKind::AnswerOnly);
  CHECK(gradient_cache_size() == 1);
  CHECK(objective_gradient(p, {t}, ObjectiveKind::AnswerOnly) == g1);
  CHECK(gradient_cache_size() == 1);
  objective_gradient(p, {t}, ObjectiveKind::FlipWithCoherentTrace);
  CHECK(gradient_cache_size() == 2);
  clear_gradient_cache();
  CHECK(gradient_cache_size() == 0);
}

TEST_CASE("targets survive a JSON Lines round trip") {
  const std::vector<AttackTarget> ts{testing::sample_target(13), testing::sample_target(14)};
  CHECK(targets_from_jsonl(targets_to_jsonl(ts)) == ts);
  CHECK(parse_objective(objective_name(ObjectiveKind::DegradeTraceKeepAnswer)) == ObjectiveKind::DegradeTraceKeepAnswer);
  CHECK_THROWS_AS(parse_objective("sideways"), Error);
}

TEST_CASE("malformed targets are rejected") {
  auto t = testing::sample_target(15);
  t.r_prime.clear();
  CHECK_THROWS_AS(t.validate(), Error);
  t = testing::sample_target(15);
  t.suppress.push_back(t.promote.front());
  CHECK_THROWS_AS(t.validate(), Error);
  const auto p = uniform_params();
  CHECK_THROWS_AS(objective_value(p, {}, ObjectiveKind::AnswerOnly), Error);
}
