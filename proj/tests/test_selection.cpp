#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "ulab/selection.hpp"
#include "ulab/synth.hpp"

using namespace ulab;
using namespace ulab::select;

namespace {

// Every k-subset of {0..n-1}, lexicographic.
template <typename F>
void for_each_subset(std::size_t n, std::size_t k, F&& f) {
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  while (true) {
    f(idx);
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

std::vector<double> omega_of(std::size_t n, const std::vector<std::size_t>& idx) {
  std::vector<double> w(n, 0.0);
  for (auto i : idx) w[i] = 1.0;
  return w;
}

std::vector<std::vector<double>> random_vectors(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> out(n, std::vector<double>(dim));
  for (auto& v : out)
    for (auto& x : v) x = g(rng);
  return out;
}

}  // namespace

TEST_CASE("top-k on a hand example") {
  const auto sel = select_topk({3, -1, 2, 5}, 2);
  CHECK(sel.indices() == std::vector<std::size_t>{0, 3});
  CHECK(sel.omega == std::vector<double>{1, 0, 0, 1});
  CHECK(sel.k == 2);
  CHECK(select_topk({1, 1, 1}, 2).indices() == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(select_topk({1, 2}, 3), Error);
}

TEST_CASE("top-k equals brute-force enumeration of the linear objective") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> pick_n(4, 12);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int inst = 0; inst < 60; ++inst) {
    const std::size_t n = pick_n(rng);
    const std::size_t k = 1 + static_cast<std::size_t>(inst) % 4;
    std::vector<double> s(n);
    for (auto& v : s) v = g(rng);
    GradientGeometry geo;
    geo.s = s;
    double best = -1e300;
    for_each_subset(n, k, [&](const auto& idx) { best = std::max(best, inner_objective(geo, omega_of(n, idx))); });
    CAPTURE(inst);
    CHECK(inner_objective(geo, select_topk(s, k).omega) == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("relaxed cosine from the geometry matches the direct cosine") {
  std::mt19937_64 rng(3);
  const auto grads = random_vectors(6, 9, rng);
  const auto attack = random_vectors(1, 9, rng)[0];
  const auto geo = gradient_geometry(grads, attack);
  const std::vector<double> w{0.5, 0, 1, 0.25, 0, 1};
  std::vector<double> sum(9, 0.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 9; ++j) sum[j] += w[i] * grads[i][j];
  CHECK(relaxed_cosine(geo, w) == doctest::Approx(ad::cosine(attack, sum)).epsilon(1e-12));
  CHECK(relaxed_cosine(geo, std::vector<double>(6, 0.0)) == 0.0);
}

TEST_CASE("relaxed optimization reaches 95% of the best cosine") {
  std::mt19937_64 rng(123);
  for (int inst = 0; inst < 20; ++inst) {
    const auto grads = random_vectors(10, 16, rng);
    const auto attack = random_vectors(1, 16, rng)[0];
    const auto geo = gradient_geometry(grads, attack);
    double best = -2;
    for_each_subset(10, 2, [&](const auto& idx) { best = std::max(best, relaxed_cosine(geo, omega_of(10, idx))); });
    RelaxedConfig rc;
    rc.seed = static_cast<std::uint64_t>(inst) + 1;
    const auto r = optimize_relaxed(geo, 2, rc);
    CAPTURE(inst);
    CHECK(r.indicator.indices().size() == 2);
    CHECK(r.restart_cosine.size() == 3);
    CHECK(r.cosine == doctest::Approx(relaxed_cosine(geo, r.indicator.omega)));
    if (best > 0) CHECK(r.cosine >= 0.95 * best);
  }
}

TEST_CASE("budget projection lands on the capped simplex") {
  const auto w = project_budget({2.0, -1.0, 0.3, 0.9, 0.1}, 2.0);
  double total = 0;
  for (double x : w) {
    CHECK(x >= 0);
    CHECK(x <= 1);
    total += x;
  }
  CHECK(total == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(w[0] == doctest::Approx(1.0));
  CHECK(w[1] == doctest::Approx(0.0));
  const auto same = project_budget({1, 0, 1, 0}, 2.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(same[i] == doctest::Approx(i % 2 == 0 ? 1.0 : 0.0));
}

TEST_CASE("random baseline is uniform and seeded") {
  const std::size_t n = 20, k = 4;
  std::vector<int> hits(n, 0);
  const int trials = 4000;
  for (int t = 0; t < trials; ++t) {
    const auto sel = random_baseline(n, k, static_cast<std::uint64_t>(t));
    const auto idx = sel.indices();
    REQUIRE(idx.size() == k);
    for (auto i : idx) ++hits[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double freq = hits[i] / static_cast<double>(trials);
    CAPTURE(i);
    CHECK(freq >= 0.15);
    CHECK(freq <= 0.25);
  }
  CHECK(random_baseline(50, 5, 7).indices() == random_baseline(50, 5, 7).indices());
  CHECK_FALSE(random_baseline(50, 5, 7).indices() == random_baseline(50, 5, 8).indices());
}

TEST_CASE("a planted near-duplicate of the target is ranked first") {
  synth::CorpusSpec spec;
  spec.n_examples = 12;
  spec.example_seed = 31;
  const auto corpus = synth::generate_corpus(spec);
  const auto p = testing::generic_params(testing::tiny_config(), 5);
  std::vector<lm::PackedSequence> train;
  for (const auto& e : corpus.examples) train.push_back(e.packed());
  // The attacker's gradient is the NLL gradient of a copy of sample 7.
  const auto g = lm::per_sample_grad(p, train[7], {lm::Segment::Trace, lm::Segment::Answer});
  const auto scores = score_samples(p, train, g);
  CHECK(select_topk(scores.score, 1).indices() == std::vector<std::size_t>{7});
  CHECK(scores.sample_norms[7] == doctest::Approx(scores.attack_norm));
  const auto geo = gradient_geometry(p, train, g);
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(geo.s[i] == doctest::Approx(scores.score[i]));
  CHECK(relaxed_cosine(geo, ForgetIndicator::from_indices(12, {7}).omega) == doctest::Approx(1.0));
}

TEST_CASE("top-k dominates random selection on the linear objective") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> s(200);
  for (auto& v : s) v = g(rng);
  GradientGeometry geo;
  geo.s = s;
  const double top = inner_objective(geo, select_topk(s, 10).omega);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) CHECK(top >= inner_objective(geo, random_baseline(200, 10, seed).omega));
}

TEST_CASE("selection artifacts round trip through JSON") {
  SelectionArtifact a{"victim", 3, "topk", {1, 4, 9}, -0.5, 2.0, 0.25, 4.5, 0.3};
  const auto b = selection_from_json(selection_to_json(a));
  CHECK(b.indices == a.indices);
  CHECK(b.method == "topk");
  CHECK(b.cosine == a.cosine);
  CHECK(ForgetIndicator::from_indices(5, {4, 1}).indices() == std::vector<std::size_t>{1, 4});
  CHECK_THROWS_AS(ForgetIndicator::from_indices(3, {3}), Error);
}
