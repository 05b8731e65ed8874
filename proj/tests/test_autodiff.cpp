#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "gradcheck.hpp"
#include "ulab/autodiff.hpp"
#include "ulab/grad_layout.hpp"

using namespace ulab;

namespace {

Tensor<double> t2(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

}  // namespace

TEST_CASE("every primitive matches central differences in double precision") {
  const auto results = testing::primitive_gradchecks(115, 20240611);
  REQUIRE(results.size() >= 100);
  std::map<std::string, int> seen;
  for (const auto& r : results) {
    CAPTURE(r.name);
    CHECK(r.error < 1e-6);
    ++seen[r.name];
  }
  CHECK(seen.size() == 23);
}

TEST_CASE("hand-derived backward of sum(a * b) and sum(A B)") {
  ad::Tape<double> tape;
  auto a = tape.leaf(t2(1, 3, {1, 2, 3}), true, "a");
  auto b = tape.leaf(t2(1, 3, {4, -5, 6}), true, "b");
  auto loss = ad::sum(ad::mul(a, b));
  CHECK(loss.value().item() == doctest::Approx(12));
  auto g = tape.backward(loss);
  CHECK(g.at("a").data == std::vector<double>{4, -5, 6});
  CHECK(g.at("b").data == std::vector<double>{1, 2, 3});

  ad::Tape<double> t;
  auto A = t.leaf(t2(2, 2, {1, 2, 3, 4}), true, "A");
  auto B = t.leaf(t2(2, 3, {1, 0, 2, -1, 3, 1}), true, "B");
  auto gm = t.backward(ad::sum(ad::matmul(A, B)));
  // dL/dA = 1 B^T: row sums of B in every row.
  CHECK(gm.at("A").data == std::vector<double>{3, 3, 3, 3});
  // dL/dB = A^T 1: column sums of A repeated across columns.
  CHECK(gm.at("B").data == std::vector<double>{4, 4, 4, 6, 6, 6});
}

TEST_CASE("log_softmax of uniform logits is -log n") {
  ad::Tape<double> tape;
  auto x = tape.constant(Tensor<double>::filled({3, 7}, 2.5));
  const auto y = ad::log_softmax(x).value();
  for (double v : y.data) CHECK(v == doctest::Approx(-std::log(7.0)).epsilon(1e-14));
}

TEST_CASE("gradients are linear in the loss") {
  std::mt19937_64 rng(5);
  const auto x0 = Tensor<double>::randn({4, 5}, 1.0, rng);
  auto grad_of = [&](double wf, double wg) {
    ad::Tape<double> tape;
    auto x = tape.leaf(x0, true, "x");
    auto f = ad::sum(ad::gelu(x));
    auto g = ad::mean(ad::exp(ad::scale(x, 0.5)));
    return tape.backward(ad::add(ad::scale(f, wf), ad::scale(g, wg))).at("x");
  };
  const auto gf = grad_of(1, 0), gg = grad_of(0, 1), mix = grad_of(2, -3);
  for (std::size_t i = 0; i < mix.data.size(); ++i) {
    CHECK(mix.data[i] == doctest::Approx(2 * gf.data[i] - 3 * gg.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("repeated float backward passes are bitwise identical") {
  std::mt19937_64 rng(9);
  const auto w = Tensor<float>::randn({16, 16}, 0.5f, rng);
  const auto x = Tensor<float>::randn({8, 16}, 1.0f, rng);
  auto run = [&] {
    ad::Tape<float> tape;
    auto W = tape.leaf(w, true, "w");
    auto h = ad::log_softmax(ad::matmul(tape.constant(x), W));
    return tape.backward(ad::mean(ad::mul(h, h))).at("w");
  };
  CHECK(run() == run());
}

TEST_CASE("flatten and unflatten round trip through a layout") {
  const auto layout = ad::GradLayout::from_shapes({{"a", {2, 3}}, {"b", {4}}, {"c", {}}});
  CHECK(layout.total == 11);
  std::vector<double> flat(11);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = 0.5 * static_cast<double>(i) - 1;
  const auto map = ad::unflatten(flat, layout);
  CHECK(map.at("b").data == std::vector<double>{2, 2.5, 3, 3.5});
  CHECK(ad::flatten(map, layout) == flat);

  ad::GradMap<double> missing{{"a", map.at("a")}};
  CHECK_THROWS_AS(ad::flatten(missing, layout), Error);
}

TEST_CASE("flat dot product agrees with the tape reduction") {
  std::mt19937_64 rng(17);
  const auto a = Tensor<double>::randn({300}, 1.0, rng);
  const auto b = Tensor<double>::randn({300}, 1.0, rng);
  ad::Tape<double> tape;
  const double via_tape = ad::sum(ad::mul(tape.constant(a), tape.constant(b))).value().item();
  CHECK(ad::dot(a.data, b.data) == doctest::Approx(via_tape).epsilon(1e-13));
  CHECK(ad::norm(a.data) == doctest::Approx(std::sqrt(ad::dot(a.data, a.data))));
  CHECK(ad::cosine(a.data, a.data) == doctest::Approx(1.0));
  CHECK(ad::cosine(a.data, std::vector<double>(300, 0.0)) == 0.0);
}

TEST_CASE("incompatible shapes raise ShapeError") {
  ad::Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::slice(a, 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, {1, 2, 3}), ShapeError);
}
