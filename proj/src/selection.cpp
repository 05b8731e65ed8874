#include "ulab/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

namespace ulab::select {

std::vector<std::size_t> ForgetIndicator::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < omega.size(); ++i) {
    if (omega[i] == 1.0) out.push_back(i);
  }
  return out;
}

ForgetIndicator ForgetIndicator::from_indices(std::size_t n, const std::vector<std::size_t>& indices) {
  ForgetIndicator f;
  f.omega.assign(n, 0.0);
  for (auto i : indices) {
    if (i >= n) throw Error("forget indicator: index " + std::to_string(i) + " out of range");
    f.omega[i] = 1.0;
  }
  f.k = f.indices().size();
  return f;
}

namespace {

const std::vector<lm::Segment> kSpans{lm::Segment::Trace, lm::Segment::Answer};

void check_k(std::size_t n, std::size_t k) {
  if (k < 1 || k > n) throw Error("selection: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
}

// Top-k positions of v, ties to the lower index.
std::vector<std::size_t> topk_positions(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

template <typename T>
InfluenceScores score_samples(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& train,
                              const std::vector<T>& g_attack) {
  InfluenceScores out;
  out.attack_norm = ad::norm(g_attack);
  out.score.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto g = lm::per_sample_grad(params, train[i], kSpans);
    if (g.size() != g_attack.size()) throw Error("score_samples: gradient length mismatch");
    const double s = ad::dot(g_attack, g);
    if (!std::isfinite(s)) throw Error("score_samples: non-finite score for sample " + std::to_string(i));
    out.score.push_back(s);
    out.sample_norms.push_back(ad::norm(g));
  }
  return out;
}

ForgetIndicator select_topk(const std::vector<double>& scores, std::size_t k) {
  check_k(scores.size(), k);
  return ForgetIndicator::from_indices(scores.size(), topk_positions(scores, k));
}

ForgetIndicator random_baseline(std::size_t n, std::size_t k, std::uint64_t seed) {
  check_k(n, k);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return ForgetIndicator::from_indices(n, idx);
}

template <typename T>
GradientGeometry gradient_geometry(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& train,
                                   const std::vector<T>& g_attack) {
  const std::size_t n = train.size();
  GradientGeometry geo;
  geo.attack_norm = ad::norm(g_attack);
  std::vector<std::vector<T>> grads;
  grads.reserve(n);
  for (const auto& s : train) grads.push_back(lm::per_sample_grad(params, s, kSpans));
  geo.s.resize(n);
  geo.gram.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    geo.s[i] = ad::dot(g_attack, grads[i]);
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = ad::dot(grads[i], grads[j]);
      geo.gram[i * n + j] = v;
      geo.gram[j * n + i] = v;
    }
  }
  return geo;
}

GradientGeometry gradient_geometry(const std::vector<std::vector<double>>& grads, const std::vector<double>& g_attack) {
  const std::size_t n = grads.size();
  GradientGeometry geo;
  geo.attack_norm = ad::norm(g_attack);
  geo.s.resize(n);
  geo.gram.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    geo.s[i] = ad::dot(g_attack, grads[i]);
    for (std::size_t j = 0; j <= i; ++j) {
      const double v = ad::dot(grads[i], grads[j]);
      geo.gram[i * n + j] = v;
      geo.gram[j * n + i] = v;
    }
  }
  return geo;
}

double inner_objective(const GradientGeometry& geo, const std::vector<double>& omega) {
  double acc = 0;
  for (std::size_t i = 0; i < geo.n(); ++i) acc += omega[i] * geo.s[i];
  return acc;
}

namespace {

double quad(const GradientGeometry& geo, const std::vector<double>& w, std::vector<double>* kw = nullptr) {
  const std::size_t n = geo.n();
  double q = 0;
  if (kw) kw->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < n; ++j) row += geo.gram[i * n + j] * w[j];
    if (kw) (*kw)[i] = row;
    q += w[i] * row;
  }
  return q;
}

}  // namespace

double relaxed_cosine(const GradientGeometry& geo, const std::vector<double>& omega) {
  if (omega.size() != geo.n()) throw Error("relaxed_cosine: omega length mismatch");
  const double q = quad(geo, omega);
  if (q <= 0 || geo.attack_norm == 0) return 0.0;
  return inner_objective(geo, omega) / (geo.attack_norm * std::sqrt(q));
}

std::vector<double> project_budget(const std::vector<double>& v, double k) {
  const double n = static_cast<double>(v.size());
  if (k < 0 || k > n) throw Error("project_budget: budget outside [0, n]");
  auto total = [&](double tau) {
    double s = 0;
    for (double x : v) s += std::clamp(x - tau, 0.0, 1.0);
    return s;
  };
  double lo = *std::min_element(v.begin(), v.end()) - 1.0;
  double hi = *std::max_element(v.begin(), v.end());
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (total(mid) > k ? lo : hi) = mid;
  }
  const double tau = 0.5 * (lo + hi);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp(v[i] - tau, 0.0, 1.0);
  return out;
}

constexpr double kBinarize = 0.3;

RelaxedResult optimize_relaxed(const GradientGeometry& geo, std::size_t k, const RelaxedConfig& config) {
  const std::size_t n = geo.n();
  check_k(n, k);
  if (config.restarts < 1) throw Error("optimize_relaxed: restarts must be >= 1");
  if (config.iters < 0 || !(config.step > 0)) throw Error("optimize_relaxed: invalid iters or step");
  RelaxedResult best;
  best.cosine = -2;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double kd = static_cast<double>(k);
  for (int r = 0; r < config.restarts; ++r) {
    std::vector<double> w(n);
    for (auto& x : w) x = uni(rng);
    // The first restart is warm-started from the linear top-k solution.
    w = r == 0 ? select_topk(geo.s, k).omega : project_budget(w, kd);
    std::vector<double> kw;
    ForgetIndicator restart_best;
    double restart_cos = -2;
    auto consider = [&] {
      auto rounded = ForgetIndicator::from_indices(n, topk_positions(w, k));
      const double c = relaxed_cosine(geo, rounded.omega);
      if (c > restart_cos) {
        restart_cos = c;
        restart_best = std::move(rounded);
      }
    };
    for (int it = 0; it < config.iters; ++it) {
      consider();
      const double q = quad(geo, w, &kw);
      if (q <= 0 || geo.attack_norm == 0) break;
      const double a = inner_objective(geo, w);
      const double sq = std::sqrt(q);
      std::vector<double> grad(n);
      double gmax = 0;
      // Binarization pressure grows linearly so late iterates sit near a vertex.
      const double mu = kBinarize * static_cast<double>(it) / static_cast<double>(config.iters);
      for (std::size_t i = 0; i < n; ++i) {
        grad[i] = (geo.s[i] / sq - a * kw[i] / (q * sq)) / geo.attack_norm - mu * (1.0 - 2.0 * w[i]);
        gmax = std::max(gmax, std::abs(grad[i]));
      }
      if (gmax == 0) break;
      for (std::size_t i = 0; i < n; ++i) w[i] += config.step * grad[i] / gmax;
      w = project_budget(w, kd);
    }
    consider();
    best.restart_cosine.push_back(restart_cos);
    if (restart_cos > best.cosine) {
      best.cosine = restart_cos;
      best.indicator = restart_best;
    }
  }
  best.unrepresentable = std::all_of(best.restart_cosine.begin(), best.restart_cosine.end(),
                                     [](double c) { return c <= 0; });
  return best;
}

std::string selection_to_json(const SelectionArtifact& a) {
  nlohmann::json j;
  j["corpus_id"] = a.corpus_id;
  j["k"] = a.k;
  j["method"] = a.method;
  j["indices"] = a.indices;
  j["scores"] = {{"min", a.score_min}, {"max", a.score_max}, {"mean", a.score_mean}};
  j["inner"] = a.inner;
  j["cosine"] = a.cosine;
  return j.dump(2);
}

SelectionArtifact selection_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  SelectionArtifact a;
  a.corpus_id = j.at("corpus_id").get<std::string>();
  a.k = j.at("k").get<std::size_t>();
  a.method = j.at("method").get<std::string>();
  a.indices = j.at("indices").get<std::vector<std::size_t>>();
  a.score_min = j.at("scores").at("min").get<double>();
  a.score_max = j.at("scores").at("max").get<double>();
  a.score_mean = j.at("scores").at("mean").get<double>();
  a.inner = j.at("inner").get<double>();
  a.cosine = j.at("cosine").get<double>();
  return a;
}

template InfluenceScores score_samples(const lm::ModelParams<float>&, const std::vector<lm::PackedSequence>&,
                                       const std::vector<float>&);
template InfluenceScores score_samples(const lm::ModelParams<double>&, const std::vector<lm::PackedSequence>&,
                                       const std::vector<double>&);
template GradientGeometry gradient_geometry(const lm::ModelParams<float>&, const std::vector<lm::PackedSequence>&,
                                            const std::vector<float>&);
template GradientGeometry gradient_geometry(const lm::ModelParams<double>&, const std::vector<lm::PackedSequence>&,
                                            const std::vector<double>&);

}  // namespace ulab::select
