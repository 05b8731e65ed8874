#include "ulab/gcg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace ulab::gcg {

const char* placement_name(Placement p) {
  return p == Placement::EndOfInput ? "end-of-input" : "end-of-answer";
}

Placement parse_placement(const std::string& name) {
  if (name == "end-of-input") return Placement::EndOfInput;
  if (name == "end-of-answer" || name == "end-of-sequence") return Placement::EndOfAnswer;
  throw Error("unknown suffix placement '" + name + "'");
}

std::vector<int> GcgConfig::allowed_tokens(int vocab_size) const {
  if (!allowed.empty()) return allowed;
  std::vector<int> out;
  for (int t = tok::kNumReserved; t < vocab_size; ++t) out.push_back(t);
  return out;
}

void GcgConfig::validate(int vocab_size) const {
  if (suffix_len < 0 || iterations < 0) throw Error("gcg: suffix length and iterations must be >= 0");
  if (batch < 1) throw Error("gcg: candidate batch must be >= 1");
  const auto tokens = allowed_tokens(vocab_size);
  if (tokens.empty()) throw Error("gcg: no allowed tokens");
  for (int t : tokens) {
    if (t < tok::kNumReserved || t >= vocab_size) {
      throw Error("gcg: token " + std::to_string(t) + " may not appear in a suffix");
    }
  }
  if (topk < 1 || topk > static_cast<int>(tokens.size())) {
    throw Error("gcg: top-k " + std::to_string(topk) + " outside [1, " + std::to_string(tokens.size()) + "]");
  }
  if (!(fd_radius > 0)) throw Error("gcg: finite-difference radius must be positive");
}

lm::PackedSequence with_suffix(const synth::ReasoningExample& ex, const std::vector<int>& delta, Placement placement) {
  if (placement == Placement::EndOfInput) {
    auto x = ex.x;
    x.insert(x.end(), delta.begin(), delta.end());
    return lm::pack(x, ex.r, ex.y);
  }
  auto y = ex.y;
  y.insert(y.end(), delta.begin(), delta.end());
  return lm::pack(ex.x, ex.r, y);
}

std::vector<lm::PackedSequence> perturbed_forget_set(const std::vector<synth::ReasoningExample>& forget,
                                                     const std::vector<int>& delta, Placement placement) {
  std::vector<lm::PackedSequence> out;
  out.reserve(forget.size());
  for (const auto& ex : forget) out.push_back(with_suffix(ex, delta, placement));
  return out;
}

namespace {

const std::vector<lm::Segment> kSpans{lm::Segment::Trace, lm::Segment::Answer};

template <typename T>
std::vector<lm::PackedSequence> checked_set(const lm::ModelParams<T>& params,
                                            const std::vector<synth::ReasoningExample>& forget,
                                            const std::vector<int>& delta, Placement placement) {
  if (forget.empty()) throw Error("gcg: empty forget set");
  auto seqs = perturbed_forget_set(forget, delta, placement);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].tokens.size() > static_cast<std::size_t>(params.config.max_seq_len)) {
      throw Error("gcg: forget sample " + std::to_string(i) + " is " + std::to_string(seqs[i].tokens.size()) +
                  " tokens with the suffix, over max_seq_len " + std::to_string(params.config.max_seq_len));
    }
  }
  return seqs;
}

template <typename T>
std::vector<T> summed_grad(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& seqs) {
  std::vector<T> acc;
  for (const auto& s : seqs) {
    auto g = lm::per_sample_grad(params, s, kSpans);
    if (acc.empty()) {
      acc = std::move(g);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
  }
  return acc;
}

// First position of the suffix inside a perturbed sequence.
std::size_t suffix_begin(const lm::PackedSequence& s, std::size_t m, Placement placement) {
  return placement == Placement::EndOfInput ? s.layout.input_end - m : s.layout.answer_end - m;
}

}  // namespace

template <typename T>
double gcg_objective(const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
                     const std::vector<int>& delta, const std::vector<T>& g_attack, Placement placement) {
  const auto seqs = checked_set(params, forget, delta, placement);
  return ad::cosine(g_attack, summed_grad(params, seqs));
}

template <typename T>
std::vector<double> token_gradients(const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
                                    const std::vector<int>& delta, const std::vector<T>& g_attack,
                                    const GcgConfig& config) {
  const auto seqs = checked_set(params, forget, delta, config.placement);
  const auto allowed = config.allowed_tokens(params.config.vocab_size);
  const std::size_t m = delta.size();
  const std::size_t na = allowed.size();
  std::vector<double> out(m * na, 0.0);
  if (m == 0) return out;

  // d cos(g, G) / dG = g / (|g||G|) - cos G / |G|^2, held fixed while the
  // one-hot entries move; the objective's one-hot derivative is then the
  // derivative of <w, sum_i grad l_i>, a directional derivative along w.
  const auto G = summed_grad(params, seqs);
  const double ng = ad::norm(g_attack), nG = ad::norm(G);
  if (ng == 0 || nG == 0) return out;
  const double c = ad::dot(g_attack, G) / (ng * nG);
  std::vector<double> w(G.size());
  double nw2 = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = static_cast<double>(g_attack[i]) / (ng * nG) - c * static_cast<double>(G[i]) / (nG * nG);
    nw2 += w[i] * w[i];
  }
  if (nw2 == 0) return out;
  const double eps = config.fd_radius / std::sqrt(nw2);

  const auto theta = params.flat();
  for (int sign : {1, -1}) {
    lm::ModelParams<T> shifted = params;
    std::vector<T> th(theta.size());
    for (std::size_t i = 0; i < th.size(); ++i) {
      th[i] = static_cast<T>(static_cast<double>(theta[i]) + sign * eps * w[i]);
    }
    shifted.set_flat(th);
    const auto& emb = shifted.get("tok_emb");
    const std::size_t d = emb.cols();
    const double coef = sign / (2 * eps);
    for (const auto& s : seqs) {
      ad::Tape<T> tape;
      auto b = lm::bind(tape, shifted, false);
      lm::ForwardOptions opt;
      opt.embeddings_as_leaf = true;
      auto fr = lm::forward(b, s.tokens, opt);
      const auto pos = lm::segment_positions(s.layout, kSpans);
      auto loss = ad::scale(ad::sum(lm::token_log_probs(fr.logits, s.tokens, pos)),
                            T(-1) / static_cast<T>(pos.size()));
      tape.backward(loss);
      const auto ge = tape.grad(fr.embeddings);
      const std::size_t p0 = suffix_begin(s, m, config.placement);
      for (std::size_t p = 0; p < m; ++p) {
        const T* gp = ge.data.data() + (p0 + p) * d;
        for (std::size_t a = 0; a < na; ++a) {
          const T* ev = emb.data.data() + static_cast<std::size_t>(allowed[a]) * d;
          double acc = 0;
          for (std::size_t k = 0; k < d; ++k) acc += static_cast<double>(gp[k]) * static_cast<double>(ev[k]);
          out[p * na + a] += coef * acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
GcgState gcg_init(const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
                  const std::vector<T>& g_attack, const GcgConfig& config) {
  config.validate(params.config.vocab_size);
  const auto allowed = config.allowed_tokens(params.config.vocab_size);
  GcgState st;
  st.rng.seed(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
  for (int i = 0; i < config.suffix_len; ++i) st.delta.push_back(allowed[pick(st.rng)]);
  st.objective = gcg_objective(params, forget, st.delta, g_attack, config.placement);
  st.trace.push_back(st.objective);
  return st;
}

template <typename T>
void gcg_step(GcgState& state, const lm::ModelParams<T>& params, const std::vector<synth::ReasoningExample>& forget,
              const std::vector<T>& g_attack, const GcgConfig& config) {
  const auto allowed = config.allowed_tokens(params.config.vocab_size);
  const std::size_t m = state.delta.size();
  ++state.step;
  if (m == 0) {
    state.trace.push_back(state.objective);
    return;
  }
  const std::size_t na = allowed.size();
  const std::size_t k = static_cast<std::size_t>(config.topk);
  const auto grad = token_gradients(params, forget, state.delta, g_attack, config);

  // Candidate pool: (position, token) for each position's top-k gradient entries,
  // excluding the token already there.
  std::vector<std::pair<std::size_t, int>> pool;
  for (std::size_t p = 0; p < m; ++p) {
    std::vector<std::size_t> idx(na);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return grad[p * na + a] > grad[p * na + b];
    });
    for (std::size_t j = 0; j < k; ++j) {
      if (allowed[idx[j]] != state.delta[p]) pool.emplace_back(p, allowed[idx[j]]);
    }
  }
  const std::size_t nb = std::min(pool.size(), static_cast<std::size_t>(config.batch));
  for (std::size_t i = 0; i < nb; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(state.rng)]);
  }
  pool.resize(nb);

  double best = state.objective;
  std::vector<int> best_delta = state.delta;
  for (const auto& [p, t] : pool) {
    auto cand = state.delta;
    cand[p] = t;
    const double v = gcg_objective(params, forget, cand, g_attack, config.placement);
    if (v > best) {
      best = v;
      best_delta = std::move(cand);
    }
  }
  state.delta = std::move(best_delta);
  state.objective = best;
  state.trace.push_back(best);
}

std::string suffix_to_json(const SuffixArtifact& a) {
  const auto& V = Vocabulary::standard();
  nlohmann::json j;
  j["delta"] = a.delta;
  j["delta_words"] = V.decode(a.delta);
  j["trace"] = a.trace;
  j["config"] = {{"suffix_len", a.config.suffix_len}, {"iterations", a.config.iterations},
                 {"topk", a.config.topk},             {"batch", a.config.batch},
                 {"seed", a.config.seed},             {"placement", placement_name(a.config.placement)},
                 {"allowed", a.config.allowed},       {"fd_radius", a.config.fd_radius}};
  return j.dump(2);
}

SuffixArtifact suffix_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  SuffixArtifact a;
  a.delta = j.at("delta").get<std::vector<int>>();
  a.trace = j.at("trace").get<std::vector<double>>();
  const auto& c = j.at("config");
  a.config.suffix_len = c.at("suffix_len").get<int>();
  a.config.iterations = c.at("iterations").get<int>();
  a.config.topk = c.at("topk").get<int>();
  a.config.batch = c.at("batch").get<int>();
  a.config.seed = c.at("seed").get<std::uint64_t>();
  a.config.placement = parse_placement(c.at("placement").get<std::string>());
  a.config.allowed = c.at("allowed").get<std::vector<int>>();
  a.config.fd_radius = c.at("fd_radius").get<double>();
  return a;
}

#define ULAB_INSTANTIATE(T)                                                                                     \
  template double gcg_objective(const lm::ModelParams<T>&, const std::vector<synth::ReasoningExample>&,          \
                                const std::vector<int>&, const std::vector<T>&, Placement);                     \
  template std::vector<double> token_gradients(const lm::ModelParams<T>&,                                       \
                                               const std::vector<synth::ReasoningExample>&,                     \
                                               const std::vector<int>&, const std::vector<T>&, const GcgConfig&); \
  template GcgState gcg_init(const lm::ModelParams<T>&, const std::vector<synth::ReasoningExample>&,             \
                             const std::vector<T>&, const GcgConfig&);                                          \
  template void gcg_step(GcgState&, const lm::ModelParams<T>&, const std::vector<synth::ReasoningExample>&,     \
                         const std::vector<T>&, const GcgConfig&);

ULAB_INSTANTIATE(float)
ULAB_INSTANTIATE(double)

#undef ULAB_INSTANTIATE

}  // namespace ulab::gcg
