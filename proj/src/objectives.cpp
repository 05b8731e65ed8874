#include "ulab/objectives.hpp"

#include <algorithm>
#include <map>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "ulab/checkpoint.hpp"

namespace ulab::attack {

using nlohmann::json;

void AttackTarget::validate() const {
  if (r_prime.empty() || y_prime.empty()) throw Error("attack target: empty r' or y' span");
  if (lambda < 0) throw Error("attack target: lambda must be nonnegative");
  for (int p : promote) {
    if (std::find(suppress.begin(), suppress.end(), p) != suppress.end()) {
      throw Error("attack target: token " + std::to_string(p) + " is in both guidance sets");
    }
  }
}

const char* objective_name(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::FlipWithCoherentTrace: return "flip";
    case ObjectiveKind::DegradeTraceKeepAnswer: return "degrade";
    case ObjectiveKind::AnswerOnly: return "answer-only";
  }
  return "?";
}

ObjectiveKind parse_objective(const std::string& name) {
  if (name == "flip" || name == "exact" || name == "adv") return ObjectiveKind::FlipWithCoherentTrace;
  if (name == "degrade") return ObjectiveKind::DegradeTraceKeepAnswer;
  if (name == "answer-only") return ObjectiveKind::AnswerOnly;
  throw Error("unknown objective '" + name + "'");
}

AttackTarget make_target(const synth::Corpus& corpus, std::size_t index, double lambda) {
  if (index >= corpus.examples.size()) throw Error("make_target: index out of range");
  const auto& ex = corpus.examples[index];
  const Polarity flip = opposite(ex.label);
  const auto adv = synth::make_adversarial_target(ex, corpus.lexicon, flip);
  const auto sets = synth::build_guidance_sets(corpus.lexicon, flip);
  AttackTarget t;
  t.base_id = index;
  t.x = adv.x;
  t.r_prime = adv.r_prime;
  t.y_prime = adv.y_prime;
  t.promote = sets.promote;
  t.suppress = sets.suppress;
  t.lambda = lambda;
  t.r = ex.r;
  t.y = ex.y;
  t.label = ex.label;
  return t;
}

namespace {

template <typename T>
ad::Var<T> span_loglik(ad::Var<T> logits, const lm::PackedSequence& seq, lm::Segment seg) {
  const auto pos = lm::segment_positions(seq.layout, {seg});
  if (pos.empty()) throw Error("attack objective: empty span");
  return ad::sum(lm::token_log_probs(logits, seq.tokens, pos));
}

template <typename T>
ad::Var<T> l1_from_logits(ad::Var<T> logits, const lm::PackedSequence& seq) {
  return ad::add(span_loglik(logits, seq, lm::Segment::Trace), span_loglik(logits, seq, lm::Segment::Answer));
}

template <typename T>
ad::Var<T> l2_from_logits(ad::Var<T> logits, const lm::PackedSequence& seq, const AttackTarget& target) {
  if (target.promote.empty() && target.suppress.empty()) throw Error("l2_guidance_loss: both guidance sets are empty");
  const auto [b, e] = seq.layout.segment(lm::Segment::Trace);
  if (e <= b) throw Error("l2_guidance_loss: empty r' span");
  const std::size_t n = e - b;
  // Row j of lp predicts position b + j.
  ad::Var<T> lp = ad::log_softmax(ad::slice(logits, 0, b - 1, n));
  auto gather = [&](const std::vector<int>& set) {
    std::vector<std::size_t> rows, cols;
    for (std::size_t j = 0; j < n; ++j) {
      for (int v : set) {
        rows.push_back(j);
        cols.push_back(static_cast<std::size_t>(v));
      }
    }
    return ad::sum(ad::pick(lp, rows, cols));
  };
  const T inv = T(1) / static_cast<T>(n);
  if (target.suppress.empty()) return ad::scale(gather(target.promote), inv);
  if (target.promote.empty()) return ad::scale(gather(target.suppress), -inv);
  return ad::scale(ad::sub(gather(target.promote), gather(target.suppress)), inv);
}

}  // namespace

template <typename T>
ad::Var<T> l1_target_loss(const lm::BoundParams<T>& params, const AttackTarget& target) {
  if (target.r_prime.empty() || target.y_prime.empty()) throw Error("l1_target_loss: empty r' or y'");
  const auto seq = target.adversarial();
  return l1_from_logits(lm::forward(params, seq.tokens).logits, seq);
}

template <typename T>
ad::Var<T> l2_guidance_loss(const lm::BoundParams<T>& params, const AttackTarget& target) {
  if (target.r_prime.empty()) throw Error("l2_guidance_loss: empty r'");
  const auto seq = target.adversarial();
  return l2_from_logits(lm::forward(params, seq.tokens).logits, seq, target);
}

template <typename T>
ad::Var<T> combined_objective(const lm::BoundParams<T>& params, const std::vector<AttackTarget>& targets,
                              ObjectiveKind kind) {
  if (targets.empty()) throw Error("combined_objective: no targets");
  std::vector<ad::Var<T>> terms;
  for (const auto& t : targets) {
    switch (kind) {
      case ObjectiveKind::FlipWithCoherentTrace: {
        t.validate();
        const auto seq = t.adversarial();
        auto logits = lm::forward(params, seq.tokens).logits;
        auto term = l1_from_logits(logits, seq);
        if (t.lambda != 0) term = ad::add(term, ad::scale(l2_from_logits(logits, seq, t), static_cast<T>(t.lambda)));
        terms.push_back(term);
        break;
      }
      case ObjectiveKind::DegradeTraceKeepAnswer: {
        if (t.r.empty() || t.y.empty()) throw Error("combined_objective: degrade target lacks the true r/y");
        const auto seq = t.truth();
        auto logits = lm::forward(params, seq.tokens).logits;
        terms.push_back(ad::sub(span_loglik(logits, seq, lm::Segment::Answer),
                                span_loglik(logits, seq, lm::Segment::Trace)));
        break;
      }
      case ObjectiveKind::AnswerOnly: {
        if (t.r_prime.empty() || t.y_prime.empty()) throw Error("combined_objective: empty r' or y'");
        const auto seq = t.adversarial();
        terms.push_back(span_loglik(lm::forward(params, seq.tokens).logits, seq, lm::Segment::Answer));
        break;
      }
    }
  }
  ad::Var<T> total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

template <typename T>
T objective_value(const lm::ModelParams<T>& params, const std::vector<AttackTarget>& targets, ObjectiveKind kind) {
  ad::Tape<T> tape;
  auto b = lm::bind(tape, params, false);
  return combined_objective(b, targets, kind).value().item();
}

namespace {

std::mutex g_cache_mutex;
std::map<std::string, std::vector<float>> g_cache_f;
std::map<std::string, std::vector<double>> g_cache_d;

template <typename T>
std::map<std::string, std::vector<T>>& cache() {
  if constexpr (std::is_same_v<T, float>) {
    return g_cache_f;
  } else {
    return g_cache_d;
  }
}

}  // namespace

template <typename T>
std::vector<T> objective_gradient(const lm::ModelParams<T>& params, const std::vector<AttackTarget>& targets,
                                  ObjectiveKind kind) {
  const std::string key = lm::fingerprint(lm::serialize(params)) + ":" +
                          lm::fingerprint(targets_to_jsonl(targets)) + ":" + objective_name(kind);
  {
    std::lock_guard<std::mutex> lock(g_cache_mutex);
    auto it = cache<T>().find(key);
    if (it != cache<T>().end()) return it->second;
  }
  ad::Tape<T> tape;
  auto b = lm::bind(tape, params, true);
  auto obj = combined_objective(b, targets, kind);
  auto g = ad::flatten(tape.backward(obj), lm::param_layout(params.config));
  std::lock_guard<std::mutex> lock(g_cache_mutex);
  cache<T>().emplace(key, g);
  return g;
}

void clear_gradient_cache() {
  std::lock_guard<std::mutex> lock(g_cache_mutex);
  g_cache_f.clear();
  g_cache_d.clear();
}

std::size_t gradient_cache_size() {
  std::lock_guard<std::mutex> lock(g_cache_mutex);
  return g_cache_f.size() + g_cache_d.size();
}

std::string targets_to_jsonl(const std::vector<AttackTarget>& targets) {
  const auto& V = Vocabulary::standard();
  std::ostringstream out;
  for (const auto& t : targets) {
    json j;
    j["base_id"] = t.base_id;
    j["x"] = V.decode(t.x);
    j["r_prime"] = V.decode(t.r_prime);
    j["y_prime"] = V.decode(t.y_prime);
    j["P"] = V.decode(t.promote);
    j["N"] = V.decode(t.suppress);
    j["lambda"] = t.lambda;
    j["r"] = V.decode(t.r);
    j["y"] = V.decode(t.y);
    j["label"] = polarity_name(t.label);
    out << j.dump() << "\n";
  }
  return out.str();
}

std::vector<AttackTarget> targets_from_jsonl(const std::string& text) {
  const auto& V = Vocabulary::standard();
  auto words = [&](const json& j, const char* key) {
    return j.contains(key) ? V.encode(j.at(key).get<std::vector<std::string>>()) : std::vector<int>{};
  };
  std::vector<AttackTarget> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      AttackTarget t;
      t.base_id = j.at("base_id").get<std::size_t>();
      t.x = words(j, "x");
      t.r_prime = words(j, "r_prime");
      t.y_prime = words(j, "y_prime");
      t.promote = words(j, "P");
      t.suppress = words(j, "N");
      t.lambda = j.value("lambda", 1.0);
      t.r = words(j, "r");
      t.y = words(j, "y");
      if (j.contains("label")) t.label = parse_polarity(j.at("label").get<std::string>());
      t.validate();
      out.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw Error("targets line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

#define ULAB_INSTANTIATE(T)                                                                              \
  template ad::Var<T> l1_target_loss(const lm::BoundParams<T>&, const AttackTarget&);                    \
  template ad::Var<T> l2_guidance_loss(const lm::BoundParams<T>&, const AttackTarget&);                  \
  template ad::Var<T> combined_objective(const lm::BoundParams<T>&, const std::vector<AttackTarget>&,    \
                                         ObjectiveKind);                                                 \
  template T objective_value(const lm::ModelParams<T>&, const std::vector<AttackTarget>&, ObjectiveKind); \
  template std::vector<T> objective_gradient(const lm::ModelParams<T>&, const std::vector<AttackTarget>&, \
                                             ObjectiveKind);

ULAB_INSTANTIATE(float)
ULAB_INSTANTIATE(double)

#undef ULAB_INSTANTIATE

}  // namespace ulab::attack
