#include "ulab/unlearning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ulab::unlearn {

const char* method_name(Method m) {
  switch (m) {
    case Method::GA: return "GA";
    case Method::GA_GD: return "GA_GD";
    case Method::GA_KL: return "GA_KL";
    case Method::RMU: return "RMU";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "GA" || name == "ga") return Method::GA;
  if (name == "GA_GD" || name == "ga_gd" || name == "GA+GD") return Method::GA_GD;
  if (name == "GA_KL" || name == "ga_kl" || name == "GA+KL") return Method::GA_KL;
  if (name == "RMU" || name == "rmu") return Method::RMU;
  throw Error("unknown unlearning method '" + name + "'");
}

void UnlearnConfig::validate() const {
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw Error("unlearn: learning rate must be >= 0");
  if (steps < 0) throw Error("unlearn: steps must be >= 0");
  if (retain_weight < 0) throw Error("unlearn: retain weight must be >= 0");
  if (!(max_grad_norm >= 0)) throw Error("unlearn: max_grad_norm must be >= 0");
  if (retain_batch < 1) throw Error("unlearn: retain batch must be >= 1");
  if (method == Method::RMU && !(rmu_coefficient > 0)) throw Error("unlearn: RMU coefficient must be positive");
}

std::vector<double> rmu_direction(int d_model, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x524d55ULL);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> u(static_cast<std::size_t>(d_model));
  double sq = 0;
  for (auto& v : u) {
    v = uni(rng);
    sq += v * v;
  }
  for (auto& v : u) v /= std::sqrt(sq);
  return u;
}

namespace {

const std::vector<lm::Segment> kSpans{lm::Segment::Trace, lm::Segment::Answer};

int resolve_layer(const UnlearnConfig& c, const lm::ModelConfig& m) {
  const int layer = c.rmu_layer < 0 ? m.n_layers - 1 : c.rmu_layer;
  if (layer >= m.n_layers) throw Error("unlearn: RMU layer " + std::to_string(layer) + " out of range");
  return layer;
}

// Rows of the logits that predict the trace+answer positions, as one contiguous block.
std::pair<std::size_t, std::size_t> predicting_rows(const lm::PackedSequence& s) {
  const auto pos = lm::segment_positions(s.layout, kSpans);
  return {pos.front() - 1, pos.size()};
}

template <typename T>
std::vector<T> reference_log_probs(const lm::ModelParams<T>& original, const lm::PackedSequence& s) {
  ad::Tape<T> tape;
  auto b = lm::bind(tape, original, false);
  auto [r0, n] = predicting_rows(s);
  return ad::log_softmax(ad::slice(lm::forward(b, s.tokens).logits, 0, r0, n)).value().data;
}

template <typename T>
Tensor<T> reference_hidden(const lm::ModelParams<T>& original, const lm::PackedSequence& s, int layer) {
  ad::Tape<T> tape;
  auto b = lm::bind(tape, original, false);
  lm::ForwardOptions opt;
  opt.capture_layer = layer;
  return lm::forward(b, s.tokens, opt).hidden.value();
}

// Accumulates weight * grad(loss) into acc and returns the loss value.
template <typename T, typename F>
double accumulate(const lm::ModelParams<T>& params, const ad::GradLayout& layout, double weight,
                  std::vector<double>& acc, F&& build) {
  ad::Tape<T> tape;
  auto b = lm::bind(tape, params, true);
  ad::Var<T> loss = build(b);
  const double value = static_cast<double>(loss.value().item());
  const auto g = ad::flatten(tape.backward(loss), layout);
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weight * static_cast<double>(g[i]);
  return value;
}

}  // namespace

template <typename T>
lm::ModelParams<T> unlearn(const lm::ModelParams<T>& original, const std::vector<lm::PackedSequence>& forget,
                           const std::vector<lm::PackedSequence>& retain, const UnlearnConfig& config,
                           UnlearnTrace* trace) {
  config.validate();
  if (forget.empty()) throw Error("unlearn: empty forget set");
  const bool needs_retain = config.method != Method::GA && config.retain_weight > 0;
  if (needs_retain && retain.empty()) throw Error("unlearn: method needs a non-empty retain set");

  lm::ModelParams<T> params = original;
  const auto layout = lm::param_layout(params.config);
  std::vector<T> theta = params.flat();
  std::mt19937_64 rng(config.seed);
  const int layer = config.method == Method::RMU ? resolve_layer(config, params.config) : -1;

  std::vector<T> steer;
  if (config.method == Method::RMU) {
    const auto u = rmu_direction(params.config.d_model, config.seed);
    for (double v : u) steer.push_back(static_cast<T>(config.rmu_coefficient * v));
  }

  const double wf = 1.0 / static_cast<double>(forget.size());
  for (int step = 0; step < config.steps; ++step) {
    std::vector<double> g(theta.size(), 0.0);  // gradient of the loss being minimized
    double forget_value = 0;

    for (const auto& s : forget) {
      if (config.method == Method::RMU) {
        forget_value += wf * accumulate(params, layout, wf, g, [&](const lm::BoundParams<T>& b) {
          lm::ForwardOptions opt;
          opt.capture_layer = layer;
          auto h = lm::forward(b, s.tokens, opt).hidden;
          auto diff = ad::sub(h, b.vars[0].tape()->constant(Tensor<T>({steer.size()}, steer)));
          return ad::scale(ad::sum(ad::mul(diff, diff)), T(1) / static_cast<T>(h.shape()[0]));
        });
      } else {
        forget_value += wf * accumulate(params, layout, -wf, g, [&](const lm::BoundParams<T>& b) {
          return lm::nll_loss(b, s, kSpans);
        });
      }
    }

    if (needs_retain) {
      std::vector<std::size_t> batch(std::min<std::size_t>(retain.size(), static_cast<std::size_t>(config.retain_batch)));
      std::uniform_int_distribution<std::size_t> pick(0, retain.size() - 1);
      for (auto& i : batch) i = pick(rng);
      const double wr = config.retain_weight / static_cast<double>(batch.size());
      for (std::size_t i : batch) {
        const auto& s = retain[i];
        switch (config.method) {
          case Method::GA_GD:
            accumulate(params, layout, wr, g, [&](const lm::BoundParams<T>& b) { return lm::nll_loss(b, s, kSpans); });
            break;
          case Method::GA_KL: {
            const auto ref = reference_log_probs(original, s);
            accumulate(params, layout, wr, g, [&](const lm::BoundParams<T>& b) {
              auto [r0, n] = predicting_rows(s);
              auto lp = ad::log_softmax(ad::slice(lm::forward(b, s.tokens).logits, 0, r0, n));
              auto ref_var = b.vars[0].tape()->constant(Tensor<T>(lp.shape(), ref));
              auto kl = ad::sum(ad::mul(ad::exp(lp), ad::sub(lp, ref_var)));
              return ad::scale(kl, T(1) / static_cast<T>(n));
            });
            break;
          }
          case Method::RMU: {
            const auto ref = reference_hidden(original, s, layer);
            accumulate(params, layout, wr, g, [&](const lm::BoundParams<T>& b) {
              lm::ForwardOptions opt;
              opt.capture_layer = layer;
              auto h = lm::forward(b, s.tokens, opt).hidden;
              auto diff = ad::sub(h, b.vars[0].tape()->constant(ref));
              return ad::scale(ad::sum(ad::mul(diff, diff)), T(1) / static_cast<T>(h.shape()[0]));
            });
            break;
          }
          case Method::GA:
            break;
        }
      }
    }

    if (!std::isfinite(forget_value)) throw Error("unlearn: non-finite loss at step " + std::to_string(step));
    if (trace) trace->forget_loss.push_back(forget_value);
    double lr = config.learning_rate;
    if (config.max_grad_norm > 0) {
      const double n = ad::norm(g);
      if (n > config.max_grad_norm) lr *= config.max_grad_norm / n;
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * g[i]);
      if (!std::isfinite(theta[i])) throw Error("unlearn: non-finite parameter after step " + std::to_string(step));
    }
    params.set_flat(theta);
  }
  return params;
}

template <typename T>
lm::ModelParams<T> unlearn_indices(const lm::ModelParams<T>& original, const std::vector<lm::PackedSequence>& train,
                                   const std::vector<std::size_t>& forget_indices, const UnlearnConfig& config,
                                   UnlearnTrace* trace) {
  if (forget_indices.empty()) throw Error("unlearn: empty forget set");
  std::vector<char> in_forget(train.size(), 0);
  std::vector<lm::PackedSequence> forget, retain;
  for (std::size_t i : forget_indices) {
    if (i >= train.size()) throw Error("unlearn: forget index " + std::to_string(i) + " out of range");
    if (in_forget[i]) throw Error("unlearn: forget index " + std::to_string(i) + " repeated");
    in_forget[i] = 1;
    forget.push_back(train[i]);
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (!in_forget[i]) retain.push_back(train[i]);
  }
  return unlearn(original, forget, retain, config, trace);
}

template <typename T>
std::vector<T> unlearn_direction(const lm::ModelParams<T>& params, const std::vector<lm::PackedSequence>& forget) {
  if (forget.empty()) throw Error("unlearn_direction: empty forget set");
  std::vector<T> acc;
  for (const auto& s : forget) {
    auto g = lm::per_sample_grad(params, s, kSpans);
    if (acc.empty()) {
      acc = std::move(g);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
  }
  return acc;
}

#define ULAB_INSTANTIATE(T)                                                                                 \
  template lm::ModelParams<T> unlearn(const lm::ModelParams<T>&, const std::vector<lm::PackedSequence>&,    \
                                      const std::vector<lm::PackedSequence>&, const UnlearnConfig&,         \
                                      UnlearnTrace*);                                                       \
  template lm::ModelParams<T> unlearn_indices(const lm::ModelParams<T>&, const std::vector<lm::PackedSequence>&, \
                                              const std::vector<std::size_t>&, const UnlearnConfig&,        \
                                              UnlearnTrace*);                                               \
  template std::vector<T> unlearn_direction(const lm::ModelParams<T>&, const std::vector<lm::PackedSequence>&);

ULAB_INSTANTIATE(float)
ULAB_INSTANTIATE(double)

#undef ULAB_INSTANTIATE

}  // namespace ulab::unlearn
