#include "ulab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ulab::lm {

template <typename T>
TrainStats train(ModelParams<T>& params, const std::vector<PackedSequence>& data,
                 const TrainConfig& config, const std::function<void(int, double)>& on_epoch) {
  if (data.empty()) throw Error("train: empty dataset");
  if (config.batch_size < 1 || config.epochs < 0) throw Error("train: invalid batch size or epochs");
  const std::vector<Segment> segs{Segment::Trace, Segment::Answer};
  std::vector<T> theta = params.flat();
  std::vector<double> m(theta.size(), 0.0), v(theta.size(), 0.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  TrainStats stats;
  long step = 0;
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const double total_steps = static_cast<double>(config.epochs) * static_cast<double>((data.size() + bs - 1) / bs);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_size));
      std::vector<double> g(theta.size(), 0.0);
      for (std::size_t k = b0; k < b1; ++k) {
        auto [loss, gi] = loss_and_grad(params, data[order[k]], segs);
        epoch_loss += static_cast<double>(loss);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<double>(gi[i]);
      }
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      double sq = 0;
      for (auto& x : g) {
        x *= inv;
        sq += x * x;
      }
      if (!std::isfinite(sq)) throw Error("train: non-finite gradient at step " + std::to_string(step));
      const double gnorm = std::sqrt(sq);
      const double clip = (config.grad_clip > 0 && gnorm > config.grad_clip) ? config.grad_clip / gnorm : 1.0;
      ++step;
      const double lr = config.linear_decay
                            ? config.learning_rate * (1.0 - static_cast<double>(step - 1) / total_steps)
                            : config.learning_rate;
      const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = g[i] * clip;
        m[i] = config.beta1 * m[i] + (1 - config.beta1) * gi;
        v[i] = config.beta2 * v[i] + (1 - config.beta2) * gi * gi;
        const double upd = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config.eps);
        theta[i] = static_cast<T>(static_cast<double>(theta[i]) - upd);
      }
      params.set_flat(theta);
    }
    epoch_loss /= static_cast<double>(data.size());
    stats.epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  return stats;
}

template <typename T>
double mean_nll(const ModelParams<T>& params, const std::vector<PackedSequence>& data,
                const std::vector<Segment>& segments) {
  if (data.empty()) throw Error("mean_nll: empty dataset");
  double acc = 0;
  for (const auto& s : data) acc += static_cast<double>(nll_value(params, s, segments));
  return acc / static_cast<double>(data.size());
}

template TrainStats train(ModelParams<float>&, const std::vector<PackedSequence>&, const TrainConfig&,
                          const std::function<void(int, double)>&);
template TrainStats train(ModelParams<double>&, const std::vector<PackedSequence>&, const TrainConfig&,
                          const std::function<void(int, double)>&);
template double mean_nll(const ModelParams<float>&, const std::vector<PackedSequence>&,
                         const std::vector<Segment>&);
template double mean_nll(const ModelParams<double>&, const std::vector<PackedSequence>&,
                         const std::vector<Segment>&);

}  // namespace ulab::lm
