#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ulab/model.hpp"

namespace ulab::lm {

/// Adam on the mean trace+answer NLL. Sample order is a seeded shuffle per
/// epoch; per-sample gradients inside a batch are summed in index order.
struct TrainConfig {
  int epochs = 5;
  double learning_rate = 2e-5;
  int batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
  bool linear_decay = false;  // learning rate falls linearly to 0 over all steps
  std::uint64_t seed = 1;
};

struct TrainStats {
  std::vector<double> epoch_loss;  // mean per-sample loss of each epoch
};

template <typename T>
TrainStats train(ModelParams<T>& params, const std::vector<PackedSequence>& data,
                 const TrainConfig& config,
                 const std::function<void(int epoch, double loss)>& on_epoch = {});

/// Mean of per-sample nll over the given segments.
template <typename T>
double mean_nll(const ModelParams<T>& params, const std::vector<PackedSequence>& data,
                const std::vector<Segment>& segments);

}  // namespace ulab::lm
