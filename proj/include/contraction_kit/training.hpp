#pragma once

// Dataset sampling and the minibatch training loop for the metric/controller
// pair.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "contraction_kit/losses.hpp"

namespace ckit {

struct TrainConfig {
  int N = 20000;
  int epochs = 30;
  int batch_size = 256;
  double learning_rate = 1e-3;
  /// Learning rate is multiplied by lr_decay every lr_decay_every epochs;
  /// 0 means every third of training.
  double lr_decay = 0.5;
  int lr_decay_every = 0;
  double alpha = 0.5;
  int K = 32;
  std::uint64_t seed = 0;
  std::vector<int> metric_hidden{64};
  std::vector<int> controller_hidden{64};
  /// Channel count of the controller's hidden tanh layer; 0 means 3n.
  int channels = 0;
  double m_bar = 10.0;
  double m_under = 0.1;
  bool time_input = false;
  /// Empty means every state coordinate.
  std::vector<int> metric_state_inputs;
  std::vector<int> controller_state_inputs;
  double holdout_fraction = 0.1;
  bool cv_enabled = false;
  double cv_scale = 0.0;

  /// Throws std::invalid_argument when an invariant fails.
  void validate() const;
  /// Applies the larger dataset and epoch count.
  void use_full_scale();
};

struct TrainResult {
  MetricNet metric;
  ControllerNet controller;
  std::vector<LossReport> history;  // one entry per epoch
  std::vector<Sample> holdout;
  double wall_seconds = 0.0;
  TrainConfig config;
};

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(const std::string& what, int epoch, int batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

/// Samples x_d ∈ S_x, x = x_d + e with e ∈ error_box, u_d ∈ S_u, t ∈ S_t,
/// each coordinate uniform.
std::vector<Sample> sample_dataset(const SystemModel& system, int N, RngStream& rng);

/// Networks at their seeded initialization for the given config.
void initialize_networks(const SystemModel& system, const TrainConfig& config, MetricNet& metric,
                         ControllerNet& controller);

using EpochCallback = std::function<void(int epoch, const LossReport& report)>;

/// Adam on the empirical loss. Throws TrainingDivergence on a non-finite batch
/// loss or gradient.
TrainResult train(const SystemModel& system, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Header: epoch,l_u,l_c,l_w1,l_w2,total
void write_loss_history_csv(const std::string& path, const std::vector<LossReport>& history);

/// Shortest round-trip decimal form, locale independent.
std::string format_double(double v);

}  // namespace ckit
