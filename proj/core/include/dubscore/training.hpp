#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dubscore/data_model.hpp"
#include "dubscore/fusion_network.hpp"

namespace dubscore::fusion {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamOptimizer {
 public:
  AdamOptimizer(const FusionParameters& like, const AdamOptions& options);

  // One bias-corrected update; tensors in `frozen_groups` are left untouched.
  void step(FusionParameters& params, const FusionParameters& grads, unsigned frozen_groups);
  long steps() const { return t_; }

 private:
  AdamOptions opt_;
  FusionParameters m_, v_;
  long t_ = 0;
};

// Per-call overrides of the network's optimization settings.
struct TrainOverrides {
  std::optional<double> learning_rate;
  std::optional<int> batch_size;
  std::optional<int> epochs;
  std::optional<unsigned> frozen_groups;
};

struct TrainReport {
  // Mean train-mode MSE (normalized targets) per epoch.
  std::vector<double> epoch_loss;
  // Eval-mode MSE on the training rows before and after optimization.
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Minimizes MSE between the normalized score and (label - 1) / 4 with Adam.
// `labels` are MOS-scale targets in [1, 5], parallel to `rows`. Shuffling and
// dropout are keyed by the network seed, so equal inputs give equal traces.
TrainReport train(FusionNetwork& network, const data::StreamSet& streams,
                  std::span<const std::size_t> rows, std::span<const double> labels,
                  const TrainOverrides& overrides = {});

// Continues optimization of an already trained network on human MOS, with its own
// shuffle and dropout streams.
TrainReport finetune(FusionNetwork& network, const data::StreamSet& streams,
                     std::span<const std::size_t> rows, std::span<const double> human_mos,
                     const TrainOverrides& overrides = {});

// Eval-mode DubScore on the MOS scale (1, 5).
Eigen::VectorXd predict(const FusionNetwork& network, const data::StreamSet& streams,
                        std::span<const std::size_t> rows, int batch_size = 256);

}  // namespace dubscore::fusion
