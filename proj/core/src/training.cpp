#include "dubscore/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "dubscore/errors.hpp"
#include "dubscore/random.hpp"

namespace dubscore::fusion {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

AdamOptimizer::AdamOptimizer(const FusionParameters& like, const AdamOptions& options)
    : opt_(options), m_(like.zeros_like()), v_(like.zeros_like()) {}

void AdamOptimizer::step(FusionParameters& params, const FusionParameters& grads,
                         unsigned frozen_groups) {
  ++t_;
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  std::vector<MatrixXd*> p, m, v;
  std::vector<const MatrixXd*> g;
  std::vector<bool> frozen;
  params.for_each([&](const std::string&, ParamGroup grp, MatrixXd& t) {
    p.push_back(&t);
    frozen.push_back((frozen_groups & static_cast<unsigned>(grp)) != 0);
  });
  m_.for_each([&](const std::string&, ParamGroup, MatrixXd& t) { m.push_back(&t); });
  v_.for_each([&](const std::string&, ParamGroup, MatrixXd& t) { v.push_back(&t); });
  grads.for_each([&](const std::string&, ParamGroup, const MatrixXd& t) { g.push_back(&t); });
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (frozen[i]) continue;
    m[i]->array() = opt_.beta1 * m[i]->array() + (1.0 - opt_.beta1) * g[i]->array();
    v[i]->array() = opt_.beta2 * v[i]->array() + (1.0 - opt_.beta2) * g[i]->array().square();
    p[i]->array() -=
        opt_.learning_rate * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + opt_.epsilon);
  }
}

namespace {

void check_labels(std::span<const std::size_t> rows, std::span<const double> labels,
                  const data::StreamSet& streams) {
  if (rows.empty()) throw DataError("train: no training clips");
  if (labels.size() != rows.size()) {
    throw DataError("train: " + std::to_string(rows.size()) + " clips but " +
                    std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= streams.count()) throw DataError("train: row index out of range");
    if (!std::isfinite(labels[i])) {
      throw DataError("train: missing label for row " + std::to_string(rows[i]));
    }
    if (labels[i] < 1.0 || labels[i] > 5.0) {
      throw DataError("train: label outside [1,5] for row " + std::to_string(rows[i]));
    }
  }
}

double eval_loss(const FusionNetwork& net, const data::StreamSet& streams,
                 std::span<const std::size_t> rows, const VectorXd& targets, int batch_size) {
  double total = 0.0;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0, b = 1; start < rows.size(); start += bs, ++b) {
    const std::size_t n = std::min(bs, rows.size() - start);
    VectorXd pred;
    try {
      pred = predict(net, streams, rows.subspan(start, n));
    } catch (const NumericError& e) {
      throw NumericError(std::string("train: ") + e.what() + " in initial-loss batch " +
                         std::to_string(b));
    }
    total += ((pred.array() - 1.0) / 4.0 - targets.segment(static_cast<Index>(start), static_cast<Index>(n)).array())
                 .square()
                 .sum();
  }
  return total / static_cast<double>(rows.size());
}

TrainReport run_training(FusionNetwork& net, const data::StreamSet& streams,
                         std::span<const std::size_t> rows, std::span<const double> labels,
                         const TrainOverrides& ov, std::uint64_t stream_tag) {
  check_labels(rows, labels, streams);
  const auto& cfg = net.config();
  const double lr = ov.learning_rate.value_or(cfg.learning_rate);
  const int batch_size = ov.batch_size.value_or(cfg.batch_size);
  const int epochs = ov.epochs.value_or(cfg.epochs);
  const unsigned frozen = ov.frozen_groups.value_or(cfg.frozen_groups);
  if (!(lr > 0.0) || batch_size < 1 || epochs < 0) {
    throw ConfigError("train: invalid learning rate, batch size or epoch count");
  }

  VectorXd targets(static_cast<Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    targets(static_cast<Index>(i)) = normalize_mos(labels[i]);
  }
  TrainReport report;
  report.initial_loss = eval_loss(net, streams, rows, targets, batch_size);
  if (epochs == 0) {
    report.final_loss = report.initial_loss;
    return report;
  }

  const std::uint64_t key = mix_seed(cfg.seed, stream_tag);
  AdamOptimizer adam(net.parameters(), AdamOptions{lr, 0.9, 0.999, 1e-8});
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::mt19937_64 gen(mix_seed(key, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), gen);
    double total = 0.0;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(batch_size), ++batch_no) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      std::vector<std::size_t> batch_rows;
      VectorXd t(static_cast<Index>(end - start));
      for (std::size_t i = start; i < end; ++i) {
        batch_rows.push_back(rows[order[i]]);
        t(static_cast<Index>(i - start)) = targets(static_cast<Index>(order[i]));
      }
      const Batch batch = make_batch(streams, batch_rows, cfg.modalities);
      const auto where = "epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch_no + 1);
      ForwardCache cache;
      VectorXd s;
      try {
        s = net.forward(batch, ForwardOptions{Mode::Train, mix_seed(key, ~step)}, &cache);
      } catch (const NumericError& e) {
        throw NumericError(std::string("train: ") + e.what() + " at " + where);
      }
      const VectorXd err = s - t;
      const double loss = err.squaredNorm() / static_cast<double>(err.size());
      if (!std::isfinite(loss)) throw NumericError("train: non-finite loss at " + where);
      total += loss * static_cast<double>(err.size());
      const FusionParameters grads =
          net.backward(cache, (2.0 / static_cast<double>(err.size())) * err);
      adam.step(net.mutable_parameters(), grads, frozen);
      ++step;
    }
    report.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  report.final_loss = eval_loss(net, streams, rows, targets, batch_size);
  return report;
}

}  // namespace

TrainReport train(FusionNetwork& network, const data::StreamSet& streams,
                  std::span<const std::size_t> rows, std::span<const double> labels,
                  const TrainOverrides& overrides) {
  return run_training(network, streams, rows, labels, overrides, 0x7a11ULL);
}

TrainReport finetune(FusionNetwork& network, const data::StreamSet& streams,
                     std::span<const std::size_t> rows, std::span<const double> human_mos,
                     const TrainOverrides& overrides) {
  return run_training(network, streams, rows, human_mos, overrides, 0xf1e7ULL);
}

VectorXd predict(const FusionNetwork& network, const data::StreamSet& streams,
                 std::span<const std::size_t> rows, int batch_size) {
  if (batch_size < 1) throw ConfigError("predict: batch size must be >= 1");
  VectorXd out(static_cast<Index>(rows.size()));
  for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(batch_size));
    const Batch batch =
        make_batch(streams, rows.subspan(start, end - start), network.config().modalities);
    const VectorXd s = network.forward(batch, ForwardOptions{});
    for (Index i = 0; i < s.size(); ++i) out(static_cast<Index>(start) + i) = rescale_score(s(i));
  }
  return out;
}

}  // namespace dubscore::fusion
