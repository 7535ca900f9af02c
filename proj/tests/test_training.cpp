#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "dubscore/data_model.hpp"
#include "dubscore/errors.hpp"
#include "dubscore/training.hpp"
#include "test_support.hpp"

namespace dubscore::fusion {
namespace {

struct Fixture {
  data::SyntheticDataset ds;
  std::vector<std::size_t> rows;
  std::vector<double> labels;
};

// Noiseless synthetic clips labelled with their hidden quality.
Fixture noiseless(int n) {
  data::SyntheticSpec s;
  s.n_clips = n;
  s.seed = 4;
  s.metric_noise_sigma = 0.0;
  s.stream_noise_sigma = 0.0;
  Fixture f{data::generate_synthetic(s), {}, {}};
  f.rows.resize(static_cast<std::size_t>(n));
  std::iota(f.rows.begin(), f.rows.end(), 0);
  f.labels = f.ds.truth.quality;
  for (double& y : f.labels) y = std::clamp(y, 1.0, 5.0);
  return f;
}

NetworkConfig small_net() {
  NetworkConfig c;
  c.shared_dim = 16;
  c.lora_rank = 4;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_dim = 32;
  c.seed = 7;
  c.epochs = 6;
  c.batch_size = 32;
  c.learning_rate = 1e-3;
  return c;
}

TEST(Train, SameSeedGivesIdenticalTraces) {
  const auto f = noiseless(80);
  FusionNetwork a(small_net()), b(small_net());
  const auto ra = train(a, f.ds.manifest.streams, f.rows, f.labels);
  const auto rb = train(b, f.ds.manifest.streams, f.rows, f.labels);
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  EXPECT_EQ(ra.final_loss, rb.final_loss);
  EXPECT_EQ(predict(a, f.ds.manifest.streams, f.rows), predict(b, f.ds.manifest.streams, f.rows));
  NetworkConfig other = small_net();
  other.seed = 8;
  FusionNetwork c(other);
  EXPECT_NE(train(c, f.ds.manifest.streams, f.rows, f.labels).epoch_loss, ra.epoch_loss);
}

TEST(Train, NoiselessDataConvergesMonotonically) {
  const auto f = noiseless(200);
  NetworkConfig c = small_net();
  c.dropout = 0.0;
  c.batch_size = 200;  // full batch: each epoch loss is the loss before that step
  c.learning_rate = 1e-4;
  c.epochs = 50;
  FusionNetwork net(c);
  const auto r = train(net, f.ds.manifest.streams, f.rows, f.labels);
  ASSERT_EQ(r.epoch_loss.size(), 50u);
  EXPECT_LT(r.final_loss, r.initial_loss);
  for (std::size_t e = 5; e + 1 < r.epoch_loss.size(); ++e) {
    EXPECT_LE(r.epoch_loss[e + 1], r.epoch_loss[e]) << "epoch " << e + 1;
  }
}

TEST(Train, OverridesTakePrecedence) {
  const auto f = noiseless(40);
  FusionNetwork net(small_net());
  TrainOverrides o;
  o.epochs = 2;
  EXPECT_EQ(train(net, f.ds.manifest.streams, f.rows, f.labels, o).epoch_loss.size(), 2u);
}

TEST(Train, FrozenGroupsStayFixed) {
  const auto f = noiseless(40);
  FusionNetwork net(small_net());
  const auto before = net.parameters();
  train(net, f.ds.manifest.streams, f.rows, f.labels);
  for (std::size_t s = 0; s < data::kStreamCount; ++s) {
    EXPECT_EQ(net.parameters().adapters[s].projection, before.adapters[s].projection);
    EXPECT_NE(net.parameters().adapters[s].lora_up, before.adapters[s].lora_up);
  }
}

TEST(Finetune, ZeroEpochsLeavesNetworkUnchanged) {
  const auto f = noiseless(40);
  FusionNetwork net(small_net());
  train(net, f.ds.manifest.streams, f.rows, f.labels);
  const auto before = net.parameters();
  TrainOverrides o;
  o.epochs = 0;
  finetune(net, f.ds.manifest.streams, f.rows, f.labels, o);
  std::vector<const Eigen::MatrixXd*> a;
  before.for_each([&](const std::string&, ParamGroup, const Eigen::MatrixXd& m) { a.push_back(&m); });
  std::size_t i = 0;
  net.parameters().for_each([&](const std::string& n, ParamGroup, const Eigen::MatrixXd& m) {
    EXPECT_EQ(m, *a[i++]) << n;
  });
}

TEST(Finetune, ImprovesFitToNewTargets) {
  const auto f = noiseless(60);
  FusionNetwork net(small_net());
  std::vector<double> shifted = f.labels;
  for (double& y : shifted) y = std::clamp(6.0 - y, 1.0, 5.0);  // reversed targets
  train(net, f.ds.manifest.streams, f.rows, f.labels);
  TrainOverrides o;
  o.epochs = 10;
  const auto r = finetune(net, f.ds.manifest.streams, f.rows, shifted, o);
  EXPECT_LT(r.final_loss, r.initial_loss);
}

TEST(Train, InputErrors) {
  const auto f = noiseless(20);
  FusionNetwork net(small_net());
  const auto& st = f.ds.manifest.streams;
  EXPECT_THROW(train(net, st, std::vector<std::size_t>{}, std::vector<double>{}), DataError);
  EXPECT_THROW(train(net, st, f.rows, std::vector<double>(5, 3.0)), DataError);
  auto nan = f.labels;
  nan[3] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(net, st, f.rows, nan);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("missing label"), std::string::npos);
  }
  auto high = f.labels;
  high[0] = 5.5;
  EXPECT_THROW(train(net, st, f.rows, high), DataError);
  TrainOverrides bad;
  bad.batch_size = 0;
  EXPECT_THROW(train(net, st, f.rows, f.labels, bad), ConfigError);
}

TEST(Train, NonFiniteLossNamesBatch) {
  const auto f = noiseless(20);
  FusionNetwork net(small_net());
  net.mutable_parameters().head.bias(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    train(net, f.ds.manifest.streams, f.rows, f.labels);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

TEST(Predict, OutputsOnMosScale) {
  const auto f = noiseless(30);
  FusionNetwork net(small_net());
  const Eigen::VectorXd p = predict(net, f.ds.manifest.streams, f.rows, 7);
  ASSERT_EQ(p.size(), 30);
  EXPECT_TRUE((p.array() > 1.0).all() && (p.array() < 5.0).all());
  EXPECT_LT((p - predict(net, f.ds.manifest.streams, f.rows, 256)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Adam, FirstStepMovesEachCoordinateByLearningRate) {
  // After one step m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps).
  NetworkConfig c = dubscore::testing::tiny_config();
  FusionNetwork net(c);
  const auto before = net.parameters();
  FusionParameters grads = before.zeros_like();
  grads.head.weight.setConstant(-2.0);
  AdamOptions o;
  o.learning_rate = 0.01;
  AdamOptimizer adam(before, o);
  adam.step(net.mutable_parameters(), grads, 0);
  const Eigen::MatrixXd delta = net.parameters().head.weight - before.head.weight;
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    EXPECT_NEAR(delta(i), 0.01 * 2.0 / (2.0 + 1e-8), 1e-12);
  }
  EXPECT_EQ(net.parameters().head.bias, before.head.bias);
}

}  // namespace
}  // namespace dubscore::fusion
