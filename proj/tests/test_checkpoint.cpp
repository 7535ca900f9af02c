#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "dubscore/checkpoint.hpp"
#include "dubscore/errors.hpp"
#include "test_support.hpp"

namespace dubscore::io {
namespace {

using dubscore::testing::TempDir;

TEST(Archive, ByteLayout) {
  TempDir dir("archive");
  Archive a;
  a.kind = "k";
  a.metadata = "{}";
  Eigen::MatrixXd m(1, 2);
  m << 1.5, -2.0;
  a.put("x", m, DType::F64);
  const auto p = dir.path() / "a.dkpt";
  write_archive(a, p);
  const std::string bytes = dubscore::testing::slurp(p);
  // magic 4 + version 4 + kind 4+1 + meta 4+2 + count 4 + name 4+1 + dtype 1 + shape 8 + data 16
  ASSERT_EQ(bytes.size(), 53u);
  EXPECT_EQ(bytes.substr(0, 4), "DUBK");
  EXPECT_EQ(bytes[4], 1);
  double v;
  std::memcpy(&v, bytes.data() + 37, 8);
  EXPECT_EQ(v, 1.5);
  const auto back = read_archive(p);
  EXPECT_EQ(back.kind, "k");
  EXPECT_EQ(back.get("x"), m);
  EXPECT_THROW(back.get("y"), DataError);
}

TEST(Archive, RejectsForeignFiles) {
  TempDir dir("archive-bad");
  const auto p = dir.path() / "junk";
  std::ofstream(p) << "not a checkpoint";
  EXPECT_THROW(read_archive(p), DataError);
  EXPECT_THROW(read_archive(dir.path() / "absent"), DataError);
  std::ofstream(dir.path() / "trunc", std::ios::binary) << "DUBK";
  EXPECT_THROW(read_archive(dir.path() / "trunc"), DataError);
}

TEST(Network, RoundTripPreservesScoresAndProvenance) {
  TempDir dir("net");
  auto cfg = dubscore::testing::tiny_config(5);
  cfg.modalities = {true, false, true};
  fusion::FusionNetwork net(cfg);
  dubscore::testing::perturb(net, 2);
  const auto p = dir.path() / "n.dkpt";
  save_network(net, p, R"({"stage":"WS"})");
  const auto back = load_network(p);
  EXPECT_EQ(config_to_json(back.config()), config_to_json(cfg));
  EXPECT_EQ(read_network_provenance(p), R"({"stage":"WS"})");
  const auto batch = dubscore::testing::random_batch(6, 3);
  const Eigen::VectorXd a = net.forward(batch, {});
  const Eigen::VectorXd b = back.forward(batch, {});
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5);  // parameters are stored as f32
  // A second save of the loaded network is byte-identical.
  save_network(back, dir.path() / "m.dkpt", R"({"stage":"WS"})");
  EXPECT_EQ(dubscore::testing::slurp(p), dubscore::testing::slurp(dir.path() / "m.dkpt"));
}

TEST(Network, WrongKindIsRejected) {
  TempDir dir("kind");
  ProxyModel pm;
  pm.weights = proxy::equal_weights();
  save_proxy(pm, dir.path() / "p.dkpt");
  EXPECT_THROW(load_network(dir.path() / "p.dkpt"), DataError);
  fusion::FusionNetwork net(dubscore::testing::tiny_config());
  save_network(net, dir.path() / "n.dkpt");
  EXPECT_THROW(load_proxy(dir.path() / "n.dkpt"), DataError);
}

TEST(Proxy, RoundTripIsExact) {
  TempDir dir("proxy");
  ProxyModel pm;
  pm.normalizer.mean = {1, 2, 3, 4, 5};
  pm.normalizer.stddev = {0.1, 0.2, 0.3, 0.4, 0.5};
  pm.weights.w = {0.1, 0.2, 0.3, 0.25, 0.15};
  pm.weights.scale = 0.7;
  pm.weights.offset = 3.1;
  pm.weights.achieved_rho = 0.83;
  pm.weights.residual_variance = 0.05;
  for (int k = 0; k < 3; ++k) {
    auto w = pm.weights;
    w.w = {0.2 + 0.01 * k, 0.2, 0.2, 0.2, 0.2 - 0.01 * k};
    pm.ensemble.members.push_back(w);
  }
  pm.ensemble.residual_variance = 0.07;
  save_proxy(pm, dir.path() / "p.dkpt");
  const auto back = load_proxy(dir.path() / "p.dkpt");
  EXPECT_EQ(back.normalizer.mean, pm.normalizer.mean);
  EXPECT_EQ(back.normalizer.stddev, pm.normalizer.stddev);
  EXPECT_EQ(back.normalizer.sign, pm.normalizer.sign);
  EXPECT_EQ(back.weights.w, pm.weights.w);
  EXPECT_EQ(back.weights.scale, 0.7);
  EXPECT_EQ(back.weights.offset, 3.1);
  ASSERT_EQ(back.ensemble.members.size(), 3u);
  EXPECT_EQ(back.ensemble.members[2].w, pm.ensemble.members[2].w);
  EXPECT_EQ(back.ensemble.residual_variance, 0.07);
}

TEST(Config, JsonRoundTripAndErrors) {
  auto c = dubscore::testing::tiny_config(9);
  c.modalities = {false, true, true};
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  EXPECT_THROW(config_from_json("{"), DataError);
  EXPECT_THROW(config_from_json("{}"), DataError);
}

}  // namespace
}  // namespace dubscore::io
