#include <gtest/gtest.h>

#include <Eigen/SVD>

#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

#include "dubscore/errors.hpp"
#include "dubscore/fusion_network.hpp"
#include "test_support.hpp"

namespace dubscore::fusion {
namespace {

using dubscore::testing::perturb;
using dubscore::testing::random_batch;
using dubscore::testing::tiny_config;
using Eigen::MatrixXd;
using Eigen::VectorXd;

bool bit_equal(const VectorXd& a, const VectorXd& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

TEST(NetworkConfig, Defaults) {
  const NetworkConfig c;
  EXPECT_EQ(c.shared_dim, 256);
  EXPECT_EQ(c.lora_rank, 16);
  EXPECT_EQ(c.n_layers, 3);
  EXPECT_EQ(c.n_heads, 4);
  EXPECT_EQ(c.ffn_dim, 4 * c.shared_dim);
  EXPECT_DOUBLE_EQ(c.dropout, 0.2);
  EXPECT_DOUBLE_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.batch_size, 64);
  EXPECT_EQ(c.epochs, 50);
  EXPECT_NO_THROW(c.validate());
}

TEST(NetworkConfig, ValidationErrors) {
  NetworkConfig c;
  c.n_heads = 3;  // 256 not divisible by 3
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.lora_rank = 193;  // exceeds the 192-dim speaker stream
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.lora_rank = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetworkConfig{};
  c.modalities = {false, false, false};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Modalities, LabelRoundTrip) {
  EXPECT_EQ(modality_label(kAllModalities), "A+V+T");
  EXPECT_EQ(modality_label(parse_modalities("A+T")), "A+T");
  EXPECT_EQ(parse_modalities("V"), (ModalityMask{false, true, false}));
  EXPECT_THROW(parse_modalities("A+X"), ConfigError);
}

// Adapter on the first four input coordinates only, so the stream behaves as d_in = 4.
TEST(Adapter, MatchesDenseMatrixProductOracle) {
  NetworkConfig c = tiny_config();
  c.shared_dim = 3;
  c.n_heads = 1;
  c.lora_rank = 2;
  c.lora_alpha = 3.0;
  FusionNetwork net(c);
  std::mt19937_64 g(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double P[3][4], A[2][4], B[3][2];
  for (auto& row : P) for (double& v : row) v = u(g);
  for (auto& row : A) for (double& v : row) v = u(g);
  for (auto& row : B) for (double& v : row) v = u(g);
  auto& ad = net.mutable_parameters().adapters[0];
  ad.projection.setZero();
  ad.lora_down.setZero();
  for (int i = 0; i < 3; ++i) for (int j = 0; j < 4; ++j) ad.projection(i, j) = P[i][j];
  for (int i = 0; i < 2; ++i) for (int j = 0; j < 4; ++j) ad.lora_down(i, j) = A[i][j];
  for (int i = 0; i < 3; ++i) for (int j = 0; j < 2; ++j) ad.lora_up(i, j) = B[i][j];

  for (int basis = 0; basis < 4; ++basis) {
    VectorXd h = VectorXd::Zero(data::kStreamDims[0]);
    h(basis) = 1.0;
    const VectorXd out = net.adapt_stream(0, h);
    // Oracle: P e_j + (alpha / r) B (A e_j), written out with scalar loops.
    for (int i = 0; i < 3; ++i) {
      double lora = 0.0;
      for (int k = 0; k < 2; ++k) lora += B[i][k] * A[k][basis];
      EXPECT_NEAR(out(i), P[i][basis] + 1.5 * lora, 1e-14);
    }
  }
}

TEST(Adapter, DimensionMismatchThrows) {
  FusionNetwork net(tiny_config());
  EXPECT_THROW(net.adapt_stream(1, VectorXd::Zero(191)), DataError);
}

TEST(Adapter, FreshInitIsProjectionOnlyBitForBit) {
  const FusionNetwork net(tiny_config(4));
  std::mt19937_64 g(2);
  std::normal_distribution<double> nd(0, 1);
  for (std::size_t s = 0; s < data::kStreamCount; ++s) {
    const auto& ad = net.parameters().adapters[s];
    EXPECT_TRUE(ad.lora_up.isZero(0.0));
    VectorXd h(data::kStreamDims[s]);
    for (auto& v : h) v = nd(g);
    const VectorXd expect = ad.projection * h;
    EXPECT_TRUE(bit_equal(net.adapt_stream(s, h), expect)) << s;
  }
}

TEST(Adapter, ZeroInitEquivalentToDeletedLoraPath) {
  NetworkConfig c = tiny_config(6);
  const FusionNetwork fresh(c);
  FusionParameters no_lora = fresh.parameters();
  for (auto& ad : no_lora.adapters) ad.lora_down.setZero();
  const FusionNetwork deleted(c, no_lora);
  const auto batch = random_batch(5, 8);
  for (auto mode : {Mode::Eval, Mode::Train}) {
    const ForwardOptions o{mode, 77};
    EXPECT_TRUE(bit_equal(fresh.forward(batch, o), deleted.forward(batch, o)));
  }
}

TEST(Adapter, DeltaMapRankIsAtMostR) {
  NetworkConfig c;  // d = 256, r = 16
  c.seed = 5;
  FusionNetwork net(c);
  perturb(net, 9, 0.05);
  for (std::size_t s : {0u, 1u}) {
    const auto& ad = net.parameters().adapters[s];
    const int din = data::kStreamDims[s];
    MatrixXd delta(c.shared_dim, din);
    for (int j = 0; j < din; ++j) {
      VectorXd e = VectorXd::Zero(din);
      e(j) = 1.0;
      delta.col(j) = net.adapt_stream(s, e) - ad.projection * e;
    }
    const Eigen::BDCSVD<MatrixXd> svd(delta);
    const VectorXd sv = svd.singularValues();
    ASSERT_GT(sv(0), 0.0);
    EXPECT_GT(sv(c.lora_rank - 1), 1e-6 * sv(0));  // perturbed path uses the full rank
    for (Eigen::Index k = c.lora_rank; k < sv.size(); ++k) EXPECT_LT(sv(k), 1e-6 * sv(0));
  }
}

TEST(IntraFusion, SingletonAndUniformAndHandSoftmax) {
  NetworkConfig c = tiny_config();
  FusionNetwork net(c);
  std::mt19937_64 g(4);
  std::normal_distribution<double> nd(0, 1);
  const int d = c.shared_dim;

  VectorXd text(d);
  for (auto& v : text) v = nd(g);
  VectorXd alpha;
  const std::vector<VectorXd> one = {text};
  EXPECT_TRUE(bit_equal(net.intra_modal_fuse(data::Modality::Text, one, &alpha), text));
  EXPECT_EQ(alpha.size(), 1);
  EXPECT_EQ(alpha(0), 1.0);

  net.mutable_parameters().intra.attention[0].setZero();
  std::vector<VectorXd> three(3, VectorXd(d));
  for (auto& h : three) for (auto& v : h) v = nd(g);
  net.intra_modal_fuse(data::Modality::Audio, three, &alpha);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(alpha(i), 1.0 / 3.0, 1e-15);

  auto& w = net.mutable_parameters().intra.attention[1];
  w.setZero();
  w(0, 0) = 1.0;
  std::vector<VectorXd> two = {VectorXd::Zero(d), VectorXd::Zero(d)};
  two[0](0) = std::log(2.0);
  net.intra_modal_fuse(data::Modality::Video, two, &alpha);
  EXPECT_NEAR(alpha(0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(alpha(1), 1.0 / 3.0, 1e-15);

  EXPECT_THROW(net.intra_modal_fuse(data::Modality::Audio, std::vector<VectorXd>{}), DataError);
}

TEST(IntraFusion, PermutationEquivariance) {
  FusionNetwork net(tiny_config());
  perturb(net, 3);
  std::mt19937_64 g(6);
  std::normal_distribution<double> nd(0, 1);
  std::vector<VectorXd> h(3, VectorXd(8));
  for (auto& x : h) for (auto& v : x) v = nd(g);
  const VectorXd z = net.intra_modal_fuse(data::Modality::Audio, h);
  const std::vector<VectorXd> perm = {h[2], h[0], h[1]};
  EXPECT_LT((net.intra_modal_fuse(data::Modality::Audio, perm) - z).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(InterGate, UniformAndHandSoftmax) {
  FusionNetwork net(tiny_config());
  auto& p = net.mutable_parameters().inter;
  for (auto& w : p.weight) w.setZero();
  p.bias.setZero();
  std::array<VectorXd, 3> z = {VectorXd::Ones(8), VectorXd::Ones(8) * 2.0, VectorXd::Ones(8) * 3.0};
  VectorXd g;
  net.inter_modal_gate(z, &g);
  for (int m = 0; m < 3; ++m) EXPECT_NEAR(g(m), 1.0 / 3.0, 1e-15);

  net.mutable_parameters().inter.bias(0, 0) = 1.0;
  const auto out = net.inter_modal_gate(z, &g);
  const double e = std::exp(1.0);
  EXPECT_NEAR(g(0), e / (e + 2.0), 1e-15);
  EXPECT_NEAR(g(1), 1.0 / (e + 2.0), 1e-15);
  EXPECT_NEAR(g(2), 1.0 / (e + 2.0), 1e-15);
  EXPECT_NEAR(g(0), 0.5761, 5e-5);
  EXPECT_NEAR(g(1), 0.2119, 5e-5);
  EXPECT_LT((out[1] - g(1) * z[1]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Softmax, PropertySumsToOne) {
  std::mt19937_64 g(99);
  std::normal_distribution<double> nd(0, 1);
  FusionNetwork net(tiny_config());
  for (int draw = 0; draw < 1000; ++draw) {
    perturb(net, g(), 1.0);
    std::vector<VectorXd> h(3, VectorXd(8));
    for (auto& x : h) for (auto& v : x) v = 3.0 * nd(g);
    VectorXd alpha, gate;
    net.intra_modal_fuse(data::Modality::Audio, h, &alpha);
    EXPECT_NEAR(alpha.sum(), 1.0, 1e-12);
    EXPECT_TRUE((alpha.array() >= 0.0).all());
    net.inter_modal_gate({h[0], h[1], h[2]}, &gate);
    EXPECT_NEAR(gate.sum(), 1.0, 1e-12);
    VectorXd raw(5);
    for (auto& v : raw) v = 50.0 * nd(g);
    EXPECT_NEAR(softmax(raw).sum(), 1.0, 1e-12);
  }
}

TEST(Forward, EvalIsDeterministicAndInsideRange) {
  FusionNetwork net(tiny_config());
  perturb(net, 1);
  const auto batch = random_batch(16, 2, 1.0);
  const VectorXd a = net.forward(batch, {Mode::Eval, 1});
  const VectorXd b = net.forward(batch, {Mode::Eval, 2});
  EXPECT_TRUE(bit_equal(a, b));
  for (auto s : a) {
    EXPECT_GT(rescale_score(s), 1.0);
    EXPECT_LT(rescale_score(s), 5.0);
  }
  // Train mode applies keyed dropout: same key same output, different key different output.
  const VectorXd t1 = net.forward(batch, {Mode::Train, 5});
  EXPECT_TRUE(bit_equal(t1, net.forward(batch, {Mode::Train, 5})));
  EXPECT_FALSE(bit_equal(t1, net.forward(batch, {Mode::Train, 6})));
}

TEST(Forward, SingleBundleMatchesBatchRow) {
  FusionNetwork net(tiny_config());
  perturb(net, 10);
  const auto batch = random_batch(3, 4);
  data::EmbeddingBundle bundle;
  for (std::size_t s = 0; s < data::kStreamCount; ++s) bundle.streams[s] = batch.streams[s].row(1).transpose();
  EXPECT_NEAR(net.forward(bundle), net.forward(batch, {})(1), 1e-14);
}

TEST(Forward, ModalitySubsetChangesPrediction) {
  NetworkConfig c = tiny_config(12);
  FusionNetwork full(c);
  c.modalities = {true, false, false};
  FusionNetwork audio(c);
  const auto batch = random_batch(4, 3);
  const VectorXd a = full.forward(batch, {});
  const VectorXd b = audio.forward(batch, {});
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-9);
  // Inactive-modality streams are not read.
  auto partial = batch;
  partial.streams[3].resize(0, 0);
  partial.streams[5].resize(0, 0);
  EXPECT_TRUE(bit_equal(audio.forward(partial, {}), b));
}

TEST(Forward, DimensionMismatchNamesStream) {
  FusionNetwork net(tiny_config());
  auto batch = random_batch(2, 1);
  batch.streams[4].conservativeResize(2, 511);
  try {
    net.forward(batch, {});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("video_face"), std::string::npos);
  }
}

// Central differences of sum_i w_i * score_i.
double worst_relative_error(FusionNetwork& net, const Batch& batch, const VectorXd& w,
                            const ForwardOptions& o, double eps) {
  ForwardCache cache;
  net.forward(batch, o, &cache);
  const FusionParameters grad = net.backward(cache, w);
  std::vector<Eigen::MatrixXd*> tensors;
  std::vector<const Eigen::MatrixXd*> grads;
  const_cast<FusionParameters&>(net.parameters())
      .for_each([&](const std::string&, ParamGroup, Eigen::MatrixXd& m) { tensors.push_back(&m); });
  grad.for_each([&](const std::string&, ParamGroup, const Eigen::MatrixXd& m) { grads.push_back(&m); });
  double worst = 0.0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    auto& m = *tensors[t];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      m.data()[i] = v + eps;
      const double up = w.dot(net.forward(batch, o));
      m.data()[i] = v - eps;
      const double down = w.dot(net.forward(batch, o));
      m.data()[i] = v;
      const double fd = (up - down) / (2.0 * eps);
      const double an = grads[t]->data()[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

TEST(Backward, MatchesCentralFiniteDifferences) {
  FusionNetwork net(tiny_config());
  perturb(net, 5);
  const auto batch = random_batch(3, 7);
  VectorXd w(3);
  w << 0.7, -1.3, 0.4;
  EXPECT_LE(worst_relative_error(net, batch, w, {Mode::Train, 99}, 1e-4), 1e-3);
}

TEST(Backward, FrozenGroupsGetZeroGradient) {
  NetworkConfig c = tiny_config();
  c.frozen_groups = static_cast<unsigned>(ParamGroup::Projection) |
                    static_cast<unsigned>(ParamGroup::Head);
  FusionNetwork net(c);
  perturb(net, 8);
  ForwardCache cache;
  net.forward(random_batch(3, 1), {Mode::Train, 1}, &cache);
  const auto grad = net.backward(cache, VectorXd::Ones(3));
  std::size_t frozen_seen = 0, live_nonzero = 0;
  grad.for_each([&](const std::string& name, ParamGroup g, const Eigen::MatrixXd& m) {
    if (c.is_frozen(g)) {
      ++frozen_seen;
      EXPECT_TRUE(m.isZero(0.0)) << name;
    } else if (!m.isZero(0.0)) {
      ++live_nonzero;
    }
  });
  EXPECT_EQ(frozen_seen, 6u + 2u);  // six projections, head weight and bias
  EXPECT_GT(live_nonzero, 0u);
}

TEST(Backward, ZeroResidualGivesZeroGradients) {
  FusionNetwork net(tiny_config());
  perturb(net, 2);
  ForwardCache cache;
  const auto batch = random_batch(1, 3);
  const VectorXd s = net.forward(batch, {Mode::Train, 4}, &cache);
  const VectorXd target = s;
  const VectorXd dscore = 2.0 * (s - target);  // d/ds of (s - t)^2
  const auto grad = net.backward(cache, dscore);
  grad.for_each([&](const std::string& name, ParamGroup, const Eigen::MatrixXd& m) {
    EXPECT_TRUE(m.isZero(0.0)) << name;
  });
}

TEST(Backward, StaleCacheIsRejected) {
  FusionNetwork net(tiny_config());
  ForwardCache cache;
  net.forward(random_batch(2, 1), {Mode::Train, 1}, &cache);
  net.mutable_parameters();
  EXPECT_THROW(net.backward(cache, VectorXd::Ones(2)), std::logic_error);
}

TEST(Parameters, NamesAreUniqueAndCountMatches) {
  const FusionNetwork net(tiny_config());
  std::set<std::string> names;
  std::size_t count = 0;
  net.parameters().for_each([&](const std::string& n, ParamGroup, const Eigen::MatrixXd& m) {
    EXPECT_TRUE(names.insert(n).second) << n;
    count += static_cast<std::size_t>(m.size());
  });
  EXPECT_EQ(count, net.parameters().parameter_count());
  EXPECT_TRUE(names.count("adapters.audio_speaker.lora_up"));
  EXPECT_TRUE(names.count("transformer.layers.0.wq"));
}

}  // namespace
}  // namespace dubscore::fusion
