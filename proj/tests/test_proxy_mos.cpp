#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dubscore/errors.hpp"
#include "dubscore/eval_metrics.hpp"
#include "dubscore/proxy_mos.hpp"

namespace dubscore::proxy {
namespace {

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

struct GridResult {
  MetricArray w{};
  double rho = -2.0;
};

// Exhaustive search over the simplex lattice with step 1/20.
GridResult grid_oracle(const std::vector<MetricArray>& z, const std::vector<double>& mos) {
  GridResult best;
  constexpr int steps = 20;
  std::vector<double> combo(z.size());
  for (int a = 0; a <= steps; ++a)
    for (int b = 0; a + b <= steps; ++b)
      for (int c = 0; a + b + c <= steps; ++c)
        for (int d = 0; a + b + c + d <= steps; ++d) {
          const MetricArray w = {a / 20.0, b / 20.0, c / 20.0, d / 20.0,
                                 (steps - a - b - c - d) / 20.0};
          for (std::size_t i = 0; i < z.size(); ++i) {
            combo[i] = 0.0;
            for (std::size_t k = 0; k < kMetricCount; ++k) combo[i] += w[k] * z[i][k];
          }
          const double r = pearson(combo, mos);
          if (r > best.rho) best = {w, r};
        }
  return best;
}

struct Pool {
  LabeledPool pool;
  MetricNormalizer norm;
  std::vector<MetricArray> z;
};

// Independent raw metrics; MOS is a noisy combination of their normalized values.
Pool synthetic_pool(std::size_t n, const MetricArray& w, double sigma, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Pool p;
  for (std::size_t i = 0; i < n; ++i) {
    ObjectiveVector o;
    o[0] = 3.0 + 0.8 * nd(g);
    o[1] = 0.5 + 0.2 * nd(g);
    o[2] = 0.3 + 0.05 * nd(g);
    o[3] = 3.0 + 0.6 * nd(g);
    o[4] = 0.8 + 0.1 * nd(g);
    p.pool.objectives.push_back(o);
  }
  p.norm = fit_normalizer(p.pool.objectives);
  for (const auto& o : p.pool.objectives) {
    const auto z = p.norm.normalize(o);
    p.z.push_back(z);
    double y = 3.0;
    for (std::size_t k = 0; k < kMetricCount; ++k) y += 0.5 * w[k] * z[k];
    p.pool.mos.push_back(y + sigma * nd(g));
  }
  return p;
}

ObjectiveVector obj(double a, double b, double c, double d, double e) {
  ObjectiveVector o;
  o[0] = a;
  o[1] = b;
  o[2] = c;
  o[3] = d;
  o[4] = e;
  return o;
}

TEST(Normalizer, TwoPointZScoreAndSignFlip) {
  const std::vector<ObjectiveVector> pool = {obj(1, 0, 0.1, 3, 0), obj(2, 1, 0.3, 5, 1)};
  const auto n = fit_normalizer(pool);
  const auto lo = n.normalize(pool[0]), hi = n.normalize(pool[1]);
  EXPECT_DOUBLE_EQ(lo[3], -1.0);  // population std of (3,5) is 1
  EXPECT_DOUBLE_EQ(hi[3], 1.0);
  EXPECT_GT(lo[2], hi[2]);  // lower LogF0RMSE is better
  EXPECT_DOUBLE_EQ(lo[2], 1.0);
  // Stored statistics are reused at inference.
  EXPECT_DOUBLE_EQ(n.normalize(obj(1.5, 0.5, 0.2, 7, 0.5))[3], 3.0);
}

TEST(Normalizer, ConstantColumnIsNamed) {
  const std::vector<ObjectiveVector> pool = {obj(1, 0, 0.1, 3, 0), obj(1, 1, 0.3, 5, 1)};
  try {
    fit_normalizer(pool);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(std::string(e.what()), "zero variance: peavs");
  }
  EXPECT_THROW(fit_normalizer(std::vector<ObjectiveVector>{obj(1, 2, 3, 4, 5)}), DataError);
}

TEST(ProxyScore, DotProductAndClamp) {
  auto p = equal_weights();
  for (double w : p.w) EXPECT_DOUBLE_EQ(w, 0.2);
  const MetricArray z = {1, -1, 0, 2, -2};
  EXPECT_DOUBLE_EQ(p.raw(z), 0.0);
  EXPECT_DOUBLE_EQ(p.score(z), 3.0);
  p.scale = 10.0;
  EXPECT_DOUBLE_EQ(p.score({1, 1, 1, 1, 1}), 5.0);
  EXPECT_DOUBLE_EQ(p.score({-1, -1, -1, -1, -1}), 1.0);
}

TEST(ProxyScore, OneHotUtmosPreservesRawRanking) {
  const auto p = synthetic_pool(50, {0, 0, 0, 1, 0}, 0.1, 3);
  ProxyWeights w;
  w.w = {0, 0, 0, 1, 0};
  w.scale = 0.1;  // keeps every score inside (1,5)
  std::vector<double> raw, score;
  for (const auto& o : p.pool.objectives) {
    raw.push_back(o[3]);
    score.push_back(proxy_score(w, p.norm, o));
  }
  EXPECT_DOUBLE_EQ(metrics::srcc(raw, score), 1.0);
  ObjectiveVector bad = p.pool.objectives[0];
  bad[1] = std::nan("");
  EXPECT_THROW(proxy_score(w, p.norm, bad), DataError);
}

TEST(LearnWeights, PerfectSinglePredictor) {
  auto p = synthetic_pool(60, {0, 0, 1, 0, 0}, 0.0, 5);
  for (std::size_t i = 0; i < p.z.size(); ++i) p.pool.mos[i] = p.z[i][2];
  const auto w = learn_weights(p.pool, p.norm, 1);
  EXPECT_NEAR(w.w[2], 1.0, 1e-6);
  EXPECT_NEAR(w.achieved_rho, 1.0, 1e-6);
}

TEST(LearnWeights, RecoversTruthAndMatchesGridOracle) {
  const MetricArray truth = {0.7, 0, 0, 0.3, 0};
  const auto p = synthetic_pool(200, truth, 0.05, 11);
  const auto w = learn_weights(p.pool, p.norm, 2);
  double linf = 0.0;
  for (std::size_t k = 0; k < kMetricCount; ++k) linf = std::max(linf, std::abs(w.w[k] - truth[k]));
  EXPECT_LE(linf, 0.1);
  const auto grid = grid_oracle(p.z, p.pool.mos);
  EXPECT_GE(w.achieved_rho, grid.rho - 1e-3);
  EXPECT_NEAR(w.achieved_rho, weighted_pearson(p.pool, p.norm, w.w), 1e-12);
}

TEST(LearnWeights, PropertiesOnRandomPools) {
  std::mt19937_64 g(31);
  for (int trial = 0; trial < 8; ++trial) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    MetricArray truth;
    for (double& v : truth) v = u(g) < 0.5 ? 0.0 : u(g);
    truth[trial % 5] += 0.2;
    const double s = std::accumulate(truth.begin(), truth.end(), 0.0);
    for (double& v : truth) v /= s;
    const auto p = synthetic_pool(40 + 20 * static_cast<std::size_t>(trial), truth, 0.3, g());
    const auto w = learn_weights(p.pool, p.norm, g());
    double sum = 0.0;
    for (double v : w.w) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_GE(w.achieved_rho, weighted_pearson(p.pool, p.norm, equal_weights().w) - 1e-12);
    EXPECT_GE(w.achieved_rho, grid_oracle(p.z, p.pool.mos).rho - 1e-3);
    EXPECT_GT(w.scale, 0.0);
  }
}

TEST(LearnWeights, AffineLabelInvariance) {
  auto p = synthetic_pool(80, {0.2, 0.3, 0.1, 0.4, 0.0}, 0.2, 8);
  const auto a = learn_weights(p.pool, p.norm, 4);
  for (double& y : p.pool.mos) y = 2.0 * y + 1.0;
  const auto b = learn_weights(p.pool, p.norm, 4);
  for (std::size_t k = 0; k < kMetricCount; ++k) EXPECT_NEAR(a.w[k], b.w[k], 1e-6);
  EXPECT_NEAR(a.achieved_rho, b.achieved_rho, 1e-9);
}

TEST(LearnWeights, ProxyInvariantToAffineRawRescalingWithRefit) {
  auto p = synthetic_pool(60, {0.5, 0.0, 0.2, 0.3, 0.0}, 0.1, 13);
  const auto w = learn_weights(p.pool, p.norm, 1);
  std::vector<double> before;
  for (const auto& o : p.pool.objectives) before.push_back(proxy_score(w, p.norm, o));
  auto scaled = p.pool.objectives;
  for (auto& o : scaled) o[0] = 7.0 * o[0] - 2.0;
  const auto refit = fit_normalizer(scaled);
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    EXPECT_NEAR(proxy_score(w, refit, scaled[i]), before[i], 1e-12);
  }
}

TEST(LearnWeights, Errors) {
  auto p = synthetic_pool(9, {0.2, 0.2, 0.2, 0.2, 0.2}, 0.1, 1);
  EXPECT_THROW(learn_weights(p.pool, p.norm, 1), DataError);
  p = synthetic_pool(20, {0.2, 0.2, 0.2, 0.2, 0.2}, 0.1, 1);
  std::fill(p.pool.mos.begin(), p.pool.mos.end(), 3.0);
  EXPECT_THROW(learn_weights(p.pool, p.norm, 1), NumericError);
}

TEST(Simplex, ProjectionOracle) {
  const auto a = project_to_simplex({0.2, 0.2, 0.2, 0.2, 0.2});
  for (double v : a) EXPECT_DOUBLE_EQ(v, 0.2);
  const auto b = project_to_simplex({2, 0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(b[0], 1.0);
  // (1, 1, 0, 0, 0) + c with c = -0.5 in the active set {0, 1}.
  const auto c = project_to_simplex({1, 1, 0, 0, 0});
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  EXPECT_DOUBLE_EQ(c[1], 0.5);
  EXPECT_DOUBLE_EQ(c[2], 0.0);
}

TEST(Ensemble, NoiselessPoolHasNoSpread) {
  const auto p = synthetic_pool(40, {0.6, 0, 0, 0.4, 0}, 0.0, 2);
  const auto e = fit_ensemble(p.pool, p.norm, 10, 3);
  ASSERT_EQ(e.members.size(), 10u);
  for (const auto& m : e.members) {
    for (std::size_t k = 0; k < kMetricCount; ++k) EXPECT_NEAR(m.w[k], e.members[0].w[k], 1e-6);
  }
  for (const auto& o : p.pool.objectives) {
    const auto d = predictive_distribution(e, p.norm, o);
    EXPECT_NEAR(d.variance, 0.0, 1e-10);
    EXPECT_NEAR(d.upper - d.lower, 0.0, 1e-4);
  }
}

TEST(Ensemble, DeterministicAndSane) {
  const auto p = synthetic_pool(60, {0.3, 0.3, 0.0, 0.4, 0.0}, 0.4, 4);
  const auto a = fit_ensemble(p.pool, p.norm, 12, 9);
  const auto b = fit_ensemble(p.pool, p.norm, 12, 9);
  double mean_rho = 0.0;
  for (std::size_t i = 0; i < a.members.size(); ++i) {
    EXPECT_EQ(a.members[i].w, b.members[i].w);
    double s = 0.0;
    for (double v : a.members[i].w) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    mean_rho += weighted_pearson(p.pool, p.norm, a.members[i].w) / 12.0;
  }
  const auto full = learn_weights(p.pool, p.norm, 9);
  EXPECT_LE(mean_rho, full.achieved_rho + 0.05);
  EXPECT_EQ(kDefaultEnsembleSize, 50);
}

TEST(Predictive, TwoPointMomentsAndEntropyOrder) {
  WeightEnsemble e;
  ProxyWeights lo = equal_weights(), hi = equal_weights();
  lo.scale = hi.scale = 0.0;
  lo.offset = 2.0;
  hi.offset = 4.0;
  e.members = {lo, hi};
  MetricNormalizer n;
  n.stddev.fill(1.0);
  const auto d = predictive_distribution(e, n, obj(0, 0, 0, 0, 0), 0.9);
  EXPECT_DOUBLE_EQ(d.mean, 3.0);
  EXPECT_DOUBLE_EQ(d.variance, 1.0);
  const double z = metrics::central_z(0.9);
  EXPECT_NEAR(d.lower, 3.0 - z, 1e-12);
  EXPECT_NEAR(d.upper, 3.0 + z, 1e-12);

  e.members = {lo, lo};
  const auto flat = predictive_distribution(e, n, obj(0, 0, 0, 0, 0));
  EXPECT_EQ(flat.variance, 0.0);
  EXPECT_EQ(flat.lower, flat.upper);
  EXPECT_EQ(flat.entropy(), kEntropyFloor);

  const double vars[] = {0.4, 0.1, 0.25};
  std::vector<std::size_t> by_var = {0, 1, 2}, by_ent = {0, 1, 2};
  auto ent = [&](std::size_t i) { return PredictiveDistribution{0, vars[i], 0, 0}.entropy(); };
  std::sort(by_var.begin(), by_var.end(), [&](auto a, auto b) { return vars[a] > vars[b]; });
  std::sort(by_ent.begin(), by_ent.end(), [&](auto a, auto b) { return ent(a) > ent(b); });
  EXPECT_EQ(by_var, by_ent);
  EXPECT_NEAR(ent(1), 0.5 * std::log(2 * M_PI * std::exp(1.0) * 0.1), 1e-12);
}

}  // namespace
}  // namespace dubscore::proxy
