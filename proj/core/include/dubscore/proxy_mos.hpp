#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "dubscore/data_model.hpp"

namespace dubscore::proxy {

using data::kMetricCount;
using data::ObjectiveVector;
using MetricArray = std::array<double, kMetricCount>;

// Per-metric z-scoring with sign alignment: after normalization, larger is better for
// every metric (LogF0RMSE is flipped). Statistics are frozen at fit time.
struct MetricNormalizer {
  MetricArray mean{};
  MetricArray stddev{};  // population convention
  std::array<int, kMetricCount> sign = data::kMetricSigns;

  MetricArray normalize(const ObjectiveVector& o) const;
};

MetricNormalizer fit_normalizer(std::span<const ObjectiveVector> pool);

// Simplex weights over the normalized metrics plus an order-preserving affine map
// onto the MOS scale: score = clamp(scale * (w . o~) + offset, 1, 5).
struct ProxyWeights {
  MetricArray w{};
  double scale = 1.0;
  double offset = 3.0;
  double achieved_rho = std::numeric_limits<double>::quiet_NaN();
  // Mean squared in-sample residual of the calibrated score (0 when not fitted).
  double residual_variance = 0.0;

  double raw(const MetricArray& normalized) const;
  double score(const MetricArray& normalized) const;
};

// EW baseline: w = 0.2 each, identity-centered calibration (scale 1, offset 3).
ProxyWeights equal_weights();

double proxy_score(const ProxyWeights& weights, const MetricNormalizer& normalizer,
                   const ObjectiveVector& o);

struct LabeledPool {
  std::vector<ObjectiveVector> objectives;
  std::vector<double> mos;

  std::size_t size() const { return mos.size(); }
};

inline constexpr std::size_t kMinLearnPairs = 10;

struct LearnOptions {
  int restarts = 16;
  double tolerance = 1e-8;  // stop a restart when |delta rho| falls below this
  int max_iterations = 10000;
};

// Maximizes Pearson(sum_i w_i o~_i, MOS) over the probability simplex by multi-start
// projected gradient ascent with Armijo backtracking, then fits (scale, offset) by
// least squares. Requires >= 10 pairs and non-constant MOS.
ProxyWeights learn_weights(const LabeledPool& pool, const MetricNormalizer& normalizer,
                           std::uint64_t seed, const LearnOptions& options = {});

// Least-squares (scale, offset) and residual variance for fixed weights `w`.
// Throws NumericError when the combination is constant or not positively correlated.
ProxyWeights fit_calibration(const LabeledPool& pool, const MetricNormalizer& normalizer,
                             const MetricArray& w);

// Pearson correlation of the weighted normalized metrics with MOS; NaN if the
// combination is constant on the pool.
double weighted_pearson(const LabeledPool& pool, const MetricNormalizer& normalizer,
                        const MetricArray& w);

// Euclidean projection onto {w >= 0, sum w = 1}.
MetricArray project_to_simplex(const MetricArray& v);

inline constexpr int kDefaultEnsembleSize = 50;

struct WeightEnsemble {
  std::vector<ProxyWeights> members;
  // Mean in-sample residual variance over the members; sets the prediction-interval width.
  double residual_variance = 0.0;
};

// K bootstrap resamples of the pool, one learn_weights fit each. Degenerate
// resamples (constant MOS, failed fit) are redrawn a bounded number of times.
WeightEnsemble fit_ensemble(const LabeledPool& pool, const MetricNormalizer& normalizer, int k,
                            std::uint64_t seed, const LearnOptions& options = {});

struct PredictiveDistribution {
  double mean = 0.0;
  double variance = 0.0;  // population variance of member scores
  double lower = 0.0;
  double upper = 0.0;

  // Gaussian differential entropy 0.5 * ln(2 pi e variance); kEntropyFloor at zero variance.
  double entropy() const;
};

inline constexpr double kEntropyFloor = std::numeric_limits<double>::lowest();

// variance is the spread of the member scores (epistemic). The interval is
// mean -/+ z_level * sqrt(ensemble.residual_variance), falling back to the member
// variance when no residual is recorded.
PredictiveDistribution predictive_distribution(const WeightEnsemble& ensemble,
                                               const MetricNormalizer& normalizer,
                                               const ObjectiveVector& o, double level = 0.9);

}  // namespace dubscore::proxy
