#include "dubscore/proxy_mos.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <tuple>

#include "dubscore/errors.hpp"
#include "dubscore/eval_metrics.hpp"
#include "dubscore/random.hpp"

namespace dubscore::proxy {

using Vec5 = Eigen::Matrix<double, kMetricCount, 1>;
using Mat5 = Eigen::Matrix<double, kMetricCount, kMetricCount>;

MetricArray MetricNormalizer::normalize(const ObjectiveVector& o) const {
  MetricArray out;
  for (std::size_t i = 0; i < kMetricCount; ++i) {
    if (!std::isfinite(o[i])) {
      throw DataError("non-finite metric: " + std::string(data::kMetricNames[i]));
    }
    out[i] = sign[i] * (o[i] - mean[i]) / stddev[i];
  }
  return out;
}

MetricNormalizer fit_normalizer(std::span<const ObjectiveVector> pool) {
  if (pool.size() < 2) throw DataError("fit_normalizer: pool needs at least 2 clips");
  MetricNormalizer nz;
  const double n = static_cast<double>(pool.size());
  for (std::size_t i = 0; i < kMetricCount; ++i) {
    double m = 0.0;
    for (const auto& o : pool) {
      if (!std::isfinite(o[i])) {
        throw DataError("non-finite metric: " + std::string(data::kMetricNames[i]));
      }
      m += o[i];
    }
    m /= n;
    double v = 0.0;
    for (const auto& o : pool) v += (o[i] - m) * (o[i] - m);
    v /= n;
    if (!(v > 0.0)) throw NumericError("zero variance: " + std::string(data::kMetricNames[i]));
    nz.mean[i] = m;
    nz.stddev[i] = std::sqrt(v);
  }
  return nz;
}

double ProxyWeights::raw(const MetricArray& normalized) const {
  double s = 0.0;
  for (std::size_t i = 0; i < kMetricCount; ++i) s += w[i] * normalized[i];
  return s;
}

double ProxyWeights::score(const MetricArray& normalized) const {
  return std::clamp(scale * raw(normalized) + offset, 1.0, 5.0);
}

ProxyWeights equal_weights() {
  ProxyWeights p;
  p.w.fill(1.0 / static_cast<double>(kMetricCount));
  p.scale = 1.0;
  p.offset = 3.0;
  return p;
}

double proxy_score(const ProxyWeights& weights, const MetricNormalizer& normalizer,
                   const ObjectiveVector& o) {
  return weights.score(normalizer.normalize(o));
}

MetricArray project_to_simplex(const MetricArray& v) {
  MetricArray u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, threshold = 0.0;
  for (std::size_t i = 0; i < kMetricCount; ++i) {
    cumsum += u[i];
    const double t = (cumsum - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) threshold = t;
  }
  MetricArray out;
  for (std::size_t i = 0; i < kMetricCount; ++i) out[i] = std::max(0.0, v[i] - threshold);
  return out;
}

namespace {

// Centered second moments of the normalized pool; Pearson for any w follows from these.
struct PoolMoments {
  Eigen::Matrix<double, Eigen::Dynamic, kMetricCount> x;  // normalized, uncentered
  Eigen::VectorXd y;
  Mat5 gram;       // Xc' Xc
  Vec5 cross;      // Xc' yc
  double y_norm = 0;  // ||yc||
};

PoolMoments moments(const LabeledPool& pool, const MetricNormalizer& nz) {
  PoolMoments pm;
  const auto n = static_cast<Eigen::Index>(pool.size());
  pm.x.resize(n, kMetricCount);
  pm.y.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto o = nz.normalize(pool.objectives[static_cast<std::size_t>(r)]);
    for (std::size_t i = 0; i < kMetricCount; ++i) pm.x(r, static_cast<Eigen::Index>(i)) = o[i];
    pm.y(r) = pool.mos[static_cast<std::size_t>(r)];
  }
  const Eigen::RowVectorXd xm = pm.x.colwise().mean();
  const Eigen::MatrixXd xc = pm.x.rowwise() - xm;
  const Eigen::VectorXd yc = pm.y.array() - pm.y.mean();
  pm.gram = xc.transpose() * xc;
  pm.cross = xc.transpose() * yc;
  pm.y_norm = yc.norm();
  return pm;
}

double pearson_from_moments(const PoolMoments& pm, const Vec5& w) {
  const double s2 = w.dot(pm.gram * w);
  if (!(s2 > 1e-300) || !(pm.y_norm > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return pm.cross.dot(w) / (std::sqrt(s2) * pm.y_norm);
}

Vec5 to_vec(const MetricArray& a) { return Eigen::Map<const Vec5>(a.data()); }
MetricArray to_array(const Vec5& v) {
  MetricArray a;
  for (std::size_t i = 0; i < kMetricCount; ++i) a[i] = v(static_cast<Eigen::Index>(i));
  return a;
}

// One projected-gradient ascent run from `start`. Returns (w, rho).
std::pair<Vec5, double> ascend(const PoolMoments& pm, Vec5 w, const LearnOptions& opt) {
  double rho = pearson_from_moments(pm, w);
  if (!std::isfinite(rho)) return {w, rho};
  double step = 1.0;
  constexpr double kArmijo = 1e-4;
  for (int it = 0; it < opt.max_iterations; ++it) {
    const double s2 = w.dot(pm.gram * w);
    const Vec5 grad = pm.cross / (std::sqrt(s2) * pm.y_norm) - rho * (pm.gram * w) / s2;
    Vec5 next;
    double next_rho = 0.0;
    bool accepted = false;
    while (step >= 1e-12) {
      next = to_vec(project_to_simplex(to_array(w + step * grad)));
      next_rho = pearson_from_moments(pm, next);
      if (std::isfinite(next_rho) && next_rho >= rho + kArmijo * grad.dot(next - w)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const double delta = next_rho - rho;
    w = next;
    rho = next_rho;
    step = std::min(step * 2.0, 1e3);
    if (std::abs(delta) < opt.tolerance) break;
  }
  return {w, rho};
}

// On the face spanned by the support of `w`, the Pearson maximizer is the least-squares
// direction gram_SS^-1 cross_S. Coordinates that come out non-positive are dropped and
// the solve repeated; the result replaces `w` only if it correlates at least as well.
std::pair<Vec5, double> polish(const PoolMoments& pm, const Vec5& w, double rho) {
  std::vector<Eigen::Index> support;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (w(i) > 1e-9) support.push_back(i);
  }
  while (!support.empty()) {
    const auto k = static_cast<Eigen::Index>(support.size());
    Eigen::MatrixXd g(k, k);
    Eigen::VectorXd c(k);
    for (Eigen::Index a = 0; a < k; ++a) {
      c(a) = pm.cross(support[a]);
      for (Eigen::Index b = 0; b < k; ++b) g(a, b) = pm.gram(support[a], support[b]);
    }
    const Eigen::VectorXd v = g.completeOrthogonalDecomposition().solve(c);
    if (!v.allFinite()) break;
    if ((v.array() > 0.0).all()) {
      Vec5 out = Vec5::Zero();
      for (Eigen::Index a = 0; a < k; ++a) out(support[a]) = v(a) / v.sum();
      const double out_rho = pearson_from_moments(pm, out);
      if (std::isfinite(out_rho) && out_rho >= rho - 1e-12) return {out, out_rho};
      break;
    }
    std::vector<Eigen::Index> kept;
    for (Eigen::Index a = 0; a < k; ++a) {
      if (v(a) > 0.0) kept.push_back(support[a]);
    }
    support = std::move(kept);
  }
  return {w, rho};
}

}  // namespace

double weighted_pearson(const LabeledPool& pool, const MetricNormalizer& normalizer,
                        const MetricArray& w) {
  return pearson_from_moments(moments(pool, normalizer), to_vec(w));
}

ProxyWeights learn_weights(const LabeledPool& pool, const MetricNormalizer& normalizer,
                           std::uint64_t seed, const LearnOptions& options) {
  if (pool.objectives.size() != pool.mos.size()) {
    throw DataError("learn_weights: objectives and MOS lengths differ");
  }
  if (pool.size() < kMinLearnPairs) {
    throw DataError("learn_weights: need at least 10 labeled clips, got " +
                    std::to_string(pool.size()));
  }
  const auto pm = moments(pool, normalizer);
  if (!(pm.y_norm > 0.0)) throw NumericError("learn_weights: constant MOS");

  // Starts: barycenter, the five vertices, then Dirichlet(1) draws.
  std::vector<Vec5> starts;
  starts.push_back(Vec5::Constant(1.0 / kMetricCount));
  for (std::size_t i = 0; i < kMetricCount && static_cast<int>(starts.size()) < options.restarts; ++i) {
    starts.push_back(Vec5::Unit(static_cast<Eigen::Index>(i)));
  }
  std::mt19937_64 gen(seed);
  std::exponential_distribution<double> expo(1.0);
  while (static_cast<int>(starts.size()) < options.restarts) {
    Vec5 d;
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = expo(gen);
    starts.push_back(d / d.sum());
  }

  Vec5 best_w = Vec5::Zero();
  double best_rho = -std::numeric_limits<double>::infinity();
  for (const auto& s : starts) {
    auto [w, rho] = ascend(pm, s, options);
    if (std::isfinite(rho) && rho > best_rho) {
      best_rho = rho;
      best_w = w;
    }
  }
  if (!std::isfinite(best_rho)) {
    throw NumericError("learn_weights: optimization failed from every restart");
  }
  std::tie(best_w, best_rho) = polish(pm, best_w, best_rho);

  ProxyWeights out = fit_calibration(pool, normalizer, to_array(best_w));
  out.achieved_rho = best_rho;
  return out;
}

ProxyWeights fit_calibration(const LabeledPool& pool, const MetricNormalizer& normalizer,
                             const MetricArray& w) {
  if (pool.objectives.size() != pool.mos.size() || pool.size() < 2) {
    throw DataError("fit_calibration: need at least 2 paired clips");
  }
  const auto pm = moments(pool, normalizer);
  const Vec5 wv = to_vec(w);
  ProxyWeights out;
  out.w = w;
  out.achieved_rho = pearson_from_moments(pm, wv);
  const Eigen::VectorXd raw = pm.x * wv;
  const double rm = raw.mean();
  const double ym = pm.y.mean();
  const double var = (raw.array() - rm).square().sum();
  const double cov = ((raw.array() - rm) * (pm.y.array() - ym)).sum();
  if (!(var > 0.0) || !(cov > 0.0)) {
    throw NumericError("learn_weights: no positively correlated metric combination");
  }
  out.scale = cov / var;
  out.offset = ym - out.scale * rm;
  double sse = 0.0;
  for (Eigen::Index r = 0; r < raw.size(); ++r) {
    const double pred = std::clamp(out.scale * raw(r) + out.offset, 1.0, 5.0);
    sse += (pm.y(r) - pred) * (pm.y(r) - pred);
  }
  out.residual_variance = sse / static_cast<double>(raw.size());
  return out;
}

WeightEnsemble fit_ensemble(const LabeledPool& pool, const MetricNormalizer& normalizer, int k,
                            std::uint64_t seed, const LearnOptions& options) {
  if (pool.size() < kMinLearnPairs) {
    throw DataError("fit_ensemble: need at least 10 labeled clips, got " +
                    std::to_string(pool.size()));
  }
  if (k < 1) throw ConfigError("fit_ensemble: ensemble size must be >= 1");
  constexpr int kMaxRedraws = 50;
  WeightEnsemble ens;
  ens.members.reserve(static_cast<std::size_t>(k));
  for (int m = 0; m < k; ++m) {
    std::mt19937_64 gen(mix_seed(seed, static_cast<std::uint64_t>(m) + 1));
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    bool done = false;
    for (int attempt = 0; attempt <= kMaxRedraws && !done; ++attempt) {
      LabeledPool resample;
      resample.objectives.reserve(pool.size());
      resample.mos.reserve(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto j = pick(gen);
        resample.objectives.push_back(pool.objectives[j]);
        resample.mos.push_back(pool.mos[j]);
      }
      try {
        ens.members.push_back(learn_weights(resample, normalizer, gen(), options));
        done = true;
      } catch (const NumericError&) {
        // degenerate resample; redraw
      }
    }
    if (!done) throw NumericError("fit_ensemble: could not draw a non-degenerate resample");
  }
  double residual = 0.0;
  for (const auto& m : ens.members) residual += m.residual_variance;
  ens.residual_variance = residual / static_cast<double>(ens.members.size());
  return ens;
}

double PredictiveDistribution::entropy() const {
  if (!(variance > 0.0)) return kEntropyFloor;
  return 0.5 * std::log(2.0 * M_PI * M_E * variance);
}

PredictiveDistribution predictive_distribution(const WeightEnsemble& ensemble,
                                               const MetricNormalizer& normalizer,
                                               const ObjectiveVector& o, double level) {
  if (ensemble.members.empty()) throw ConfigError("predictive_distribution: empty ensemble");
  const auto normalized = normalizer.normalize(o);
  double sum = 0.0;
  std::vector<double> scores;
  scores.reserve(ensemble.members.size());
  for (const auto& m : ensemble.members) {
    scores.push_back(m.score(normalized));
    sum += scores.back();
  }
  const double n = static_cast<double>(scores.size());
  PredictiveDistribution d;
  d.mean = sum / n;
  double v = 0.0;
  for (double s : scores) v += (s - d.mean) * (s - d.mean);
  d.variance = v / n;
  const double spread = ensemble.residual_variance > 0.0 ? ensemble.residual_variance : d.variance;
  const double half = metrics::central_z(level) * std::sqrt(spread);
  d.lower = d.mean - half;
  d.upper = d.mean + half;
  return d;
}

}  // namespace dubscore::proxy
