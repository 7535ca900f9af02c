#include "dubscore/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dubscore/errors.hpp"

namespace dubscore::metrics {

namespace {

void check_paired(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw DataError(std::string(what) + ": series lengths differ (" + std::to_string(a.size()) +
                    " vs " + std::to_string(b.size()) + ")");
  }
  if (a.size() < 2) throw DataError(std::string(what) + ": need at least 2 pairs");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
      throw DataError(std::string(what) + ": non-finite entry at index " + std::to_string(i));
    }
  }
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pearson_unchecked(std::span<const double> x, std::span<const double> y) {
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw NumericError("correlation undefined for a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace

double pcc(std::span<const double> predictions, std::span<const double> targets) {
  check_paired(predictions, targets, "pcc");
  return pearson_unchecked(predictions, targets);
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double srcc(std::span<const double> predictions, std::span<const double> targets) {
  check_paired(predictions, targets, "srcc");
  const auto rp = average_ranks(predictions);
  const auto rt = average_ranks(targets);
  return pearson_unchecked(rp, rt);
}

double mse(std::span<const double> predictions, std::span<const double> targets) {
  check_paired(predictions, targets, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - targets[i];
    s += d * d;
  }
  return s / static_cast<double>(predictions.size());
}

double r2(std::span<const double> predictions, std::span<const double> targets) {
  check_paired(predictions, targets, "r2");
  const double mt = mean_of(targets);
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    sse += (predictions[i] - targets[i]) * (predictions[i] - targets[i]);
    sst += (targets[i] - mt) * (targets[i] - mt);
  }
  if (sst <= 0.0) throw NumericError("r2 undefined for constant targets");
  return 1.0 - sse / sst;
}

// ---------------------------------------------------------------------------
// Rater agreement

RatingMatrix::RatingMatrix(std::size_t raters, std::size_t items)
    : scores_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(raters), static_cast<Eigen::Index>(items))),
      mask_(Eigen::Matrix<unsigned char, Eigen::Dynamic, Eigen::Dynamic>::Zero(
          static_cast<Eigen::Index>(raters), static_cast<Eigen::Index>(items))) {}

RatingMatrix RatingMatrix::complete(const Eigen::MatrixXd& scores) {
  RatingMatrix m(static_cast<std::size_t>(scores.rows()), static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    for (Eigen::Index i = 0; i < scores.cols(); ++i) {
      m.set(static_cast<std::size_t>(r), static_cast<std::size_t>(i), scores(r, i));
    }
  }
  return m;
}

void RatingMatrix::set(std::size_t rater, std::size_t item, double score) {
  if (!std::isfinite(score)) throw DataError("rating matrix: non-finite score");
  scores_(static_cast<Eigen::Index>(rater), static_cast<Eigen::Index>(item)) = score;
  mask_(static_cast<Eigen::Index>(rater), static_cast<Eigen::Index>(item)) = 1;
}

Eigen::MatrixXd RatingMatrix::complete_cases() const {
  std::vector<Eigen::Index> active_raters;
  for (Eigen::Index r = 0; r < scores_.rows(); ++r) {
    if (mask_.row(r).any()) active_raters.push_back(r);
  }
  std::vector<Eigen::Index> kept_items;
  for (Eigen::Index i = 0; i < scores_.cols(); ++i) {
    bool all = !active_raters.empty();
    for (auto r : active_raters) all = all && mask_(r, i) != 0;
    if (all) kept_items.push_back(i);
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(active_raters.size()),
                      static_cast<Eigen::Index>(kept_items.size()));
  for (std::size_t a = 0; a < active_raters.size(); ++a) {
    for (std::size_t b = 0; b < kept_items.size(); ++b) {
      out(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
          scores_(active_raters[a], kept_items[b]);
    }
  }
  return out;
}

double cronbach_alpha(const RatingMatrix& m) {
  const std::size_t k = m.raters();
  if (k < 2 || m.items() < 2) throw DataError("cronbach_alpha: need >= 2 raters and >= 2 items");
  double var_sum = 0.0, cov_sum = 0.0;
  std::size_t var_count = 0, cov_count = 0;
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a; b < k; ++b) {
      std::vector<double> xa, xb;
      for (std::size_t i = 0; i < m.items(); ++i) {
        if (m.present(a, i) && m.present(b, i)) {
          xa.push_back(m.at(a, i));
          xb.push_back(m.at(b, i));
        }
      }
      if (xa.size() < 2) continue;
      const double ma = mean_of(xa), mb = mean_of(xb);
      double c = 0.0;
      for (std::size_t i = 0; i < xa.size(); ++i) c += (xa[i] - ma) * (xb[i] - mb);
      c /= static_cast<double>(xa.size() - 1);
      if (a == b) {
        var_sum += c;
        ++var_count;
      } else {
        cov_sum += c;
        ++cov_count;
      }
    }
  }
  if (var_count < 2 || cov_count == 0) {
    throw DataError("cronbach_alpha: not enough overlapping ratings");
  }
  const double kd = static_cast<double>(var_count);
  const double mean_var = var_sum / kd;
  const double mean_cov = cov_sum / static_cast<double>(cov_count);
  const double denom = mean_var + (kd - 1.0) * mean_cov;
  if (std::abs(denom) <= 1e-300 || mean_var <= 0.0) {
    throw NumericError("cronbach_alpha: zero total variance");
  }
  return kd * mean_cov / denom;
}

MeanSquares mean_squares(const Eigen::MatrixXd& x) {
  const auto k = static_cast<std::size_t>(x.rows());  // raters
  const auto n = static_cast<std::size_t>(x.cols());  // items
  if (k < 2 || n < 2) {
    throw DataError("ICC: need >= 2 raters and >= 2 complete items (got " + std::to_string(k) +
                    " x " + std::to_string(n) + ")");
  }
  const double grand = x.mean();
  const Eigen::VectorXd item_means = x.colwise().mean().transpose();
  const Eigen::VectorXd rater_means = x.rowwise().mean();
  const double kd = static_cast<double>(k), nd = static_cast<double>(n);
  const double ss_total = (x.array() - grand).square().sum();
  const double ss_items = kd * (item_means.array() - grand).square().sum();
  const double ss_raters = nd * (rater_means.array() - grand).square().sum();
  const double ss_within = ss_total - ss_items;
  const double ss_resid = ss_total - ss_items - ss_raters;
  MeanSquares ms;
  ms.items = n;
  ms.raters = k;
  ms.between_items = ss_items / (nd - 1.0);
  ms.within_items = ss_within / (nd * (kd - 1.0));
  ms.between_raters = ss_raters / (kd - 1.0);
  ms.residual = std::max(ss_resid, 0.0) / ((nd - 1.0) * (kd - 1.0));
  return ms;
}

double icc1(const RatingMatrix& m) {
  const auto ms = mean_squares(m.complete_cases());
  const double k = static_cast<double>(ms.raters);
  const double denom = ms.between_items + (k - 1.0) * ms.within_items;
  if (denom <= 0.0) throw NumericError("icc1: degenerate variance decomposition");
  return (ms.between_items - ms.within_items) / denom;
}

double icc2(const RatingMatrix& m) {
  const auto ms = mean_squares(m.complete_cases());
  const double k = static_cast<double>(ms.raters);
  const double n = static_cast<double>(ms.items);
  const double denom = ms.between_items + (k - 1.0) * ms.residual +
                       k * (ms.between_raters - ms.residual) / n;
  if (std::abs(denom) <= 1e-300) throw NumericError("icc2: degenerate variance decomposition");
  return (ms.between_items - ms.residual) / denom;
}

// ---------------------------------------------------------------------------
// Calibration

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw NumericError("normal_quantile: p must be in (0,1)");
  // Acklam's rational approximation followed by one Halley step on erfc.
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

double central_z(double level) {
  if (!(level > 0.0 && level < 1.0)) throw NumericError("interval level must be in (0,1)");
  return normal_quantile(0.5 + 0.5 * level);
}

CalibrationReport calibration_suite(const IntervalSeries& iv, std::span<const double> variances) {
  const std::size_t n = iv.target.size();
  if (n == 0) throw DataError("calibration_suite: empty input");
  if (iv.lower.size() != n || iv.upper.size() != n || variances.size() != n) {
    throw DataError("calibration_suite: inconsistent lengths");
  }
  CalibrationReport rep;
  double covered = 0.0, width = 0.0, var_sum = 0.0;
  double tmin = iv.target[0], tmax = iv.target[0];
  for (std::size_t i = 0; i < n; ++i) {
    if (iv.lower[i] > iv.upper[i]) throw DataError("calibration_suite: lower > upper");
    if (iv.target[i] >= iv.lower[i] && iv.target[i] <= iv.upper[i]) covered += 1.0;
    width += iv.upper[i] - iv.lower[i];
    var_sum += variances[i];
    tmin = std::min(tmin, iv.target[i]);
    tmax = std::max(tmax, iv.target[i]);
  }
  const double nd = static_cast<double>(n);
  rep.apv = var_sum / nd;
  rep.picp = covered / nd;
  const double range = tmax - tmin;
  rep.mpiw = range > 0.0 ? (width / nd) / range : width / nd;

  // ECE treats each interval as the central `level` band of a Gaussian.
  const double z_level = central_z(iv.level);
  double ece = 0.0;
  constexpr int kLevels = 9;
  for (int l = 1; l <= kLevels; ++l) {
    const double q = 0.1 * l;
    const double z = central_z(q);
    double hit = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mean = 0.5 * (iv.lower[i] + iv.upper[i]);
      const double sd = (iv.upper[i] - iv.lower[i]) / (2.0 * z_level);
      if (std::abs(iv.target[i] - mean) <= z * sd) hit += 1.0;
    }
    ece += std::abs(hit / nd - q);
  }
  rep.ece = ece / kLevels;
  return rep;
}

double paired_bootstrap_pvalue(std::span<const double> differences, int resamples,
                               std::uint64_t seed) {
  if (differences.empty()) throw DataError("paired bootstrap: no differences");
  if (resamples < 1) throw ConfigError("paired bootstrap: resamples must be >= 1");
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> pick(0, differences.size() - 1);
  int at_or_below = 0;
  for (int b = 0; b < resamples; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < differences.size(); ++i) s += differences[pick(gen)];
    if (s <= 0.0) ++at_or_below;
  }
  return static_cast<double>(at_or_below) / static_cast<double>(resamples);
}

std::vector<BaselineRow> single_metric_baselines(const data::Manifest& manifest,
                                                 std::span<const std::size_t> rows) {
  if (rows.empty()) throw DataError("single_metric_baselines: no rated clips");
  std::vector<double> mos;
  for (auto r : rows) mos.push_back(manifest.records.at(r).human_mos());
  std::vector<BaselineRow> out;
  for (std::size_t i = 0; i < data::kMetricCount; ++i) {
    std::vector<double> v;
    for (auto r : rows) v.push_back(data::kMetricSigns[i] * manifest.records[r].objective[i]);
    out.push_back(BaselineRow{std::string(data::kMetricNames[i]), pcc(v, mos), srcc(v, mos)});
  }
  return out;
}

RatingMatrix rating_matrix(const data::Manifest& manifest, std::span<const std::size_t> rows) {
  std::size_t slots = 0;
  for (auto r : rows) slots = std::max(slots, manifest.records.at(r).human_ratings.size());
  RatingMatrix m(slots, rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const auto& ratings = manifest.records[rows[j]].human_ratings;
    for (std::size_t k = 0; k < ratings.size(); ++k) m.set(k, j, ratings[k].score);
  }
  return m;
}

}  // namespace dubscore::metrics

