#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dubscore/data_model.hpp"

namespace dubscore::metrics {

// Correlation and error statistics. Inputs must be equal-length with n >= 2 and
// finite; violations throw DataError, undefined statistics throw NumericError.
double pcc(std::span<const double> predictions, std::span<const double> targets);
double srcc(std::span<const double> predictions, std::span<const double> targets);
double mse(std::span<const double> predictions, std::span<const double> targets);
double r2(std::span<const double> predictions, std::span<const double> targets);

// Average ranks (1-based); tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

// Raters x items score matrix with a presence mask.
class RatingMatrix {
 public:
  RatingMatrix(std::size_t raters, std::size_t items);
  // From a complete matrix (rows = raters, columns = items).
  static RatingMatrix complete(const Eigen::MatrixXd& scores);

  void set(std::size_t rater, std::size_t item, double score);
  bool present(std::size_t rater, std::size_t item) const { return mask_(rater, item) != 0; }
  double at(std::size_t rater, std::size_t item) const { return scores_(rater, item); }
  std::size_t raters() const { return static_cast<std::size_t>(scores_.rows()); }
  std::size_t items() const { return static_cast<std::size_t>(scores_.cols()); }

  // Listwise deletion: keeps items scored by every rater that has at least one score.
  Eigen::MatrixXd complete_cases() const;

 private:
  Eigen::MatrixXd scores_;
  Eigen::Matrix<unsigned char, Eigen::Dynamic, Eigen::Dynamic> mask_;
};

// Cronbach's alpha with raters as the scale items and clips as cases,
//   alpha = k * mean_cov / (mean_var + (k - 1) * mean_cov),
// which equals k/(k-1) * (1 - sum(var_i) / var(sum)) on complete data. Variances and
// covariances are computed pairwise over the clips both raters scored.
double cronbach_alpha(const RatingMatrix& m);

// Shrout-Fleiss single-rater ICC(1,1) and ICC(2,1) on the complete-case matrix.
double icc1(const RatingMatrix& m);
double icc2(const RatingMatrix& m);

// Mean squares of the two-way decomposition (items = targets, raters = judges).
struct MeanSquares {
  double between_items = 0.0;   // MSR
  double within_items = 0.0;    // MSW
  double between_raters = 0.0;  // MSC
  double residual = 0.0;        // MSE
  std::size_t items = 0;
  std::size_t raters = 0;
};
MeanSquares mean_squares(const Eigen::MatrixXd& complete_scores);

inline constexpr double kDefaultIntervalLevel = 0.9;

struct IntervalSeries {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<double> target;
  double level = kDefaultIntervalLevel;
};

struct CalibrationReport {
  double apv = 0.0;   // mean predictive variance
  double picp = 0.0;  // fraction of targets inside their interval
  double mpiw = 0.0;  // mean interval width / target range
  double ece = 0.0;   // mean |coverage(q) - q| over q = 0.1..0.9
};

// APV averages `variances`. ECE reads each interval as the central `level` band of
// a Gaussian centred on its midpoint and scores the central bands q = 0.1..0.9.
CalibrationReport calibration_suite(const IntervalSeries& intervals,
                                    std::span<const double> variances);

// Gaussian quantile of the standard normal (inverse CDF).
double normal_quantile(double p);
// z such that P(|Z| <= z) = level.
double central_z(double level);

// One-sided paired bootstrap: p = P*(mean of resampled differences <= 0).
double paired_bootstrap_pvalue(std::span<const double> differences, int resamples,
                               std::uint64_t seed);

struct BaselineRow {
  std::string name;
  double pcc = 0.0;
  double srcc = 0.0;
};

// Correlation of each sign-aligned objective metric alone with human MOS over `rows`
// (rated manifest records), one row per metric in canonical order.
std::vector<BaselineRow> single_metric_baselines(const data::Manifest& manifest,
                                                 std::span<const std::size_t> rows);

// Ratings of `rows` arranged with the rating slot (k-th rating of a clip) as the rater
// axis. Clips with fewer ratings leave trailing slots missing.
RatingMatrix rating_matrix(const data::Manifest& manifest, std::span<const std::size_t> rows);

}  // namespace dubscore::metrics
