#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dubscore/data_model.hpp"
#include "dubscore/errors.hpp"
#include "dubscore/eval_metrics.hpp"

namespace dubscore::metrics {
namespace {

using V = std::vector<double>;

TEST(Correlation, HandFixtures) {
  const V a = {1, 2, 3, 4}, b = {1, 3, 2, 4};
  EXPECT_NEAR(pcc(a, b), 0.8, 1e-12);
  EXPECT_NEAR(srcc(a, b), 1.0 - 6.0 * 2.0 / (4.0 * 15.0), 1e-12);
  EXPECT_NEAR(pcc(a, V{4, 3, 2, 1}), -1.0, 1e-12);
  EXPECT_NEAR(srcc(V{1, 2, 3, 4, 5}, V{1, 4, 9, 16, 100}), 1.0, 1e-12);
}

TEST(Correlation, TiesUseAverageRanks) {
  EXPECT_EQ(average_ranks(V{10, 20, 20, 30}), (V{1, 2.5, 2.5, 4}));
  EXPECT_EQ(average_ranks(V{5, 5, 5}), (V{2, 2, 2}));
  // Rank table written out by hand: x ranks (1, 2.5, 2.5, 4), y ranks (2, 1, 3.5, 3.5).
  const V x = {1, 2, 2, 3}, y = {0.5, 0.1, 0.9, 0.9};
  const V rx = {1, 2.5, 2.5, 4}, ry = {2, 1, 3.5, 3.5};
  double mx = 2.5, my = 2.5, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  EXPECT_NEAR(srcc(x, y), sxy / std::sqrt(sxx * syy), 1e-12);
}

TEST(Correlation, TiedTargetsAgainstRankTable) {
  // y ranks (1, 2.5, 2.5, 4) against x ranks (1, 2, 3, 4).
  const V rx = {1, 2, 3, 4}, ry = {1, 2.5, 2.5, 4};
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (rx[i] - 2.5) * (ry[i] - 2.5);
    sxx += (rx[i] - 2.5) * (rx[i] - 2.5);
    syy += (ry[i] - 2.5) * (ry[i] - 2.5);
  }
  EXPECT_NEAR(srcc(V{1, 2, 3, 4}, V{1, 2, 2, 4}), sxy / std::sqrt(sxx * syy), 1e-12);
}

TEST(Correlation, Errors) {
  EXPECT_THROW(pcc(V{1, 2}, V{1, 2, 3}), DataError);
  EXPECT_THROW(pcc(V{1}, V{1}), DataError);
  EXPECT_THROW(pcc(V{1, NAN}, V{1, 2}), DataError);
  EXPECT_THROW(pcc(V{1, 1, 1}, V{1, 2, 3}), NumericError);
}

TEST(Regression, MseAndR2) {
  EXPECT_DOUBLE_EQ(mse(V{1, 2}, V{2, 4}), 2.5);
  EXPECT_DOUBLE_EQ(r2(V{1, 2}, V{2, 4}), 1.0 - 5.0 / 2.0);
  EXPECT_DOUBLE_EQ(r2(V{2, 4, 7}, V{2, 4, 7}), 1.0);
  EXPECT_DOUBLE_EQ(r2(V{3, 3, 3}, V{2, 3, 4}), 0.0);
  EXPECT_DOUBLE_EQ(mse(V{2, 4, 7}, V{2, 4, 7}), 0.0);
  EXPECT_THROW(r2(V{1, 2}, V{3, 3}), NumericError);
}

// Shrout and Fleiss (1979) six targets by four judges.
Eigen::MatrixXd shrout_fleiss() {
  Eigen::MatrixXd targets_by_judges(6, 4);
  targets_by_judges << 9, 2, 5, 8, 6, 1, 3, 2, 8, 4, 6, 8, 7, 1, 2, 6, 10, 5, 6, 9, 6, 2, 4, 7;
  return targets_by_judges.transpose();  // raters x items
}

TEST(Agreement, ShroutFleissTable) {
  const auto m = RatingMatrix::complete(shrout_fleiss());
  const auto ms = mean_squares(shrout_fleiss());
  // Published two-decimal mean squares.
  EXPECT_NEAR(ms.between_items, 11.24, 0.005);
  EXPECT_NEAR(ms.within_items, 6.26, 0.005);
  EXPECT_NEAR(ms.between_raters, 32.49, 0.005);
  EXPECT_NEAR(ms.residual, 1.02, 0.005);
  // Published coefficients: ICC(1,1) = .17, ICC(2,1) = .29, ICC(3,k) = .91.
  EXPECT_NEAR(icc1(m), 0.17, 0.005);
  EXPECT_NEAR(icc2(m), 0.29, 0.005);
  EXPECT_NEAR(cronbach_alpha(m), 0.91, 0.005);
}

TEST(Agreement, AnovaOracleOnRandomMatrix) {
  std::mt19937_64 g(11);
  std::uniform_real_distribution<double> u(1.0, 5.0);
  const int k = 4, n = 7;
  Eigen::MatrixXd s(k, n);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = u(g);
  const double grand = s.mean();
  double ssr = 0, ssc = 0, sst = 0;
  for (int j = 0; j < n; ++j) ssr += k * std::pow(s.col(j).mean() - grand, 2);
  for (int i = 0; i < k; ++i) ssc += n * std::pow(s.row(i).mean() - grand, 2);
  for (Eigen::Index i = 0; i < s.size(); ++i) sst += std::pow(s.data()[i] - grand, 2);
  const double msr = ssr / (n - 1);
  const double msw = (sst - ssr) / (n * (k - 1));
  const double msc = ssc / (k - 1);
  const double mse_ = (sst - ssr - ssc) / ((n - 1) * (k - 1));
  const auto m = RatingMatrix::complete(s);
  EXPECT_NEAR(icc1(m), (msr - msw) / (msr + (k - 1) * msw), 1e-12);
  EXPECT_NEAR(icc2(m), (msr - mse_) / (msr + (k - 1) * mse_ + k * (msc - mse_) / n), 1e-12);
  // Textbook form: k/(k-1) (1 - sum of rater variances / variance of item totals).
  double sum_var = 0.0;
  for (int i = 0; i < k; ++i) sum_var += (s.row(i).array() - s.row(i).mean()).square().sum() / (n - 1);
  const Eigen::RowVectorXd tot = s.colwise().sum();
  const double var_tot = (tot.array() - tot.mean()).square().sum() / (n - 1);
  EXPECT_NEAR(cronbach_alpha(m), k / (k - 1.0) * (1.0 - sum_var / var_tot), 1e-12);
}

TEST(Agreement, IdenticalRatersGiveOne) {
  Eigen::MatrixXd s(3, 5);
  for (int i = 0; i < 3; ++i) s.row(i) << 1, 2, 4, 3, 5;
  const auto m = RatingMatrix::complete(s);
  EXPECT_NEAR(cronbach_alpha(m), 1.0, 1e-12);
  EXPECT_NEAR(icc1(m), 1.0, 1e-12);
  EXPECT_NEAR(icc2(m), 1.0, 1e-12);
}

TEST(Agreement, IdenticalItemsWithRaterOffsets) {
  // MSR = MSE = 0 and MSW = MSC * (k-1) / k: ICC1 = -1/(k-1), ICC2 = 0.
  Eigen::MatrixXd s(3, 6);
  for (int i = 0; i < 3; ++i) s.row(i).setConstant(2.0 + i);
  const auto m = RatingMatrix::complete(s);
  const auto ms = mean_squares(s);
  EXPECT_NEAR(ms.between_items, 0.0, 1e-12);
  EXPECT_NEAR(ms.residual, 0.0, 1e-12);
  EXPECT_NEAR(ms.between_raters, 6.0, 1e-12);
  EXPECT_NEAR(icc1(m), -0.5, 1e-12);
  EXPECT_NEAR(icc2(m), 0.0, 1e-12);
  EXPECT_LE(icc1(m), icc2(m));
}

TEST(Agreement, ZeroVarianceIsAnError) {
  const auto m = RatingMatrix::complete(Eigen::MatrixXd::Constant(3, 4, 3.0));
  EXPECT_THROW(cronbach_alpha(m), NumericError);
}

TEST(Agreement, IndependentRatersNearZero) {
  std::mt19937_64 g(3);
  std::uniform_int_distribution<int> u(1, 5);
  Eigen::MatrixXd s(10, 500);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = u(g);
  const auto m = RatingMatrix::complete(s);
  EXPECT_LT(std::abs(cronbach_alpha(m)), 0.15);
  EXPECT_LT(std::abs(icc1(m)), 0.05);
  EXPECT_LT(std::abs(icc2(m)), 0.05);
}

TEST(Agreement, RaterOffsetsHurtAbsoluteAgreementOnly) {
  std::mt19937_64 g(4);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd s(5, 200);
  for (int j = 0; j < 200; ++j) {
    const double q = nd(g);
    for (int i = 0; i < 5; ++i) s(i, j) = q + 0.3 * nd(g);
  }
  Eigen::MatrixXd shifted = s;
  for (int i = 0; i < 5; ++i) shifted.row(i).array() += 0.8 * i;
  const auto a = RatingMatrix::complete(s), b = RatingMatrix::complete(shifted);
  EXPECT_NEAR(cronbach_alpha(a), cronbach_alpha(b), 1e-12);
  EXPECT_LT(icc2(b), icc2(a) - 0.2);
  EXPECT_LT(icc1(b), icc1(a) - 0.2);
}

TEST(Agreement, MissingRatingsUsePairwiseAndCompleteCases) {
  RatingMatrix m(3, 4);
  const double v[3][4] = {{1, 2, 3, 4}, {2, 3, 4, 5}, {1, 3, 3, 0}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      if (!(i == 2 && j == 3)) m.set(i, j, v[i][j]);
  EXPECT_FALSE(m.present(2, 3));
  const Eigen::MatrixXd cc = m.complete_cases();
  ASSERT_EQ(cc.cols(), 3);
  EXPECT_EQ(cc(2, 2), 3.0);
  EXPECT_TRUE(std::isfinite(cronbach_alpha(m)));
  EXPECT_NEAR(icc1(m), icc1(RatingMatrix::complete(cc)), 1e-12);
}

TEST(Agreement, RatingSlotsBecomeRaters) {
  data::Manifest man;
  data::ClipRecord a, b;
  a.clip_id = "a";
  b.clip_id = "b";
  a.human_ratings = {{"r1", 3.0, {}}, {"r2", 4.0, {}}, {"r3", 5.0, {}}};
  b.human_ratings = {{"r9", 2.0, {}}, {"r1", 1.0, {}}};
  man.records = {a, b};
  const std::vector<std::size_t> rows = {0, 1};
  const auto m = rating_matrix(man, rows);
  EXPECT_EQ(m.raters(), 3u);
  EXPECT_EQ(m.items(), 2u);
  EXPECT_EQ(m.at(1, 1), 1.0);
  EXPECT_FALSE(m.present(2, 1));
}

TEST(Calibration, HandFixture) {
  IntervalSeries iv;
  for (int i = 0; i < 10; ++i) {
    iv.lower.push_back(i - 0.5);
    iv.upper.push_back(i + 0.5);
    iv.target.push_back(i < 8 ? i + 0.25 : i + 1.0);
  }
  const V var(10, 0.04);
  const auto r = calibration_suite(iv, var);
  EXPECT_DOUBLE_EQ(r.picp, 0.8);
  EXPECT_DOUBLE_EQ(r.apv, 0.04);
  EXPECT_NEAR(r.mpiw, 1.0 / (10.0 - 0.25), 1e-12);
  EXPECT_GE(r.ece, 0.0);
}

TEST(Calibration, ZeroWidthIntervalsAtTargets) {
  IntervalSeries iv{{1, 2, 4}, {1, 2, 4}, {1, 2, 4}, 0.9};
  const auto r = calibration_suite(iv, V{0, 0, 0});
  EXPECT_EQ(r.picp, 1.0);
  EXPECT_EQ(r.mpiw, 0.0);
}

TEST(Calibration, ZeroWidthIntervals) {
  IntervalSeries iv{{1, 2, 3}, {1, 2, 3}, {1, 2.5, 3}, 0.9};
  const auto r = calibration_suite(iv, V{0, 0, 0});
  EXPECT_NEAR(r.picp, 2.0 / 3.0, 1e-12);
  EXPECT_EQ(r.mpiw, 0.0);
  EXPECT_TRUE(std::isfinite(r.ece));
}

TEST(Calibration, GaussianIntervalsAreCalibrated) {
  std::mt19937_64 g(8);
  std::normal_distribution<double> nd(0.0, 1.0);
  IntervalSeries iv;
  iv.level = 0.9;
  V var;
  const double z = central_z(0.9);
  for (int i = 0; i < 10000; ++i) {
    const double mu = 3.0 + 0.5 * nd(g);
    const double sd = 0.1 + 0.4 * std::abs(nd(g));
    iv.lower.push_back(mu - z * sd);
    iv.upper.push_back(mu + z * sd);
    iv.target.push_back(mu + sd * nd(g));
    var.push_back(sd * sd);
  }
  const auto r = calibration_suite(iv, var);
  EXPECT_NEAR(r.picp, 0.9, 0.02);
  EXPECT_LT(r.ece, 0.02);

  // Intervals twice too narrow are over-confident.
  for (std::size_t i = 0; i < iv.target.size(); ++i) {
    const double mid = 0.5 * (iv.lower[i] + iv.upper[i]);
    const double half = 0.25 * (iv.upper[i] - iv.lower[i]);
    iv.lower[i] = mid - half;
    iv.upper[i] = mid + half;
  }
  EXPECT_GT(calibration_suite(iv, var).ece, 0.1);
}

TEST(Calibration, Errors) {
  IntervalSeries iv{{2}, {1}, {1.5}, 0.9};
  EXPECT_THROW(calibration_suite(iv, V{0}), DataError);
  EXPECT_THROW(calibration_suite(IntervalSeries{}, V{}), DataError);
}

TEST(Quantiles, KnownValues) {
  EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-9);
  EXPECT_NEAR(normal_quantile(0.5), 0.0, 1e-12);
  EXPECT_NEAR(normal_quantile(0.01), -2.3263478740408408, 1e-9);
  EXPECT_NEAR(central_z(0.9), 1.6448536269514722, 1e-9);
}

TEST(Bootstrap, PValueBehaviour) {
  EXPECT_EQ(paired_bootstrap_pvalue(V{0.1, 0.2, 0.05}, 1000, 1), 0.0);
  EXPECT_EQ(paired_bootstrap_pvalue(V{-0.1, -0.2}, 1000, 1), 1.0);
  const V sym = {-1, 1, -0.5, 0.5, -2, 2, -0.1, 0.1, -3, 3, -0.7, 0.7};
  EXPECT_NEAR(paired_bootstrap_pvalue(sym, 20000, 2), 0.5, 0.03);
  EXPECT_EQ(paired_bootstrap_pvalue(sym, 500, 9), paired_bootstrap_pvalue(sym, 500, 9));
  EXPECT_THROW(paired_bootstrap_pvalue(V{}, 10, 1), DataError);
  EXPECT_THROW(paired_bootstrap_pvalue(V{1}, 0, 1), ConfigError);
}

TEST(Baselines, OneRowPerMetricSignAligned) {
  data::Manifest man;
  const double mos[5] = {1.5, 2.0, 3.0, 4.0, 4.5};
  for (int i = 0; i < 5; ++i) {
    data::ClipRecord r;
    r.clip_id = "c" + std::to_string(i);
    r.human_ratings = {{"x", mos[i], {}}};
    r.objective.values = {0.0, mos[i] * mos[i], -mos[i], std::sin(i), 1.0 * (i % 2)};
    man.records.push_back(r);
  }
  const std::vector<std::size_t> rows = {0, 1, 2, 3, 4};
  // peavs is constant here, so its correlation is undefined.
  EXPECT_THROW(single_metric_baselines(man, rows), NumericError);
  for (auto& rec : man.records) rec.objective.values[0] = rec.human_mos() + 0.01 * rec.clip_id.back();
  const auto rowsout = single_metric_baselines(man, rows);
  ASSERT_EQ(rowsout.size(), data::kMetricCount);
  EXPECT_EQ(rowsout[2].name, "logf0rmse");
  EXPECT_NEAR(rowsout[2].pcc, 1.0, 1e-12);  // sign flip makes -mos perfectly aligned
  EXPECT_NEAR(rowsout[1].srcc, 1.0, 1e-12);
  EXPECT_LT(rowsout[1].pcc, 1.0);
  EXPECT_NEAR(rowsout[0].srcc, 1.0, 1e-12);
}

TEST(Baselines, MetricDrivingQualityDominates) {
  data::SyntheticSpec s;
  s.n_clips = 400;
  s.rated_fraction = 1.0;
  s.true_metric_weights = {0, 1, 0, 0, 0};
  s.hidden_quality_weight = 0.0;
  const auto ds = data::generate_synthetic(s);
  std::vector<std::size_t> rows(400);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const auto b = single_metric_baselines(ds.manifest, rows);
  for (std::size_t k = 0; k < b.size(); ++k) {
    if (k != 1) EXPECT_GT(b[1].pcc, b[k].pcc) << b[k].name;
  }
}

}  // namespace
}  // namespace dubscore::metrics
