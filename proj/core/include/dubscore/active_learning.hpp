#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dubscore/data_model.hpp"
#include "dubscore/eval_metrics.hpp"
#include "dubscore/proxy_mos.hpp"

namespace dubscore::al {

enum class Stage { S0 = 0, S1 = 1, S2 = 2 };
inline constexpr int kStageCount = 3;

std::string_view to_string(Stage s);

// Labeled count required after `stage`: ceil(B/3), ceil(2B/3), B.
std::size_t stage_target(std::size_t budget, Stage stage);

// Supplies a human MOS for a clip on request.
class AnnotatorOracle {
 public:
  virtual ~AnnotatorOracle() = default;
  virtual double label(const data::ClipRecord& clip) const = 0;
  virtual std::string name() const = 0;
};

// Replays the manifest's recorded ratings (mean over raters).
class RecordedOracle final : public AnnotatorOracle {
 public:
  double label(const data::ClipRecord& clip) const override;
  std::string name() const override { return "recorded"; }
};

// Averages `n_ratings` draws of clamp(q + N(0, sigma), 1, 5) around the hidden quality.
// Draws are keyed by (seed, clip_id), so a clip always receives the same label.
class SimulatedOracle final : public AnnotatorOracle {
 public:
  SimulatedOracle(data::TrueQualityTable truth, int n_ratings, double sigma, std::uint64_t seed);
  double label(const data::ClipRecord& clip) const override;
  std::string name() const override { return "simulated"; }

 private:
  data::TrueQualityTable truth_;
  int n_ratings_;
  double sigma_;
  std::uint64_t seed_;
};

inline constexpr int kSpeakerHashDim = 8;

// One row per manifest record: z-scored duration | 8-dim speaker hash in [-1,1] |
// background one-hot (labels sorted) | language bit (1 = en-hi).
Eigen::MatrixXd condition_vectors(const data::Manifest& manifest);

struct StageRecord {
  Stage stage = Stage::S0;
  std::size_t labeled = 0;
  std::vector<std::string> queried;  // clip ids added at this stage
  proxy::ProxyWeights weights;
  double achieved_rho = 0.0;       // in-sample, on the labeled pool
  double eval_rho = 0.0;           // on the evaluation set (NaN without one)
  metrics::CalibrationReport calibration;
  bool calibration_on_eval = false;  // false: computed on the labeled pool
};

struct ALState {
  std::vector<std::size_t> labeled;  // manifest rows
  std::vector<double> labels;        // parallel to `labeled`
  std::vector<std::size_t> unlabeled;
  Stage stage = Stage::S0;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  proxy::MetricNormalizer normalizer;
  proxy::ProxyWeights weights;
  proxy::WeightEnsemble ensemble;
  std::vector<StageRecord> history;
};

struct ALOptions {
  int ensemble_size = proxy::kDefaultEnsembleSize;
  int oversample = 3;
  double interval_level = metrics::kDefaultIntervalLevel;
  proxy::LearnOptions learn;
};

// Held-out clips for per-stage rho and calibration diagnostics.
struct EvalSet {
  std::vector<std::size_t> rows;
  std::vector<double> mos;
};

enum class Policy { Active, Random };

// Labels a uniformly random ceil(B/3) subset of `candidates` and fits the weights and
// ensemble. The normalizer is fitted on all candidate objectives.
ALState stage_init(const data::Manifest& manifest, std::span<const std::size_t> candidates,
                   const AnnotatorOracle& oracle, std::size_t budget, std::uint64_t seed,
                   const ALOptions& options = {}, const EvalSet& eval = {});

// Differential entropy of the ensemble predictive distribution per candidate row.
std::vector<double> uncertainty_scores(const ALState& state, const data::Manifest& manifest,
                                       std::span<const std::size_t> rows);

// Rows sorted by descending score; ties by ascending clip_id.
std::vector<std::size_t> rank_by_uncertainty(const data::Manifest& manifest,
                                             std::span<const std::size_t> rows,
                                             std::span<const double> scores);

// Takes the first oversample * batch_size ranked rows, then greedy farthest-point
// selection in condition space seeded by ranked[0]. Ties go to the better-ranked row.
std::vector<std::size_t> diversity_filter(std::span<const std::size_t> ranked,
                                          const Eigen::MatrixXd& conditions,
                                          std::size_t batch_size, int oversample = 3);

// Advances one stage: queries up to the next target with `policy`, labels, refits.
void advance_stage(ALState& state, const data::Manifest& manifest, const AnnotatorOracle& oracle,
                   Policy policy, const Eigen::MatrixXd& conditions, const ALOptions& options,
                   const EvalSet& eval = {});

struct ALResult {
  ALState state;
  // Proxy MOS for every manifest record from the final weights.
  std::vector<double> proxy_labels;
};

ALResult run_loop(const data::Manifest& manifest, std::span<const std::size_t> candidates,
                  const AnnotatorOracle& oracle, std::size_t budget, std::uint64_t seed,
                  Policy policy, const ALOptions& options = {}, const EvalSet& eval = {});

inline ALResult run_al_loop(const data::Manifest& manifest, std::span<const std::size_t> candidates,
                            const AnnotatorOracle& oracle, std::size_t budget, std::uint64_t seed,
                            const ALOptions& options = {}, const EvalSet& eval = {}) {
  return run_loop(manifest, candidates, oracle, budget, seed, Policy::Active, options, eval);
}

inline ALResult random_baseline(const data::Manifest& manifest,
                                std::span<const std::size_t> candidates,
                                const AnnotatorOracle& oracle, std::size_t budget,
                                std::uint64_t seed, const ALOptions& options = {},
                                const EvalSet& eval = {}) {
  return run_loop(manifest, candidates, oracle, budget, seed, Policy::Random, options, eval);
}

std::vector<double> proxy_labels(const data::Manifest& manifest, const proxy::ProxyWeights& weights,
                                 const proxy::MetricNormalizer& normalizer);

}  // namespace dubscore::al
