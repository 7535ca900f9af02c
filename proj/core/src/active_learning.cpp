#include "dubscore/active_learning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "dubscore/errors.hpp"
#include "dubscore/random.hpp"

namespace dubscore::al {

using Eigen::Index;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::S0: return "S0";
    case Stage::S1: return "S1";
    case Stage::S2: return "S2";
  }
  return "?";
}

std::size_t stage_target(std::size_t budget, Stage stage) {
  const auto k = static_cast<std::size_t>(stage) + 1;
  return (budget * k + 2) / 3;
}

double RecordedOracle::label(const data::ClipRecord& clip) const { return clip.human_mos(); }

SimulatedOracle::SimulatedOracle(data::TrueQualityTable truth, int n_ratings, double sigma,
                                 std::uint64_t seed)
    : truth_(std::move(truth)), n_ratings_(n_ratings), sigma_(sigma), seed_(seed) {
  if (n_ratings_ < 1) throw ConfigError("simulated oracle: n_ratings must be >= 1");
  if (!(sigma_ >= 0.0)) throw ConfigError("simulated oracle: sigma must be >= 0");
}

double SimulatedOracle::label(const data::ClipRecord& clip) const {
  const double q = truth_.at(clip.clip_id);
  std::mt19937_64 gen(mix_seed(seed_, fnv1a(clip.clip_id)));
  std::normal_distribution<double> noise(0.0, 1.0);
  double sum = 0.0;
  for (int i = 0; i < n_ratings_; ++i) sum += std::clamp(q + sigma_ * noise(gen), 1.0, 5.0);
  return sum / n_ratings_;
}

Eigen::MatrixXd condition_vectors(const data::Manifest& manifest) {
  const auto n = manifest.size();
  std::set<std::string> labels;
  double mean = 0.0;
  for (const auto& r : manifest.records) {
    labels.insert(r.background_label);
    mean += r.duration_s;
  }
  mean /= std::max<std::size_t>(n, 1);
  double var = 0.0;
  for (const auto& r : manifest.records) var += (r.duration_s - mean) * (r.duration_s - mean);
  const double sd = n > 0 ? std::sqrt(var / static_cast<double>(n)) : 0.0;
  const std::vector<std::string> bg(labels.begin(), labels.end());

  const Index dim = 1 + kSpeakerHashDim + static_cast<Index>(bg.size()) + 1;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Index>(n), dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = manifest.records[i];
    const auto row = static_cast<Index>(i);
    out(row, 0) = sd > 0.0 ? (r.duration_s - mean) / sd : 0.0;
    const std::uint64_t h = fnv1a(r.speaker_id);
    for (int k = 0; k < kSpeakerHashDim; ++k) {
      out(row, 1 + k) = 2.0 * counter_uniform(h, static_cast<std::uint64_t>(k)) - 1.0;
    }
    const auto it = std::lower_bound(bg.begin(), bg.end(), r.background_label);
    out(row, 1 + kSpeakerHashDim + (it - bg.begin())) = 1.0;
    out(row, dim - 1) = r.language_direction == data::LanguageDirection::EnToHi ? 1.0 : 0.0;
  }
  return out;
}

std::vector<double> proxy_labels(const data::Manifest& manifest, const proxy::ProxyWeights& weights,
                                 const proxy::MetricNormalizer& normalizer) {
  std::vector<double> out;
  out.reserve(manifest.size());
  for (const auto& r : manifest.records) out.push_back(proxy::proxy_score(weights, normalizer, r.objective));
  return out;
}

namespace {

// Orders the labeled pool by clip id so fits do not depend on acquisition order.
void sort_labeled(ALState& st, const data::Manifest& manifest) {
  std::vector<std::size_t> idx(st.labeled.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return manifest.records[st.labeled[a]].clip_id < manifest.records[st.labeled[b]].clip_id;
  });
  std::vector<std::size_t> rows;
  std::vector<double> labels;
  for (auto i : idx) {
    rows.push_back(st.labeled[i]);
    labels.push_back(st.labels[i]);
  }
  st.labeled = std::move(rows);
  st.labels = std::move(labels);
}

void fit_and_record(ALState& st, const data::Manifest& manifest,
                    std::vector<std::string> queried, const ALOptions& options,
                    const EvalSet& eval) {
  sort_labeled(st, manifest);
  proxy::LabeledPool pool;
  for (std::size_t i = 0; i < st.labeled.size(); ++i) {
    pool.objectives.push_back(manifest.records[st.labeled[i]].objective);
    pool.mos.push_back(st.labels[i]);
  }
  const auto tag = static_cast<std::uint64_t>(st.stage);
  if (pool.size() >= proxy::kMinLearnPairs) {
    st.weights = proxy::learn_weights(pool, st.normalizer, mix_seed(st.seed, 0x1ea0 + tag), options.learn);
    st.ensemble = proxy::fit_ensemble(pool, st.normalizer, options.ensemble_size,
                                      mix_seed(st.seed, 0xe750 + tag), options.learn);
  } else {
    // Too few labels to learn weights: calibrated equal weights, degenerate ensemble.
    try {
      st.weights = proxy::fit_calibration(pool, st.normalizer, proxy::equal_weights().w);
    } catch (const NumericError&) {
      st.weights = proxy::equal_weights();
    }
    st.ensemble.members.assign(static_cast<std::size_t>(options.ensemble_size), st.weights);
    st.ensemble.residual_variance = st.weights.residual_variance;
  }

  StageRecord rec;
  rec.stage = st.stage;
  rec.labeled = st.labeled.size();
  rec.queried = std::move(queried);
  rec.weights = st.weights;
  rec.achieved_rho = st.weights.achieved_rho;

  const bool on_eval = !eval.rows.empty();
  const auto& rows = on_eval ? eval.rows : st.labeled;
  const auto& target = on_eval ? eval.mos : st.labels;
  if (rows.size() != target.size()) throw DataError("evaluation set rows and MOS lengths differ");
  metrics::IntervalSeries iv;
  iv.level = options.interval_level;
  std::vector<double> variances, point;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& o = manifest.records[rows[i]].objective;
    const auto d = proxy::predictive_distribution(st.ensemble, st.normalizer, o, iv.level);
    iv.lower.push_back(d.lower);
    iv.upper.push_back(d.upper);
    iv.target.push_back(target[i]);
    variances.push_back(d.variance);
    point.push_back(proxy::proxy_score(st.weights, st.normalizer, o));
  }
  rec.calibration = metrics::calibration_suite(iv, variances);
  rec.calibration_on_eval = on_eval;
  rec.eval_rho = on_eval ? metrics::pcc(point, eval.mos) : std::numeric_limits<double>::quiet_NaN();
  st.history.push_back(std::move(rec));
}

}  // namespace

ALState stage_init(const data::Manifest& manifest, std::span<const std::size_t> candidates,
                   const AnnotatorOracle& oracle, std::size_t budget, std::uint64_t seed,
                   const ALOptions& options, const EvalSet& eval) {
  if (candidates.empty()) throw DataError("active learning: empty candidate pool");
  if (budget < 10) throw ConfigError("active learning: budget must be >= 10");
  if (budget > candidates.size()) {
    throw ConfigError("active learning: budget " + std::to_string(budget) +
                      " exceeds pool size " + std::to_string(candidates.size()));
  }
  if (options.oversample < 1) throw ConfigError("active learning: oversample must be >= 1");
  std::vector<std::size_t> pool(candidates.begin(), candidates.end());
  std::sort(pool.begin(), pool.end());
  if (std::adjacent_find(pool.begin(), pool.end()) != pool.end()) {
    throw DataError("active learning: duplicate candidate rows");
  }
  if (pool.back() >= manifest.size()) throw DataError("active learning: candidate row out of range");

  ALState st;
  st.budget = budget;
  st.seed = seed;
  st.stage = Stage::S0;
  std::vector<data::ObjectiveVector> objectives;
  for (auto r : pool) objectives.push_back(manifest.records[r].objective);
  st.normalizer = proxy::fit_normalizer(objectives);

  std::mt19937_64 gen(mix_seed(seed, 0x5000));
  std::shuffle(pool.begin(), pool.end(), gen);
  const std::size_t n0 = stage_target(budget, Stage::S0);
  std::vector<std::string> queried;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (i < n0) {
      st.labeled.push_back(pool[i]);
      st.labels.push_back(oracle.label(manifest.records[pool[i]]));
      queried.push_back(manifest.records[pool[i]].clip_id);
    } else {
      st.unlabeled.push_back(pool[i]);
    }
  }
  std::sort(st.unlabeled.begin(), st.unlabeled.end());
  fit_and_record(st, manifest, std::move(queried), options, eval);
  return st;
}

std::vector<double> uncertainty_scores(const ALState& state, const data::Manifest& manifest,
                                       std::span<const std::size_t> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) {
    out.push_back(proxy::predictive_distribution(state.ensemble, state.normalizer,
                                                 manifest.records.at(r).objective)
                      .entropy());
  }
  return out;
}

std::vector<std::size_t> rank_by_uncertainty(const data::Manifest& manifest,
                                             std::span<const std::size_t> rows,
                                             std::span<const double> scores) {
  if (rows.size() != scores.size()) throw DataError("rank_by_uncertainty: length mismatch");
  std::vector<std::size_t> idx(rows.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return manifest.records[rows[a]].clip_id < manifest.records[rows[b]].clip_id;
  });
  std::vector<std::size_t> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(rows[i]);
  return out;
}

std::vector<std::size_t> diversity_filter(std::span<const std::size_t> ranked,
                                          const Eigen::MatrixXd& conditions,
                                          std::size_t batch_size, int oversample) {
  if (batch_size == 0) return {};
  if (ranked.size() < batch_size) {
    throw DataError("diversity_filter: " + std::to_string(ranked.size()) +
                    " candidates for a batch of " + std::to_string(batch_size));
  }
  if (oversample < 1) throw ConfigError("diversity_filter: oversample must be >= 1");
  const std::size_t m = std::min(ranked.size(), batch_size * static_cast<std::size_t>(oversample));
  for (std::size_t i = 0; i < m; ++i) {
    if (static_cast<Index>(ranked[i]) >= conditions.rows()) {
      throw DataError("diversity_filter: row without a condition vector");
    }
  }
  std::vector<double> min_dist(m, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(m, false);
  std::vector<std::size_t> out;
  std::size_t next = 0;
  while (out.size() < batch_size) {
    taken[next] = true;
    out.push_back(ranked[next]);
    const auto c = conditions.row(static_cast<Index>(ranked[next]));
    double best = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i],
                             (conditions.row(static_cast<Index>(ranked[i])) - c).norm());
      if (min_dist[i] > best) {
        best = min_dist[i];
        next = i;
      }
    }
  }
  return out;
}

void advance_stage(ALState& st, const data::Manifest& manifest, const AnnotatorOracle& oracle,
                   Policy policy, const Eigen::MatrixXd& conditions, const ALOptions& options,
                   const EvalSet& eval) {
  if (st.stage == Stage::S2) throw ConfigError("active learning: already at the final stage");
  const auto next = static_cast<Stage>(static_cast<int>(st.stage) + 1);
  const std::size_t need = stage_target(st.budget, next) - st.labeled.size();
  std::vector<std::size_t> picked;
  if (policy == Policy::Random) {
    std::vector<std::size_t> pool = st.unlabeled;
    std::mt19937_64 gen(mix_seed(st.seed, 0x5000 + static_cast<std::uint64_t>(next)));
    std::shuffle(pool.begin(), pool.end(), gen);
    picked.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(need));
  } else {
    const auto scores = uncertainty_scores(st, manifest, st.unlabeled);
    const auto ranked = rank_by_uncertainty(manifest, st.unlabeled, scores);
    picked = diversity_filter(ranked, conditions, need, options.oversample);
  }
  std::vector<std::string> queried;
  for (auto r : picked) {
    st.labeled.push_back(r);
    st.labels.push_back(oracle.label(manifest.records[r]));
    queried.push_back(manifest.records[r].clip_id);
  }
  std::vector<std::size_t> sorted_pick = picked;
  std::sort(sorted_pick.begin(), sorted_pick.end());
  std::vector<std::size_t> rest;
  std::set_difference(st.unlabeled.begin(), st.unlabeled.end(), sorted_pick.begin(),
                      sorted_pick.end(), std::back_inserter(rest));
  if (rest.size() + picked.size() != st.unlabeled.size()) {
    throw std::logic_error("active learning: query contained an already-labeled clip");
  }
  st.unlabeled = std::move(rest);
  st.stage = next;
  fit_and_record(st, manifest, std::move(queried), options, eval);
}

ALResult run_loop(const data::Manifest& manifest, std::span<const std::size_t> candidates,
                  const AnnotatorOracle& oracle, std::size_t budget, std::uint64_t seed,
                  Policy policy, const ALOptions& options, const EvalSet& eval) {
  ALResult res{stage_init(manifest, candidates, oracle, budget, seed, options, eval), {}};
  const Eigen::MatrixXd conditions =
      policy == Policy::Active ? condition_vectors(manifest) : Eigen::MatrixXd();
  while (res.state.stage != Stage::S2) {
    advance_stage(res.state, manifest, oracle, policy, conditions, options, eval);
  }
  res.proxy_labels = proxy_labels(manifest, res.state.weights, res.state.normalizer);
  return res;
}

}  // namespace dubscore::al
