#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dubscore/active_learning.hpp"
#include "dubscore/checkpoint.hpp"
#include "dubscore/data_model.hpp"
#include "dubscore/fusion_network.hpp"
#include "dubscore/training.hpp"

namespace dubscore::pipeline {

enum class Strategy { EW, AL, Random };
enum class Supervision { WS, WSFT };
enum class Scale { Full, Desk, Fast };

std::string_view to_string(Strategy s);
std::string_view to_string(Supervision s);
std::string_view to_string(Scale s);
Strategy parse_strategy(std::string_view s);
Supervision parse_supervision(std::string_view s);
Scale parse_scale(std::string_view s);

struct ProxySettings {
  Strategy strategy = Strategy::AL;
  std::size_t budget = 90;
  int ensemble_size = 50;
  std::string oracle = "recorded";  // "recorded" | "simulated"
  int oracle_ratings = 10;           // simulated oracle only
  double oracle_sigma = 0.5;         // simulated oracle only
  double interval_level = 0.9;
  int restarts = 16;
};

struct FinetuneSettings {
  std::optional<int> epochs;
  std::optional<double> learning_rate;
  std::optional<int> batch_size;
};

struct RunConfig {
  Scale scale = Scale::Desk;
  std::uint64_t seed = 1;
  std::string runs_dir = "runs";
  std::string manifest;  // external manifest; empty means the run's synthetic data
  data::SyntheticSpec synthetic;
  fusion::NetworkConfig network;
  ProxySettings proxy;
  Supervision supervision = Supervision::WSFT;
  FinetuneSettings finetune;
  double holdout_fraction = 0.8;
  int folds = data::kDefaultFolds;

  // Throws ConfigError.
  void validate() const;
};

RunConfig preset(Scale scale);
// Overlays a JSON document on `base`. Unknown keys and mistyped values throw ConfigError.
RunConfig apply_json(const RunConfig& base, const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path, const RunConfig& base);
// Canonical JSON of the fully resolved config.
std::string to_json(const RunConfig& config);
// "run-" + 16 hex digits of a hash over the canonical config (runs_dir and supervision excluded).
std::string run_id(const RunConfig& config);
std::filesystem::path run_dir(const RunConfig& config);

// Rated clips split by holdout into train/test; everything but the rated test clips
// is available for weak supervision.
struct Splits {
  std::vector<std::size_t> rated_train;
  std::vector<std::size_t> rated_test;
  std::vector<std::size_t> non_test;
};

Splits make_splits(const data::Manifest& manifest, double fraction, std::uint64_t seed);

struct ProxyOutcome {
  io::ProxyModel model;
  std::vector<al::StageRecord> history;
  std::vector<double> labels;  // Proxy MOS per manifest record
};

// Learns Proxy MOS weights with the configured strategy. `rated_train` feeds the
// recorded oracle; `non_test` is the pool for the simulated one. `eval` only feeds
// per-stage diagnostics.
ProxyOutcome learn_proxy(const data::Manifest& manifest,
                         const std::optional<data::TrueQualityTable>& truth,
                         const Splits& splits, const al::EvalSet& eval, const RunConfig& config,
                         Strategy strategy);

struct TestScores {
  double pcc = 0.0;
  double srcc = 0.0;
  double mse = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;
};

TestScores score_predictions(std::span<const double> predictions, std::span<const double> mos);
TestScores score_network(const fusion::FusionNetwork& network, const data::Manifest& manifest,
                         std::span<const std::size_t> rows);

// WS training on `rows` with proxy labels, then optional FT on `rated_train`.
struct ModelRun {
  fusion::FusionNetwork network;
  fusion::TrainReport ws;
  std::optional<fusion::TrainReport> ft;
};

ModelRun train_model(const data::Manifest& manifest, std::span<const std::size_t> rows,
                     std::span<const double> proxy_labels, std::span<const std::size_t> rated_train,
                     const RunConfig& config, Supervision supervision,
                     const fusion::ModalityMask& modalities);

inline constexpr std::array<fusion::ModalityMask, 7> kAblationRows = {{
    {true, false, false},
    {false, true, false},
    {false, false, true},
    {true, true, false},
    {true, false, true},
    {false, true, true},
    {true, true, true},
}};

// --- commands -------------------------------------------------------------------
// Each command reads artifacts from and writes artifacts to run_dir(config), writes
// the resolved config there, and prints a short summary to `out`.

void cmd_synth(const RunConfig& config, std::ostream& out);
void cmd_proxy_learn(const RunConfig& config, std::ostream& out);
void cmd_train(const RunConfig& config, std::ostream& out);
void cmd_finetune(const RunConfig& config, std::ostream& out);

struct EvaluateOptions {
  bool kfold = false;
  bool ablation = false;
  std::string split = "test";  // "test" | "train"
  bool allow_train_eval = false;
  std::string checkpoint;  // default: the run's WS or WS+FT checkpoint
};

void cmd_evaluate(const RunConfig& config, const EvaluateOptions& options, std::ostream& out);
void cmd_report(const RunConfig& config, std::ostream& out);

enum class Experiment { Strategies, Ablation, AlVsRandom };
Experiment parse_experiment(std::string_view s);
std::string_view to_string(Experiment e);

// Repeats an experiment over seeds config.seed, config.seed + 1, ... on fresh
// synthetic data and writes sweep_<experiment>.json. Returns the JSON text.
std::string run_sweep(const RunConfig& config, Experiment experiment, int seeds,
                      std::ostream& out);

}  // namespace dubscore::pipeline
