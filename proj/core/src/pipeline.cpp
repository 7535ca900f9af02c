#include "dubscore/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "dubscore/errors.hpp"
#include "dubscore/eval_metrics.hpp"
#include "dubscore/random.hpp"

namespace dubscore::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSplitTag = 0x5b11;
constexpr std::uint64_t kFoldTag = 0xf01d;
constexpr int kBootstrapResamples = 10000;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

fs::path prepare_run_dir(const RunConfig& config) {
  config.validate();
  const fs::path dir = run_dir(config);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_text(dir / "config.json", to_json(config));
  return dir;
}

fs::path manifest_path(const RunConfig& config) {
  if (!config.manifest.empty()) return config.manifest;
  return run_dir(config) / "data" / "manifest.jsonl";
}

fs::path require(const fs::path& path, const char* producer) {
  if (!fs::exists(path)) {
    throw DataError("missing artifact: " + path.string() + " (run '" + producer + "' first)");
  }
  return path;
}

struct LoadedData {
  data::Manifest manifest;
  std::optional<data::TrueQualityTable> truth;
};

LoadedData load_data(const RunConfig& config) {
  LoadedData d;
  d.manifest = data::load_manifest(require(manifest_path(config), "synth"));
  const fs::path truth = run_dir(config) / "data" / "truth.jsonl";
  if (config.manifest.empty() && fs::exists(truth)) d.truth = data::read_truth_sidecar(truth);
  return d;
}

data::SyntheticSpec synthetic_spec(const RunConfig& config) {
  data::SyntheticSpec s = config.synthetic;
  s.seed = config.seed;
  return s;
}

fusion::NetworkConfig network_config(const RunConfig& config, const fusion::ModalityMask& mask) {
  fusion::NetworkConfig n = config.network;
  n.seed = config.seed;
  n.modalities = mask;
  return n;
}

fusion::TrainOverrides finetune_overrides(const RunConfig& config) {
  fusion::TrainOverrides o;
  o.epochs = config.finetune.epochs;
  o.learning_rate = config.finetune.learning_rate;
  o.batch_size = config.finetune.batch_size;
  return o;
}

std::vector<double> human_mos(const data::Manifest& m, std::span<const std::size_t> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(m.records.at(r).human_mos());
  return out;
}

std::vector<double> gather(std::span<const double> per_record, std::span<const std::size_t> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(per_record[r]);
  return out;
}

al::EvalSet eval_set(const data::Manifest& m, std::span<const std::size_t> rows) {
  return al::EvalSet{std::vector<std::size_t>(rows.begin(), rows.end()), human_mos(m, rows)};
}

json clip_ids(const data::Manifest& m, std::span<const std::size_t> rows) {
  std::vector<std::string> ids;
  for (auto r : rows) ids.push_back(m.records[r].clip_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

json scores_json(const TestScores& s) {
  return {{"pcc", s.pcc}, {"srcc", s.srcc}, {"mse", s.mse}, {"r2", s.r2}, {"n", s.n}};
}

json train_json(const fusion::TrainReport& r) {
  return {{"epoch_loss", r.epoch_loss},
          {"initial_loss", r.initial_loss},
          {"final_loss", r.final_loss}};
}

json history_json(const std::vector<al::StageRecord>& history) {
  json stages = json::array();
  for (const auto& h : history) {
    json w;
    for (std::size_t i = 0; i < data::kMetricCount; ++i) {
      w[std::string(data::kMetricNames[i])] = h.weights.w[i];
    }
    stages.push_back({{"stage", std::string(al::to_string(h.stage))},
                      {"labeled", h.labeled},
                      {"queried", h.queried},
                      {"weights", w},
                      {"achieved_rho", h.achieved_rho},
                      {"eval_rho", std::isfinite(h.eval_rho) ? json(h.eval_rho) : json(nullptr)},
                      {"apv", h.calibration.apv},
                      {"picp", h.calibration.picp},
                      {"mpiw", h.calibration.mpiw},
                      {"ece", h.calibration.ece},
                      {"calibration_set", h.calibration_on_eval ? "eval" : "labeled"}});
  }
  return stages;
}

json weights_json(const proxy::ProxyWeights& p) {
  json w;
  for (std::size_t i = 0; i < data::kMetricCount; ++i) {
    w[std::string(data::kMetricNames[i])] = p.w[i];
  }
  return {{"w", w},
          {"scale", p.scale},
          {"offset", p.offset},
          {"achieved_rho", std::isfinite(p.achieved_rho) ? json(p.achieved_rho) : json(nullptr)}};
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

Splits make_splits(const data::Manifest& manifest, double fraction, std::uint64_t seed) {
  const auto rated = manifest.rated_indices();
  if (rated.size() < 5) {
    throw DataError("need at least 5 rated clips for a train/test split, found " +
                    std::to_string(rated.size()));
  }
  const auto h = data::holdout_split(rated.size(), fraction, mix_seed(seed, kSplitTag));
  Splits s;
  for (auto i : h.train) s.rated_train.push_back(rated[i]);
  for (auto i : h.test) s.rated_test.push_back(rated[i]);
  std::sort(s.rated_train.begin(), s.rated_train.end());
  std::sort(s.rated_test.begin(), s.rated_test.end());
  const std::set<std::size_t> test(s.rated_test.begin(), s.rated_test.end());
  for (std::size_t r = 0; r < manifest.size(); ++r) {
    if (!test.count(r)) s.non_test.push_back(r);
  }
  return s;
}

ProxyOutcome learn_proxy(const data::Manifest& manifest,
                         const std::optional<data::TrueQualityTable>& truth, const Splits& splits,
                         const al::EvalSet& eval, const RunConfig& config, Strategy strategy) {
  ProxyOutcome out;
  if (strategy == Strategy::EW) {
    std::vector<data::ObjectiveVector> objectives;
    for (auto r : splits.non_test) objectives.push_back(manifest.records[r].objective);
    out.model.normalizer = proxy::fit_normalizer(objectives);
    out.model.weights = proxy::equal_weights();
  } else {
    std::unique_ptr<al::AnnotatorOracle> oracle;
    std::span<const std::size_t> candidates = splits.rated_train;
    if (config.proxy.oracle == "simulated") {
      if (!truth) throw DataError("simulated oracle needs the synthetic truth sidecar");
      oracle = std::make_unique<al::SimulatedOracle>(*truth, config.proxy.oracle_ratings,
                                                     config.proxy.oracle_sigma, config.seed);
      candidates = splits.non_test;
    } else {
      oracle = std::make_unique<al::RecordedOracle>();
    }
    al::ALOptions options;
    options.ensemble_size = config.proxy.ensemble_size;
    options.interval_level = config.proxy.interval_level;
    options.learn.restarts = config.proxy.restarts;
    const auto policy = strategy == Strategy::AL ? al::Policy::Active : al::Policy::Random;
    auto res = al::run_loop(manifest, candidates, *oracle, config.proxy.budget, config.seed, policy,
                            options, eval);
    out.model = io::ProxyModel{res.state.normalizer, res.state.weights, res.state.ensemble};
    out.history = std::move(res.state.history);
  }
  out.labels = al::proxy_labels(manifest, out.model.weights, out.model.normalizer);
  return out;
}

TestScores score_predictions(std::span<const double> predictions, std::span<const double> mos) {
  TestScores s;
  s.pcc = metrics::pcc(predictions, mos);
  s.srcc = metrics::srcc(predictions, mos);
  s.mse = metrics::mse(predictions, mos);
  s.r2 = metrics::r2(predictions, mos);
  s.n = mos.size();
  return s;
}

TestScores score_network(const fusion::FusionNetwork& network, const data::Manifest& manifest,
                         std::span<const std::size_t> rows) {
  const Eigen::VectorXd pred = fusion::predict(network, manifest.streams, rows);
  const std::vector<double> p(pred.data(), pred.data() + pred.size());
  return score_predictions(p, human_mos(manifest, rows));
}

ModelRun train_model(const data::Manifest& manifest, std::span<const std::size_t> rows,
                     std::span<const double> proxy_labels, std::span<const std::size_t> rated_train,
                     const RunConfig& config, Supervision supervision,
                     const fusion::ModalityMask& modalities) {
  ModelRun run{fusion::FusionNetwork(network_config(config, modalities)), {}, std::nullopt};
  const auto labels = gather(proxy_labels, rows);
  run.ws = fusion::train(run.network, manifest.streams, rows, labels);
  if (supervision == Supervision::WSFT) {
    run.ft = fusion::finetune(run.network, manifest.streams, rated_train,
                              human_mos(manifest, rated_train), finetune_overrides(config));
  }
  return run;
}

// --- commands -----------------------------------------------------------------------

void cmd_synth(const RunConfig& config, std::ostream& out) {
  if (!config.manifest.empty()) {
    throw ConfigError("synth generates its own data; remove 'manifest' from the config");
  }
  const fs::path dir = prepare_run_dir(config);
  const auto ds = data::generate_synthetic(synthetic_spec(config));
  std::error_code ec;
  fs::create_directories(dir / "data", ec);
  if (ec) throw DataError("cannot create " + (dir / "data").string() + ": " + ec.message());
  data::write_manifest(ds.manifest, dir / "data" / "manifest.jsonl");
  data::write_truth_sidecar(ds.truth, dir / "data" / "truth.jsonl");

  std::size_t en_hi = 0, rated = 0, originals = 0;
  for (const auto& r : ds.manifest.records) {
    en_hi += r.language_direction == data::LanguageDirection::EnToHi;
    rated += r.has_ratings();
    originals += r.is_ground_truth;
  }
  const std::size_t n = ds.manifest.size();
  json summary = {{"clips", n},
                  {"en-hi", en_hi},
                  {"hi-en", n - en_hi},
                  {"rated", rated},
                  {"rated_fraction", static_cast<double>(rated) / static_cast<double>(n)},
                  {"ground_truth", originals}};
  write_text(dir / "synth_summary.json", summary.dump(2) + "\n");
  out << "run directory: " << dir.string() << "\n"
      << "clips: " << n << " (en-hi " << en_hi << ", hi-en " << n - en_hi << ")\n"
      << "rated: " << rated << " (" << fmt(100.0 * static_cast<double>(rated) / static_cast<double>(n), 1)
      << "%), ground-truth originals: " << originals << "\n";
}

void cmd_proxy_learn(const RunConfig& config, std::ostream& out) {
  const fs::path dir = prepare_run_dir(config);
  const auto d = load_data(config);
  const auto splits = make_splits(d.manifest, config.holdout_fraction, config.seed);
  const auto eval = eval_set(d.manifest, splits.rated_test);
  const auto res = learn_proxy(d.manifest, d.truth, splits, eval, config, config.proxy.strategy);
  io::save_proxy(res.model, dir / "proxy.dkpt");

  const bool learned = config.proxy.strategy != Strategy::EW;
  json j = {{"strategy", std::string(to_string(config.proxy.strategy))},
            {"budget", learned ? json(config.proxy.budget) : json(0)},
            {"oracle", learned ? json(config.proxy.oracle) : json(nullptr)},
            {"weights", weights_json(res.model.weights)},
            {"stages", history_json(res.history)}};
  std::vector<double> point;
  for (auto r : splits.rated_test) point.push_back(res.labels[r]);
  j["test_rho"] = metrics::pcc(point, eval.mos);
  write_text(dir / "proxy_history.json", j.dump(2) + "\n");

  out << "strategy " << to_string(config.proxy.strategy) << ", weights:";
  for (std::size_t i = 0; i < data::kMetricCount; ++i) {
    out << " " << data::kMetricNames[i] << "=" << fmt(res.model.weights.w[i]);
  }
  out << "\n";
  for (const auto& h : res.history) {
    out << al::to_string(h.stage) << ": labeled " << h.labeled << ", rho " << fmt(h.achieved_rho)
        << ", test rho " << fmt(h.eval_rho) << ", APV " << fmt(h.calibration.apv, 4) << ", PICP "
        << fmt(100.0 * h.calibration.picp, 1) << "%\n";
  }
  out << "Proxy MOS vs human MOS on held-out clips: rho " << fmt(j["test_rho"].get<double>()) << "\n";
}

void cmd_train(const RunConfig& config, std::ostream& out) {
  const fs::path dir = prepare_run_dir(config);
  const auto d = load_data(config);
  const auto splits = make_splits(d.manifest, config.holdout_fraction, config.seed);
  const auto model = io::load_proxy(require(dir / "proxy.dkpt", "proxy-learn"));
  const auto labels = al::proxy_labels(d.manifest, model.weights, model.normalizer);
  auto run = train_model(d.manifest, splits.non_test, labels, splits.rated_train, config,
                         Supervision::WS, config.network.modalities);
  const json prov = {{"stage", "WS"}, {"training_clips", clip_ids(d.manifest, splits.non_test)}};
  io::save_network(run.network, dir / "network_ws.dkpt", prov.dump());
  write_text(dir / "train_log.json", train_json(run.ws).dump(2) + "\n");
  out << "trained on " << splits.non_test.size() << " clips with Proxy MOS labels, "
      << run.ws.epoch_loss.size() << " epochs, loss " << fmt(run.ws.initial_loss, 5) << " -> "
      << fmt(run.ws.final_loss, 5) << "\n";
}

void cmd_finetune(const RunConfig& config, std::ostream& out) {
  const fs::path dir = prepare_run_dir(config);
  const auto d = load_data(config);
  const auto splits = make_splits(d.manifest, config.holdout_fraction, config.seed);
  auto net = io::load_network(require(dir / "network_ws.dkpt", "train"));
  const auto rep = fusion::finetune(net, d.manifest.streams, splits.rated_train,
                                    human_mos(d.manifest, splits.rated_train),
                                    finetune_overrides(config));
  const json prov = {{"stage", "WS+FT"},
                     {"training_clips", clip_ids(d.manifest, splits.non_test)},
                     {"finetune_clips", clip_ids(d.manifest, splits.rated_train)}};
  io::save_network(net, dir / "network_ft.dkpt", prov.dump());
  write_text(dir / "finetune_log.json", train_json(rep).dump(2) + "\n");
  out << "fine-tuned on " << splits.rated_train.size() << " human-rated clips, loss "
      << fmt(rep.initial_loss, 5) << " -> " << fmt(rep.final_loss, 5) << "\n";
}

namespace {

json agreement_json(const data::Manifest& m, std::span<const std::size_t> rows) {
  const auto rm = metrics::rating_matrix(m, rows);
  json j;
  auto guarded = [&](const char* key, auto fn) {
    try {
      j[key] = fn(rm);
    } catch (const std::exception&) {
      j[key] = nullptr;
    }
  };
  guarded("cronbach_alpha", [](const metrics::RatingMatrix& x) { return metrics::cronbach_alpha(x); });
  guarded("icc1", [](const metrics::RatingMatrix& x) { return metrics::icc1(x); });
  guarded("icc2", [](const metrics::RatingMatrix& x) { return metrics::icc2(x); });
  return j;
}

json baselines_json(const data::Manifest& m, std::span<const std::size_t> rows) {
  json arr = json::array();
  for (const auto& b : metrics::single_metric_baselines(m, rows)) {
    arr.push_back({{"metric", b.name}, {"pcc", b.pcc}, {"srcc", b.srcc}});
  }
  return arr;
}

void evaluate_kfold(const RunConfig& config, const LoadedData& d, const fs::path& dir,
                    std::ostream& out) {
  const auto rated = d.manifest.rated_indices();
  const auto folds = data::kfold_split(rated.size(), config.folds, mix_seed(config.seed, kFoldTag));
  json rows = json::array();
  std::vector<double> pccs, srccs, mses, r2s;
  out << "fold  n    PCC    SRCC   MSE    R2\n";
  for (std::size_t f = 0; f < folds.size(); ++f) {
    Splits s;
    for (auto i : folds[f].train) s.rated_train.push_back(rated[i]);
    for (auto i : folds[f].validation) s.rated_test.push_back(rated[i]);
    std::sort(s.rated_train.begin(), s.rated_train.end());
    std::sort(s.rated_test.begin(), s.rated_test.end());
    const std::set<std::size_t> held(s.rated_test.begin(), s.rated_test.end());
    for (std::size_t r = 0; r < d.manifest.size(); ++r) {
      if (!held.count(r)) s.non_test.push_back(r);
    }
    const auto eval = eval_set(d.manifest, s.rated_test);
    const auto px = learn_proxy(d.manifest, d.truth, s, eval, config, config.proxy.strategy);
    const auto run = train_model(d.manifest, s.non_test, px.labels, s.rated_train, config,
                                 config.supervision, config.network.modalities);
    const auto sc = score_network(run.network, d.manifest, s.rated_test);
    rows.push_back({{"fold", f + 1}, {"scores", scores_json(sc)}});
    pccs.push_back(sc.pcc);
    srccs.push_back(sc.srcc);
    mses.push_back(sc.mse);
    r2s.push_back(sc.r2);
    out << std::setw(4) << f + 1 << "  " << std::setw(4) << sc.n << " " << fmt(sc.pcc) << "  "
        << fmt(sc.srcc) << "  " << fmt(sc.mse) << "  " << fmt(sc.r2) << "\n";
  }
  const json summary = {{"pcc_mean", mean_of(pccs)},   {"pcc_sd", sd_of(pccs)},
                        {"srcc_mean", mean_of(srccs)}, {"srcc_sd", sd_of(srccs)},
                        {"mse_mean", mean_of(mses)},   {"r2_mean", mean_of(r2s)}};
  out << "mean PCC " << fmt(mean_of(pccs)) << " (sd " << fmt(sd_of(pccs)) << "), SRCC "
      << fmt(mean_of(srccs)) << "\n";
  const json j = {{"mode", "kfold"},
                  {"folds", config.folds},
                  {"strategy", std::string(to_string(config.proxy.strategy))},
                  {"supervision", std::string(to_string(config.supervision))},
                  {"per_fold", rows},
                  {"summary", summary}};
  write_text(dir / "evaluation_kfold.json", j.dump(2) + "\n");
}

void evaluate_ablation(const RunConfig& config, const LoadedData& d, const fs::path& dir,
                       std::ostream& out) {
  const auto splits = make_splits(d.manifest, config.holdout_fraction, config.seed);
  const auto model = io::load_proxy(require(dir / "proxy.dkpt", "proxy-learn"));
  const auto labels = al::proxy_labels(d.manifest, model.weights, model.normalizer);
  json rows = json::array();
  out << "Modality  PCC    SRCC   MSE    R2\n";
  for (const auto& mask : kAblationRows) {
    const auto run = train_model(d.manifest, splits.non_test, labels, splits.rated_train, config,
                                 config.supervision, mask);
    const auto sc = score_network(run.network, d.manifest, splits.rated_test);
    const std::string label = fusion::modality_label(mask);
    rows.push_back({{"modalities", label}, {"scores", scores_json(sc)}});
    out << std::left << std::setw(8) << label << std::right << "  " << fmt(sc.pcc) << "  "
        << fmt(sc.srcc) << "  " << fmt(sc.mse) << "  " << fmt(sc.r2) << "\n";
  }
  const json j = {{"mode", "ablation"},
                  {"supervision", std::string(to_string(config.supervision))},
                  {"rows", rows}};
  write_text(dir / "evaluation_ablation.json", j.dump(2) + "\n");
}

}  // namespace

void cmd_evaluate(const RunConfig& config, const EvaluateOptions& options, std::ostream& out) {
  if (options.kfold && options.ablation) throw ConfigError("choose either --kfold or --ablation");
  if (options.split != "test" && options.split != "train") {
    throw ConfigError("--split must be 'test' or 'train'");
  }
  if (options.split == "train" && !options.allow_train_eval) {
    throw ConfigError(
        "split hygiene: refusing to evaluate on training clips (pass --allow-train-eval)");
  }
  const fs::path dir = prepare_run_dir(config);
  const auto d = load_data(config);
  if (options.kfold) return evaluate_kfold(config, d, dir, out);
  if (options.ablation) return evaluate_ablation(config, d, dir, out);

  const auto splits = make_splits(d.manifest, config.holdout_fraction, config.seed);
  const fs::path ckpt =
      !options.checkpoint.empty()
          ? fs::path(options.checkpoint)
          : dir / (config.supervision == Supervision::WS ? "network_ws.dkpt" : "network_ft.dkpt");
  const auto net = io::load_network(
      require(ckpt, config.supervision == Supervision::WS ? "train" : "finetune"));
  const auto& rows = options.split == "test" ? splits.rated_test : splits.rated_train;

  const json prov = json::parse(io::read_network_provenance(ckpt));
  std::set<std::string> seen;
  for (const char* key : {"training_clips", "finetune_clips"}) {
    if (prov.contains(key)) {
      for (const auto& id : prov[key]) seen.insert(id.get<std::string>());
    }
  }
  std::size_t overlap = 0;
  for (auto r : rows) overlap += seen.count(d.manifest.records[r].clip_id);
  if (overlap > 0 && !options.allow_train_eval) {
    throw DataError("split hygiene: " + std::to_string(overlap) +
                    " evaluation clips were used to train " + ckpt.string());
  }

  const auto sc = score_network(net, d.manifest, rows);
  const json j = {{"mode", "holdout"},
                  {"split", options.split},
                  {"checkpoint", ckpt.filename().string()},
                  {"modalities", fusion::modality_label(net.config().modalities)},
                  {"overlap_with_training", overlap},
                  {"model", scores_json(sc)},
                  {"baselines", baselines_json(d.manifest, rows)},
                  {"agreement", agreement_json(d.manifest, rows)}};
  write_text(dir / ("evaluation_" + options.split + ".json"), j.dump(2) + "\n");
  out << "evaluated " << ckpt.filename().string() << " on " << sc.n << " " << options.split
      << " clips: PCC " << fmt(sc.pcc) << ", SRCC " << fmt(sc.srcc) << ", MSE " << fmt(sc.mse)
      << ", R2 " << fmt(sc.r2) << "\n";
  for (const auto& b : j["baselines"]) {
    out << "  " << std::left << std::setw(11) << b["metric"].get<std::string>() << std::right
        << " PCC " << fmt(b["pcc"].get<double>()) << ", SRCC " << fmt(b["srcc"].get<double>())
        << "\n";
  }
}

// --- sweeps -------------------------------------------------------------------------

Experiment parse_experiment(std::string_view s) {
  if (s == "strategies") return Experiment::Strategies;
  if (s == "ablation") return Experiment::Ablation;
  if (s == "al-vs-random") return Experiment::AlVsRandom;
  throw ConfigError("unknown experiment '" + std::string(s) +
                    "' (expected strategies, ablation or al-vs-random)");
}

std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::Strategies: return "strategies";
    case Experiment::Ablation: return "ablation";
    case Experiment::AlVsRandom: return "al-vs-random";
  }
  return "?";
}

namespace {

json sweep_al_vs_random(const RunConfig& c, const data::SyntheticDataset& ds, const Splits& s) {
  const auto eval = eval_set(ds.manifest, s.rated_test);
  const auto a = learn_proxy(ds.manifest, ds.truth, s, eval, c, Strategy::AL);
  const auto r = learn_proxy(ds.manifest, ds.truth, s, eval, c, Strategy::Random);
  json apv = json::array(), picp = json::array(), mpiw = json::array(), ece = json::array();
  for (const auto& h : a.history) {
    apv.push_back(h.calibration.apv);
    picp.push_back(h.calibration.picp);
    mpiw.push_back(h.calibration.mpiw);
    ece.push_back(h.calibration.ece);
  }
  const auto& h = a.history;
  const bool apv_mono = h[0].calibration.apv >= h[1].calibration.apv &&
                        h[1].calibration.apv >= h[2].calibration.apv;
  const bool picp_mono = h[0].calibration.picp <= h[1].calibration.picp &&
                         h[1].calibration.picp <= h[2].calibration.picp;
  return {{"rho_al", {a.history[0].eval_rho, a.history[1].eval_rho, a.history[2].eval_rho}},
          {"rho_random", {r.history[0].eval_rho, r.history[1].eval_rho, r.history[2].eval_rho}},
          {"apv", apv},
          {"picp", picp},
          {"mpiw", mpiw},
          {"ece", ece},
          {"apv_monotone", apv_mono},
          {"picp_monotone", picp_mono}};
}

json sweep_strategies(const RunConfig& c, const data::SyntheticDataset& ds, const Splits& s) {
  const auto eval = eval_set(ds.manifest, s.rated_test);
  json row;
  const auto ew = learn_proxy(ds.manifest, ds.truth, s, eval, c, Strategy::EW);
  const auto ra = learn_proxy(ds.manifest, ds.truth, s, eval, c, Strategy::Random);
  const auto al = learn_proxy(ds.manifest, ds.truth, s, eval, c, Strategy::AL);
  const auto mask = c.network.modalities;
  auto ws_score = [&](const ProxyOutcome& px) {
    return train_model(ds.manifest, s.non_test, px.labels, s.rated_train, c, Supervision::WS, mask);
  };
  row["EW:WS"] = scores_json(score_network(ws_score(ew).network, ds.manifest, s.rated_test));
  row["Random:WS"] = scores_json(score_network(ws_score(ra).network, ds.manifest, s.rated_test));
  auto al_run = ws_score(al);
  row["AL:WS"] = scores_json(score_network(al_run.network, ds.manifest, s.rated_test));
  fusion::finetune(al_run.network, ds.manifest.streams, s.rated_train,
                   human_mos(ds.manifest, s.rated_train), finetune_overrides(c));
  row["AL:WS+FT"] = scores_json(score_network(al_run.network, ds.manifest, s.rated_test));
  std::vector<double> proxy_test;
  for (auto r : s.rated_test) proxy_test.push_back(al.labels[r]);
  row["AL:proxy"] = scores_json(score_predictions(proxy_test, eval.mos));
  return row;
}

json sweep_ablation(const RunConfig& c, const data::SyntheticDataset& ds, const Splits& s) {
  const auto eval = eval_set(ds.manifest, s.rated_test);
  const auto px = learn_proxy(ds.manifest, ds.truth, s, eval, c, c.proxy.strategy);
  json row;
  for (const auto& mask : kAblationRows) {
    const auto run =
        train_model(ds.manifest, s.non_test, px.labels, s.rated_train, c, c.supervision, mask);
    row[fusion::modality_label(mask)] =
        scores_json(score_network(run.network, ds.manifest, s.rated_test));
  }
  return row;
}

json summarize(Experiment e, const json& per_seed, const RunConfig& c) {
  json sum;
  const auto n = per_seed.size();
  if (e == Experiment::AlVsRandom) {
    for (int stage : {1, 2}) {
      std::vector<double> diffs, al, ra;
      for (const auto& r : per_seed) {
        al.push_back(r["rho_al"][stage].get<double>());
        ra.push_back(r["rho_random"][stage].get<double>());
        diffs.push_back(al.back() - ra.back());
      }
      const std::string key = stage == 1 ? "S1" : "S2";
      std::size_t wins = 0;
      for (double d : diffs) wins += d > 0.0;
      sum[key] = {{"mean_rho_al", mean_of(al)},
                  {"mean_rho_random", mean_of(ra)},
                  {"mean_difference", mean_of(diffs)},
                  {"al_wins", wins},
                  {"p_value", metrics::paired_bootstrap_pvalue(diffs, kBootstrapResamples,
                                                               mix_seed(c.seed, stage))}};
    }
    std::size_t apv = 0, picp = 0, both = 0;
    for (const auto& r : per_seed) {
      apv += r["apv_monotone"].get<bool>();
      picp += r["picp_monotone"].get<bool>();
      both += r["apv_monotone"].get<bool>() && r["picp_monotone"].get<bool>();
    }
    sum["calibration_monotone"] = {{"apv", apv}, {"picp", picp}, {"both", both}, {"seeds", n}};
  } else if (e == Experiment::Strategies) {
    std::size_t ordered = 0, above = 0;
    json means;
    for (const char* k : {"EW:WS", "Random:WS", "AL:WS", "AL:WS+FT", "AL:proxy"}) {
      std::vector<double> v;
      for (const auto& r : per_seed) v.push_back(r[k]["pcc"].get<double>());
      means[k] = mean_of(v);
    }
    for (const auto& r : per_seed) {
      const double ew = r["EW:WS"]["pcc"], al = r["AL:WS"]["pcc"], ft = r["AL:WS+FT"]["pcc"];
      ordered += ew <= al && al <= ft;
      above += ft > 0.75;
    }
    sum = {{"mean_pcc", means}, {"ordering_holds", ordered}, {"ft_above_0.75", above}, {"seeds", n}};
  } else {
    std::size_t dominant = 0;
    json means;
    for (const auto& mask : kAblationRows) {
      const auto k = fusion::modality_label(mask);
      std::vector<double> v;
      for (const auto& r : per_seed) v.push_back(r[k]["pcc"].get<double>());
      means[k] = mean_of(v);
    }
    for (const auto& r : per_seed) {
      const double full = r["A+V+T"]["pcc"];
      dominant += full >= r["A"]["pcc"].get<double>() && full >= r["V"]["pcc"].get<double>() &&
                  full >= r["T"]["pcc"].get<double>();
    }
    sum = {{"mean_pcc", means}, {"full_beats_unimodal", dominant}, {"seeds", n}};
  }
  return sum;
}

}  // namespace

std::string run_sweep(const RunConfig& config, Experiment experiment, int seeds,
                      std::ostream& out) {
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  if (!config.manifest.empty()) throw ConfigError("sweeps run on synthetic data; unset 'manifest'");
  const fs::path dir = prepare_run_dir(config);
  json per_seed = json::array();
  for (int i = 0; i < seeds; ++i) {
    RunConfig c = config;
    c.seed = config.seed + static_cast<std::uint64_t>(i);
    const auto ds = data::generate_synthetic(synthetic_spec(c));
    const auto splits = make_splits(ds.manifest, c.holdout_fraction, c.seed);
    json row;
    switch (experiment) {
      case Experiment::AlVsRandom: row = sweep_al_vs_random(c, ds, splits); break;
      case Experiment::Strategies: row = sweep_strategies(c, ds, splits); break;
      case Experiment::Ablation: row = sweep_ablation(c, ds, splits); break;
    }
    row["seed"] = c.seed;
    per_seed.push_back(row);
    out << "seed " << c.seed << " done\n";
  }
  const json j = {{"experiment", std::string(to_string(experiment))},
                  {"seeds", seeds},
                  {"per_seed", per_seed},
                  {"summary", summarize(experiment, per_seed, config)}};
  const std::string text = j.dump(2) + "\n";
  write_text(dir / ("sweep_" + std::string(to_string(experiment)) + ".json"), text);
  out << j["summary"].dump(2) << "\n";
  return text;
}

}  // namespace dubscore::pipeline
