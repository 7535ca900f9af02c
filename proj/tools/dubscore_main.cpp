#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "dubscore/errors.hpp"
#include "dubscore/pipeline.hpp"

namespace {

using namespace dubscore;
using namespace dubscore::pipeline;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonFlags {
  std::string config;
  std::string scale;
  std::optional<std::uint64_t> seed;
  std::string runs_dir;
  std::string manifest;
  std::string strategy;
  std::string supervision;
  std::optional<std::size_t> budget;
  std::string modalities;
  std::optional<int> epochs;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("-c,--config", f.config, "JSON config file (overlaid on the scale preset)");
  cmd->add_option("--scale", f.scale, "Preset: full, desk or fast");
  cmd->add_option("--seed", f.seed, "Master seed");
  cmd->add_option("--runs-dir", f.runs_dir, "Parent directory of run directories");
  cmd->add_option("--manifest", f.manifest, "External manifest instead of the run's synthetic data");
  cmd->add_option("--strategy", f.strategy, "Proxy weights: EW, AL or Random");
  cmd->add_option("--supervision", f.supervision, "WS or WS+FT");
  cmd->add_option("--budget", f.budget, "Active learning label budget");
  cmd->add_option("--modalities", f.modalities, "Modality subset, e.g. A+V+T or A+T");
  cmd->add_option("--epochs", f.epochs, "Weak-supervision training epochs");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Precedence: scale preset, then the config file, then flags.
RunConfig resolve(const CommonFlags& f) {
  std::string text;
  Scale scale = Scale::Desk;
  if (!f.config.empty()) {
    text = read_file(f.config);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + f.config + "' is not valid JSON: " + e.what());
    }
    if (doc.is_object() && doc.contains("scale") && doc["scale"].is_string()) {
      scale = parse_scale(doc["scale"].get<std::string>());
    }
  }
  if (!f.scale.empty()) scale = parse_scale(f.scale);
  RunConfig c = preset(scale);
  if (!text.empty()) c = apply_json(c, text);
  c.scale = scale;
  if (f.seed) c.seed = *f.seed;
  if (!f.runs_dir.empty()) c.runs_dir = f.runs_dir;
  if (!f.manifest.empty()) c.manifest = f.manifest;
  if (!f.strategy.empty()) c.proxy.strategy = parse_strategy(f.strategy);
  if (!f.supervision.empty()) c.supervision = parse_supervision(f.supervision);
  if (f.budget) c.proxy.budget = *f.budget;
  if (!f.modalities.empty()) c.network.modalities = fusion::parse_modalities(f.modalities);
  if (f.epochs) c.network.epochs = *f.epochs;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DubScore: multimodal dubbing quality prediction with Proxy MOS supervision"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus into the run directory");
  auto* proxy = app.add_subcommand("proxy-learn", "Learn Proxy MOS weights (EW, AL or Random)");
  auto* train = app.add_subcommand("train", "Weakly supervised training on Proxy MOS labels");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune the WS network on human MOS");
  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on held-out clips");
  auto* report = app.add_subcommand("report", "Assemble report.txt and results.json");
  auto* sweep = app.add_subcommand("sweep", "Repeat an experiment over seeds");
  auto* config = app.add_subcommand("config", "Print the resolved config and run directory");
  for (auto* cmd : {synth, proxy, train, finetune, evaluate, report, sweep, config}) {
    add_common(cmd, flags);
  }

  EvaluateOptions eval;
  evaluate->add_flag("--kfold", eval.kfold, "k-fold cross-validation over the rated clips");
  evaluate->add_flag("--ablation", eval.ablation, "Train and score every modality subset");
  evaluate->add_option("--split", eval.split, "Clips to score: test or train");
  evaluate->add_flag("--allow-train-eval", eval.allow_train_eval,
                     "Permit scoring clips seen in training");
  evaluate->add_option("--checkpoint", eval.checkpoint, "Network checkpoint to score");

  std::string experiment = "al-vs-random";
  int seeds = 20;
  sweep->add_option("--experiment", experiment, "strategies, ablation or al-vs-random");
  sweep->add_option("--seeds", seeds, "Number of seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    const RunConfig cfg = resolve(flags);
    if (*synth) cmd_synth(cfg, std::cout);
    if (*proxy) cmd_proxy_learn(cfg, std::cout);
    if (*train) cmd_train(cfg, std::cout);
    if (*finetune) cmd_finetune(cfg, std::cout);
    if (*evaluate) cmd_evaluate(cfg, eval, std::cout);
    if (*report) cmd_report(cfg, std::cout);
    if (*sweep) run_sweep(cfg, parse_experiment(experiment), seeds, std::cout);
    if (*config) std::cout << to_json(cfg) << "run directory: " << run_dir(cfg).string() << "\n";
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return 0;
}
