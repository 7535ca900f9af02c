#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "dubscore/errors.hpp"
#include "dubscore/pipeline.hpp"

namespace dubscore::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<json> try_read(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string num(const json& v, int prec = 3) {
  if (!v.is_number()) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v.get<double>();
  return os.str();
}

void rule(std::ostream& os) { os << std::string(64, '-') << "\n"; }

void dataset_section(const json& s, std::ostream& os) {
  os << "Dataset\n";
  rule(os);
  os << "clips " << s["clips"] << " (en-hi " << s["en-hi"] << ", hi-en " << s["hi-en"] << ")\n"
     << "human-rated " << s["rated"] << " (" << num(100.0 * s["rated_fraction"].get<double>(), 1)
     << "%), ground-truth originals " << s["ground_truth"] << "\n\n";
}

void proxy_section(const json& p, std::ostream& os) {
  os << "Proxy MOS weights (" << p["strategy"].get<std::string>() << ")\n";
  rule(os);
  for (auto name : data::kMetricNames) {
    const std::string key(name);
    os << std::left << std::setw(12) << key << std::right << num(p["weights"]["w"][key]) << "\n";
  }
  os << "held-out rho vs human MOS " << num(p["test_rho"]) << "\n";
  if (!p["stages"].empty()) {
    os << "\nStage  labeled  rho    test rho  APV      PICP    MPIW   ECE\n";
    for (const auto& s : p["stages"]) {
      os << std::left << std::setw(7) << s["stage"].get<std::string>() << std::right
         << std::setw(7) << s["labeled"] << "  " << num(s["achieved_rho"]) << "  "
         << std::setw(8) << num(s["eval_rho"]) << "  " << num(s["apv"], 5) << "  "
         << num(100.0 * s["picp"].get<double>(), 1) << "%  " << num(s["mpiw"]) << "  "
         << num(s["ece"]) << "\n";
    }
  }
  os << "\n";
}

void scores_line(const std::string& label, const json& sc, std::ostream& os) {
  os << std::left << std::setw(14) << label << std::right << num(sc["pcc"]) << "  "
     << num(sc["srcc"]) << "  " << num(sc["mse"]) << "  " << num(sc["r2"]) << "\n";
}

void evaluation_section(const json& e, std::ostream& os) {
  os << "Held-out evaluation (" << e["split"].get<std::string>() << ", "
     << e["model"]["n"] << " clips)\n";
  rule(os);
  os << "Model         PCC    SRCC   MSE    R2\n";
  scores_line("DubScore", e["model"], os);
  os << "\nSingle-metric baselines  PCC    SRCC\n";
  for (const auto& b : e["baselines"]) {
    os << std::left << std::setw(25) << b["metric"].get<std::string>() << std::right
       << num(b["pcc"]) << "  " << num(b["srcc"]) << "\n";
  }
  const auto& a = e["agreement"];
  os << "\nRater agreement: alpha " << num(a["cronbach_alpha"]) << ", ICC(1,1) " << num(a["icc1"])
     << ", ICC(2,1) " << num(a["icc2"]) << "\n\n";
}

void kfold_section(const json& k, std::ostream& os) {
  os << k["folds"] << "-fold cross-validation (" << k["strategy"].get<std::string>() << ", "
     << k["supervision"].get<std::string>() << ")\n";
  rule(os);
  os << "Fold          PCC    SRCC   MSE    R2\n";
  for (const auto& f : k["per_fold"]) scores_line(std::to_string(f["fold"].get<int>()), f["scores"], os);
  const auto& s = k["summary"];
  os << "mean PCC " << num(s["pcc_mean"]) << " +/- " << num(s["pcc_sd"]) << ", SRCC "
     << num(s["srcc_mean"]) << " +/- " << num(s["srcc_sd"]) << "\n\n";
}

void ablation_section(const json& a, std::ostream& os) {
  os << "Modality ablation (" << a["supervision"].get<std::string>() << ")\n";
  rule(os);
  os << "Modalities    PCC    SRCC   MSE    R2\n";
  for (const auto& r : a["rows"]) scores_line(r["modalities"].get<std::string>(), r["scores"], os);
  os << "\n";
}

void sweep_section(const json& s, std::ostream& os) {
  os << "Sweep " << s["experiment"].get<std::string>() << " over " << s["seeds"] << " seeds\n";
  rule(os);
  os << s["summary"].dump(2) << "\n\n";
}

}  // namespace

void cmd_report(const RunConfig& config, std::ostream& out) {
  config.validate();
  const fs::path dir = run_dir(config);
  if (!fs::exists(dir)) {
    throw DataError("missing artifact: " + dir.string() + " (run a pipeline command first)");
  }
  std::ostringstream text;
  json results;
  results["run_id"] = run_id(config);
  const std::pair<const char*, void (*)(const json&, std::ostream&)> sections[] = {
      {"synth_summary", dataset_section},
      {"proxy_history", proxy_section},
      {"evaluation_test", evaluation_section},
      {"evaluation_train", evaluation_section},
      {"evaluation_kfold", kfold_section},
      {"evaluation_ablation", ablation_section},
      {"sweep_al-vs-random", sweep_section},
      {"sweep_strategies", sweep_section},
      {"sweep_ablation", sweep_section},
  };
  text << "DubScore report for " << results["run_id"].get<std::string>() << "\n\n";
  std::size_t found = 0;
  for (const auto& [name, emit] : sections) {
    const auto doc = try_read(dir / (std::string(name) + ".json"));
    if (!doc) continue;
    ++found;
    results[name] = *doc;
    emit(*doc, text);
  }
  for (const char* log : {"train_log", "finetune_log"}) {
    if (auto doc = try_read(dir / (std::string(log) + ".json"))) {
      results[log] = {{"initial_loss", (*doc)["initial_loss"]},
                      {"final_loss", (*doc)["final_loss"]},
                      {"epochs", (*doc)["epoch_loss"].size()}};
    }
  }
  if (found == 0) throw DataError("no results found in " + dir.string());
  {
    std::ofstream f(dir / "report.txt", std::ios::trunc);
    f << text.str();
  }
  {
    std::ofstream f(dir / "results.json", std::ios::trunc);
    f << results.dump(2) << "\n";
  }
  out << text.str();
}

}  // namespace dubscore::pipeline
