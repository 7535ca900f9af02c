#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dubscore/errors.hpp"
#include "dubscore/pipeline.hpp"
#include "dubscore/random.hpp"

namespace dubscore::pipeline {

using nlohmann::json;

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::EW: return "EW";
    case Strategy::AL: return "AL";
    case Strategy::Random: return "Random";
  }
  return "?";
}

std::string_view to_string(Supervision s) { return s == Supervision::WS ? "WS" : "WS+FT"; }

std::string_view to_string(Scale s) {
  switch (s) {
    case Scale::Full: return "full";
    case Scale::Desk: return "desk";
    case Scale::Fast: return "fast";
  }
  return "?";
}

Strategy parse_strategy(std::string_view s) {
  if (s == "EW") return Strategy::EW;
  if (s == "AL") return Strategy::AL;
  if (s == "Random" || s == "Ra") return Strategy::Random;
  throw ConfigError("unknown strategy '" + std::string(s) + "' (expected EW, AL or Random)");
}

Supervision parse_supervision(std::string_view s) {
  if (s == "WS") return Supervision::WS;
  if (s == "WS+FT") return Supervision::WSFT;
  throw ConfigError("unknown supervision '" + std::string(s) + "' (expected WS or WS+FT)");
}

Scale parse_scale(std::string_view s) {
  if (s == "full") return Scale::Full;
  if (s == "desk") return Scale::Desk;
  if (s == "fast") return Scale::Fast;
  throw ConfigError("unknown scale '" + std::string(s) + "' (expected full, desk or fast)");
}

RunConfig preset(Scale scale) {
  RunConfig c;
  c.scale = scale;
  auto& s = c.synthetic;
  s.aspect_independence = 0.3;
  s.hidden_quality_weight = 0.25;
  s.failure_probability = 0.3;
  s.failure_shock = 2.0;
  s.metric_noise_sigma = 0.1;
  switch (scale) {
    case Scale::Full:
      s.n_clips = 12000;
      c.proxy.budget = 300;
      break;
    case Scale::Desk:
      s.n_clips = 600;
      break;
    case Scale::Fast:
      s.n_clips = 600;
      c.network.shared_dim = 64;
      c.network.n_layers = 2;
      c.network.ffn_dim = 128;
      c.network.epochs = 30;
      c.network.learning_rate = 1e-3;
      break;
  }
  return c;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid run config: " + m); };
  synthetic.validate();
  network.validate();
  if (proxy.budget < 10) fail("proxy.budget must be >= 10");
  if (proxy.ensemble_size < 1) fail("proxy.ensemble_size must be >= 1");
  if (proxy.oracle != "recorded" && proxy.oracle != "simulated") {
    fail("proxy.oracle must be 'recorded' or 'simulated'");
  }
  if (proxy.oracle_ratings < 1) fail("proxy.oracle_ratings must be >= 1");
  if (!(proxy.oracle_sigma >= 0.0)) fail("proxy.oracle_sigma must be >= 0");
  if (!(proxy.interval_level > 0.0 && proxy.interval_level < 1.0)) {
    fail("proxy.interval_level must be in (0,1)");
  }
  if (proxy.restarts < 1) fail("proxy.restarts must be >= 1");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) fail("holdout_fraction must be in (0,1)");
  if (folds < 2) fail("folds must be >= 2");
  if (finetune.epochs && *finetune.epochs < 0) fail("finetune.epochs must be >= 0");
  if (finetune.learning_rate && !(*finetune.learning_rate > 0.0)) {
    fail("finetune.learning_rate must be > 0");
  }
  if (finetune.batch_size && *finetune.batch_size < 1) fail("finetune.batch_size must be >= 1");
  if (runs_dir.empty()) fail("runs_dir must not be empty");
}

namespace {

[[noreturn]] void type_error(const std::string& key, const char* what) {
  throw ConfigError("config key '" + key + "' must be " + what);
}

int as_int(const json& j, const std::string& key) {
  if (!j.is_number_integer()) type_error(key, "an integer");
  return j.get<int>();
}

std::uint64_t as_u64(const json& j, const std::string& key) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
    type_error(key, "a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

double as_double(const json& j, const std::string& key) {
  if (!j.is_number()) type_error(key, "a number");
  return j.get<double>();
}

std::string as_string(const json& j, const std::string& key) {
  if (!j.is_string()) type_error(key, "a string");
  return j.get<std::string>();
}

using Setter = std::function<void(const json&, const std::string&)>;

void apply_object(const json& obj, const std::string& prefix,
                  const std::map<std::string, Setter>& setters) {
  if (!obj.is_object()) type_error(prefix.empty() ? "<root>" : prefix, "an object");
  for (const auto& [key, value] : obj.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + path + "'");
    it->second(value, path);
  }
}

}  // namespace

RunConfig apply_json(const RunConfig& base, const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c = base;
  auto& s = c.synthetic;
  auto& n = c.network;
  auto& p = c.proxy;
  auto& f = c.finetune;

  const std::map<std::string, Setter> synth = {
      {"n_clips", [&](const json& j, const std::string& k) { s.n_clips = as_int(j, k); }},
      {"latent_dim", [&](const json& j, const std::string& k) { s.latent_dim = as_int(j, k); }},
      {"true_metric_weights",
       [&](const json& j, const std::string& k) {
         if (!j.is_array() || j.size() != data::kMetricCount) type_error(k, "an array of 5 numbers");
         for (std::size_t i = 0; i < data::kMetricCount; ++i) {
           s.true_metric_weights[i] = as_double(j[i], k);
         }
       }},
      {"metric_noise_sigma",
       [&](const json& j, const std::string& k) { s.metric_noise_sigma = as_double(j, k); }},
      {"rater_noise_sigma",
       [&](const json& j, const std::string& k) { s.rater_noise_sigma = as_double(j, k); }},
      {"n_raters", [&](const json& j, const std::string& k) { s.n_raters = as_int(j, k); }},
      {"aspect_independence",
       [&](const json& j, const std::string& k) { s.aspect_independence = as_double(j, k); }},
      {"hidden_quality_weight",
       [&](const json& j, const std::string& k) { s.hidden_quality_weight = as_double(j, k); }},
      {"failure_probability",
       [&](const json& j, const std::string& k) { s.failure_probability = as_double(j, k); }},
      {"failure_shock",
       [&](const json& j, const std::string& k) { s.failure_shock = as_double(j, k); }},
      {"stream_noise_sigma",
       [&](const json& j, const std::string& k) { s.stream_noise_sigma = as_double(j, k); }},
      {"rated_fraction",
       [&](const json& j, const std::string& k) { s.rated_fraction = as_double(j, k); }},
      {"ratings_per_clip",
       [&](const json& j, const std::string& k) { s.ratings_per_clip = as_int(j, k); }},
      {"rater_bias_sigma",
       [&](const json& j, const std::string& k) { s.rater_bias_sigma = as_double(j, k); }},
      {"ground_truth_fraction",
       [&](const json& j, const std::string& k) { s.ground_truth_fraction = as_double(j, k); }},
      {"en_to_hi_fraction",
       [&](const json& j, const std::string& k) { s.en_to_hi_fraction = as_double(j, k); }},
      {"n_speakers", [&](const json& j, const std::string& k) { s.n_speakers = as_int(j, k); }},
  };
  const std::map<std::string, Setter> net = {
      {"shared_dim", [&](const json& j, const std::string& k) { n.shared_dim = as_int(j, k); }},
      {"lora_rank", [&](const json& j, const std::string& k) { n.lora_rank = as_int(j, k); }},
      {"lora_alpha", [&](const json& j, const std::string& k) { n.lora_alpha = as_double(j, k); }},
      {"n_layers", [&](const json& j, const std::string& k) { n.n_layers = as_int(j, k); }},
      {"n_heads", [&](const json& j, const std::string& k) { n.n_heads = as_int(j, k); }},
      {"ffn_dim", [&](const json& j, const std::string& k) { n.ffn_dim = as_int(j, k); }},
      {"dropout", [&](const json& j, const std::string& k) { n.dropout = as_double(j, k); }},
      {"learning_rate",
       [&](const json& j, const std::string& k) { n.learning_rate = as_double(j, k); }},
      {"batch_size", [&](const json& j, const std::string& k) { n.batch_size = as_int(j, k); }},
      {"epochs", [&](const json& j, const std::string& k) { n.epochs = as_int(j, k); }},
      {"modalities",
       [&](const json& j, const std::string& k) {
         n.modalities = fusion::parse_modalities(as_string(j, k));
       }},
      {"frozen_groups",
       [&](const json& j, const std::string& k) {
         if (!j.is_array()) type_error(k, "an array of group names");
         n.frozen_groups = 0;
         for (const auto& g : j) {
           n.frozen_groups |= static_cast<unsigned>(fusion::parse_param_group(as_string(g, k)));
         }
       }},
  };
  const std::map<std::string, Setter> prox = {
      {"strategy",
       [&](const json& j, const std::string& k) { p.strategy = parse_strategy(as_string(j, k)); }},
      {"budget",
       [&](const json& j, const std::string& k) {
         p.budget = static_cast<std::size_t>(as_u64(j, k));
       }},
      {"ensemble_size", [&](const json& j, const std::string& k) { p.ensemble_size = as_int(j, k); }},
      {"oracle", [&](const json& j, const std::string& k) { p.oracle = as_string(j, k); }},
      {"oracle_ratings",
       [&](const json& j, const std::string& k) { p.oracle_ratings = as_int(j, k); }},
      {"oracle_sigma", [&](const json& j, const std::string& k) { p.oracle_sigma = as_double(j, k); }},
      {"interval_level",
       [&](const json& j, const std::string& k) { p.interval_level = as_double(j, k); }},
      {"restarts", [&](const json& j, const std::string& k) { p.restarts = as_int(j, k); }},
  };
  const std::map<std::string, Setter> fine = {
      {"epochs",
       [&](const json& j, const std::string& k) {
         f.epochs = j.is_null() ? std::nullopt : std::optional<int>(as_int(j, k));
       }},
      {"learning_rate",
       [&](const json& j, const std::string& k) {
         f.learning_rate = j.is_null() ? std::nullopt : std::optional<double>(as_double(j, k));
       }},
      {"batch_size",
       [&](const json& j, const std::string& k) {
         f.batch_size = j.is_null() ? std::nullopt : std::optional<int>(as_int(j, k));
       }},
  };
  const std::map<std::string, Setter> top = {
      {"scale", [&](const json& j, const std::string& k) { c.scale = parse_scale(as_string(j, k)); }},
      {"seed", [&](const json& j, const std::string& k) { c.seed = as_u64(j, k); }},
      {"runs_dir", [&](const json& j, const std::string& k) { c.runs_dir = as_string(j, k); }},
      {"manifest", [&](const json& j, const std::string& k) { c.manifest = as_string(j, k); }},
      {"supervision",
       [&](const json& j, const std::string& k) {
         c.supervision = parse_supervision(as_string(j, k));
       }},
      {"holdout_fraction",
       [&](const json& j, const std::string& k) { c.holdout_fraction = as_double(j, k); }},
      {"folds", [&](const json& j, const std::string& k) { c.folds = as_int(j, k); }},
      {"synthetic", [&](const json& j, const std::string& k) { apply_object(j, k, synth); }},
      {"network", [&](const json& j, const std::string& k) { apply_object(j, k, net); }},
      {"proxy", [&](const json& j, const std::string& k) { apply_object(j, k, prox); }},
      {"finetune", [&](const json& j, const std::string& k) { apply_object(j, k, fine); }},
  };
  try {
    apply_object(root, "", top);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value out of range: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_json(base, ss.str());
}

namespace {

json to_json_object(const RunConfig& c) {
  json j;
  j["scale"] = std::string(to_string(c.scale));
  j["seed"] = c.seed;
  j["runs_dir"] = c.runs_dir;
  j["manifest"] = c.manifest;
  j["supervision"] = std::string(to_string(c.supervision));
  j["holdout_fraction"] = c.holdout_fraction;
  j["folds"] = c.folds;
  const auto& s = c.synthetic;
  j["synthetic"] = {
      {"n_clips", s.n_clips},
      {"latent_dim", s.latent_dim},
      {"true_metric_weights", s.true_metric_weights},
      {"metric_noise_sigma", s.metric_noise_sigma},
      {"rater_noise_sigma", s.rater_noise_sigma},
      {"n_raters", s.n_raters},
      {"aspect_independence", s.aspect_independence},
      {"hidden_quality_weight", s.hidden_quality_weight},
      {"failure_probability", s.failure_probability},
      {"failure_shock", s.failure_shock},
      {"stream_noise_sigma", s.stream_noise_sigma},
      {"rated_fraction", s.rated_fraction},
      {"ratings_per_clip", s.ratings_per_clip},
      {"rater_bias_sigma", s.rater_bias_sigma},
      {"ground_truth_fraction", s.ground_truth_fraction},
      {"en_to_hi_fraction", s.en_to_hi_fraction},
      {"n_speakers", s.n_speakers},
  };
  const auto& n = c.network;
  json frozen = json::array();
  for (auto g : {fusion::ParamGroup::Projection, fusion::ParamGroup::Lora, fusion::ParamGroup::Intra,
                 fusion::ParamGroup::Inter, fusion::ParamGroup::Transformer,
                 fusion::ParamGroup::Head}) {
    if (n.is_frozen(g)) frozen.push_back(std::string(fusion::to_string(g)));
  }
  j["network"] = {
      {"shared_dim", n.shared_dim},       {"lora_rank", n.lora_rank},
      {"lora_alpha", n.lora_alpha},       {"n_layers", n.n_layers},
      {"n_heads", n.n_heads},             {"ffn_dim", n.ffn_dim},
      {"dropout", n.dropout},             {"learning_rate", n.learning_rate},
      {"batch_size", n.batch_size},       {"epochs", n.epochs},
      {"modalities", fusion::modality_label(n.modalities)},
      {"frozen_groups", frozen},
  };
  const auto& p = c.proxy;
  j["proxy"] = {
      {"strategy", std::string(to_string(p.strategy))},
      {"budget", p.budget},
      {"ensemble_size", p.ensemble_size},
      {"oracle", p.oracle},
      {"oracle_ratings", p.oracle_ratings},
      {"oracle_sigma", p.oracle_sigma},
      {"interval_level", p.interval_level},
      {"restarts", p.restarts},
  };
  const auto& f = c.finetune;
  j["finetune"] = {
      {"epochs", f.epochs ? json(*f.epochs) : json(nullptr)},
      {"learning_rate", f.learning_rate ? json(*f.learning_rate) : json(nullptr)},
      {"batch_size", f.batch_size ? json(*f.batch_size) : json(nullptr)},
  };
  return j;
}

}  // namespace

std::string to_json(const RunConfig& config) { return to_json_object(config).dump(2) + "\n"; }

std::string run_id(const RunConfig& config) {
  json j = to_json_object(config);
  // WS and WS+FT share a run; supervision only selects what evaluation reads.
  j.erase("runs_dir");
  j.erase("supervision");
  const std::uint64_t h = splitmix64(fnv1a(j.dump()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "run-%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path run_dir(const RunConfig& config) {
  return std::filesystem::path(config.runs_dir) / run_id(config);
}

}  // namespace dubscore::pipeline
