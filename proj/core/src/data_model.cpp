#include "dubscore/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dubscore/errors.hpp"
#include "dubscore/stream_io.hpp"

namespace dubscore::data {

using nlohmann::json;

std::string_view to_string(LanguageDirection dir) {
  return dir == LanguageDirection::EnToHi ? "en-hi" : "hi-en";
}

LanguageDirection parse_language_direction(std::string_view text) {
  if (text == "en-hi" || text == "en->hi" || text == "en→hi") return LanguageDirection::EnToHi;
  if (text == "hi-en" || text == "hi->en" || text == "hi→en") return LanguageDirection::HiToEn;
  throw DataError("unknown language_direction '" + std::string(text) + "'");
}

bool ObjectiveVector::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

double ClipRecord::human_mos() const {
  if (human_ratings.empty()) throw DataError("clip " + clip_id + " has no human ratings");
  double sum = 0.0;
  for (const auto& r : human_ratings) sum += r.score;
  return sum / static_cast<double>(human_ratings.size());
}

void EmbeddingBundle::validate() const {
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    if (streams[s].size() != kStreamDims[s]) {
      throw DataError("dimension mismatch in stream '" + std::string(kStreamNames[s]) +
                      "': expected " + std::to_string(kStreamDims[s]) + ", got " +
                      std::to_string(streams[s].size()));
    }
    if (!streams[s].allFinite()) {
      throw DataError("non-finite entry in stream '" + std::string(kStreamNames[s]) + "'");
    }
  }
}

EmbeddingBundle StreamSet::bundle(std::size_t row) const {
  EmbeddingBundle b;
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    b.streams[s] = tables[s].row(static_cast<Eigen::Index>(row)).transpose().cast<double>();
  }
  return b;
}

std::size_t Manifest::index_of(std::string_view clip_id) const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].clip_id == clip_id) return i;
  }
  throw DataError("unknown clip_id '" + std::string(clip_id) + "'");
}

std::vector<std::size_t> Manifest::rated_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].has_ratings()) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest text format: one JSON object per line. The first line is the header.

namespace {

json record_to_json(const ClipRecord& r) {
  json objective = json::object();
  for (std::size_t i = 0; i < kMetricCount; ++i) objective[std::string(kMetricNames[i])] = r.objective[i];
  json ratings = json::array();
  for (const auto& rs : r.human_ratings) {
    json entry = {{"rater_id", rs.rater_id}, {"score", rs.score}};
    if (!rs.rubric.empty()) entry["rubric"] = rs.rubric;
    ratings.push_back(std::move(entry));
  }
  json j = {{"clip_id", r.clip_id},
            {"language_direction", std::string(to_string(r.language_direction))},
            {"duration_s", r.duration_s},
            {"speaker_id", r.speaker_id},
            {"background_label", r.background_label},
            {"is_ground_truth", r.is_ground_truth},
            {"objective", std::move(objective)},
            {"human_ratings", std::move(ratings)}};
  j["split"] = r.split ? json(*r.split) : json(nullptr);
  return j;
}

ClipRecord record_from_json(const json& j) {
  ClipRecord r;
  r.clip_id = j.at("clip_id").get<std::string>();
  r.language_direction = parse_language_direction(j.at("language_direction").get<std::string>());
  r.duration_s = j.at("duration_s").get<double>();
  r.speaker_id = j.at("speaker_id").get<std::string>();
  r.background_label = j.value("background_label", std::string{});
  r.is_ground_truth = j.value("is_ground_truth", false);
  const auto& obj = j.at("objective");
  if (obj.size() != kMetricCount) {
    throw DataError("clip " + r.clip_id + ": objective vector must have exactly 5 metrics");
  }
  for (std::size_t i = 0; i < kMetricCount; ++i) {
    r.objective[i] = obj.at(std::string(kMetricNames[i])).get<double>();
  }
  if (j.contains("human_ratings")) {
    for (const auto& e : j.at("human_ratings")) {
      RaterScore rs;
      rs.rater_id = e.at("rater_id").get<std::string>();
      rs.score = e.at("score").get<double>();
      if (e.contains("rubric")) rs.rubric = e.at("rubric").get<std::map<std::string, double>>();
      r.human_ratings.push_back(std::move(rs));
    }
  }
  if (j.contains("split") && !j.at("split").is_null()) r.split = j.at("split").get<int>();
  return r;
}

std::string default_stream_file(std::size_t s) { return std::string(kStreamNames[s]) + ".dube"; }

}  // namespace

void validate_manifest(const Manifest& manifest) {
  if (manifest.format_version != kManifestFormatVersion) {
    throw DataError("unsupported manifest format_version " +
                    std::to_string(manifest.format_version));
  }
  std::set<std::string> seen;
  for (const auto& r : manifest.records) {
    if (r.clip_id.empty()) throw DataError("record with empty clip_id");
    if (!seen.insert(r.clip_id).second) throw DataError("duplicate clip_id '" + r.clip_id + "'");
    if (!(r.duration_s > 0.0) || !std::isfinite(r.duration_s)) {
      throw DataError("clip " + r.clip_id + ": duration_s must be positive");
    }
    if (!r.objective.all_finite()) {
      throw DataError("clip " + r.clip_id + ": non-finite objective metric");
    }
    for (const auto& rs : r.human_ratings) {
      if (!(rs.score >= 1.0 && rs.score <= 5.0)) {
        throw DataError("clip " + r.clip_id + ": rating from " + rs.rater_id +
                        " outside [1,5]");
      }
      for (const auto& [aspect, v] : rs.rubric) {
        if (!(v >= 1.0 && v <= 5.0)) {
          throw DataError("clip " + r.clip_id + ": rubric aspect '" + aspect + "' outside [1,5]");
        }
      }
    }
  }
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    const auto& t = manifest.streams.tables[s];
    const std::string name(kStreamNames[s]);
    if (static_cast<std::size_t>(t.rows()) != manifest.records.size()) {
      throw DataError("stream '" + name + "' has " + std::to_string(t.rows()) +
                      " vectors but the manifest has " +
                      std::to_string(manifest.records.size()) + " records");
    }
    if (t.cols() != kStreamDims[s]) {
      const std::string clip =
          manifest.records.empty() ? std::string("<none>") : manifest.records.front().clip_id;
      throw DataError("dimension mismatch in stream '" + name + "' (clip " + clip +
                      "): expected " + std::to_string(kStreamDims[s]) + ", got " +
                      std::to_string(t.cols()));
    }
    for (Eigen::Index row = 0; row < t.rows(); ++row) {
      if (!t.row(row).allFinite()) {
        throw DataError("non-finite entry in stream '" + name + "' (clip " +
                        manifest.records[static_cast<std::size_t>(row)].clip_id + ")");
      }
    }
  }
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("manifest parse error at line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (!have_header) {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != kManifestFormatVersion) {
          throw DataError("unsupported manifest format_version " +
                          std::to_string(m.format_version));
        }
        m.stream_files = j.at("stream_files").get<std::map<std::string, std::string>>();
        have_header = true;
      } else {
        m.records.push_back(record_from_json(j));
      }
    } catch (const json::exception& e) {
      throw DataError("manifest parse error at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw DataError("manifest has no header line: " + path.string());

  const auto dir = path.parent_path();
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    const std::string name(kStreamNames[s]);
    auto it = m.stream_files.find(name);
    if (it == m.stream_files.end()) throw DataError("manifest lists no file for stream '" + name + "'");
    m.streams.tables[s] = read_stream_file(dir / it->second);
  }
  validate_manifest(m);
  return m;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  validate_manifest(manifest);
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::map<std::string, std::string> files = manifest.stream_files;
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    files.try_emplace(std::string(kStreamNames[s]), default_stream_file(s));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  json header = {{"format_version", manifest.format_version},
                 {"stream_files", files},
                 {"count", manifest.records.size()}};
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) out << record_to_json(r).dump() << '\n';
  if (!out) throw DataError("failed writing manifest: " + path.string());
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    write_stream_file(dir / files.at(std::string(kStreamNames[s])), manifest.streams.tables[s]);
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid synthetic settings: " + msg); };
  if (n_clips < 1) fail("n_clips must be >= 1");
  if (latent_dim < 0) fail("latent_dim must be >= 0");
  double sum = 0.0;
  for (double w : true_metric_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail("true_metric_weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail("true_metric_weights must sum to 1");
  if (!(metric_noise_sigma >= 0.0)) fail("metric_noise_sigma must be >= 0");
  if (!(rater_noise_sigma >= 0.0)) fail("rater_noise_sigma must be >= 0");
  if (!(stream_noise_sigma >= 0.0)) fail("stream_noise_sigma must be >= 0");
  if (!(rater_bias_sigma >= 0.0)) fail("rater_bias_sigma must be >= 0");
  if (n_raters < 1) fail("n_raters must be >= 1");
  if (ratings_per_clip < 1 || ratings_per_clip > n_raters) {
    fail("ratings_per_clip must be in [1, n_raters]");
  }
  if (!(aspect_independence >= 0.0 && aspect_independence <= 1.0)) {
    fail("aspect_independence must be in [0,1]");
  }
  if (!(hidden_quality_weight >= 0.0 && hidden_quality_weight <= 1.0)) {
    fail("hidden_quality_weight must be in [0,1]");
  }
  if (!(failure_probability >= 0.0 && failure_probability <= 1.0)) {
    fail("failure_probability must be in [0,1]");
  }
  if (!(failure_shock >= 0.0) || !std::isfinite(failure_shock)) fail("failure_shock must be >= 0");
  if (!(rated_fraction >= 0.0 && rated_fraction <= 1.0)) fail("rated_fraction must be in [0,1]");
  if (!(ground_truth_fraction >= 0.0 && ground_truth_fraction <= 1.0)) {
    fail("ground_truth_fraction must be in [0,1]");
  }
  if (!(en_to_hi_fraction >= 0.0 && en_to_hi_fraction <= 1.0)) {
    fail("en_to_hi_fraction must be in [0,1]");
  }
  if (n_speakers < 1) fail("n_speakers must be >= 1");
}

double TrueQualityTable::at(std::string_view clip_id) const {
  for (std::size_t i = 0; i < clip_ids.size(); ++i) {
    if (clip_ids[i] == clip_id) return quality[i];
  }
  throw DataError("clip '" + std::string(clip_id) + "' not in true-quality table");
}

namespace {

// Raw metric = scale * (aspect + noise) + offset. LogF0RMSE has a negative scale.
constexpr std::array<double, kMetricCount> kMetricScale = {1.5, 0.4, -0.15, 1.8, 0.2};
constexpr std::array<double, kMetricCount> kMetricOffset = {3.0, 0.5, 0.35, 3.0, 0.75};

// Latent layout: [aspect_0..aspect_4, hidden, nuisance...].
constexpr std::size_t kHiddenLatent = kMetricCount;

// Which latent aspects each embedding stream observes.
const std::array<std::vector<std::size_t>, kStreamCount>& stream_signal_latents() {
  static const std::array<std::vector<std::size_t>, kStreamCount> table = {{
      {3, 4, kHiddenLatent},  // audio_content: speech quality, semantics, hidden
      {2},                    // audio_speaker: speaker / prosody consistency
      {1, 2},                 // audio_emotion: emotion, prosody
      {0},                    // video_scene: audio-visual synchrony
      {0, 1},                 // video_face: synchrony, facial emotion
      {4, kHiddenLatent},     // text_semantic: semantics, hidden
  }};
  return table;
}

constexpr std::array<std::string_view, 5> kBackgrounds = {"studio", "street", "music", "crowd",
                                                          "quiet"};

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 gen(spec.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto n = static_cast<std::size_t>(spec.n_clips);
  const auto nuisance = static_cast<std::size_t>(spec.latent_dim);

  // Fixed random linear maps from latents to each stream.
  std::array<Eigen::MatrixXd, kStreamCount> maps;
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    const auto k = stream_signal_latents()[s].size() + nuisance;
    maps[s].resize(kStreamDims[s], static_cast<Eigen::Index>(k));
    const double scale = 1.0 / std::sqrt(static_cast<double>(k));
    for (Eigen::Index i = 0; i < maps[s].size(); ++i) maps[s].data()[i] = normal(gen) * scale;
  }
  std::vector<double> rater_bias(static_cast<std::size_t>(spec.n_raters));
  for (auto& b : rater_bias) b = normal(gen) * spec.rater_bias_sigma;

  SyntheticDataset out;
  auto& m = out.manifest;
  m.records.resize(n);
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    m.streams.tables[s].resize(static_cast<Eigen::Index>(n), kStreamDims[s]);
    m.stream_files[std::string(kStreamNames[s])] = default_stream_file(s);
  }
  out.truth.clip_ids.resize(n);
  out.truth.quality.resize(n);

  const double kappa = spec.aspect_independence;
  const double lambda = spec.hidden_quality_weight;
  Eigen::VectorXd latent(static_cast<Eigen::Index>(kMetricCount + 1 + nuisance));
  for (std::size_t c = 0; c < n; ++c) {
    ClipRecord& r = m.records[c];
    char id[32];
    std::snprintf(id, sizeof id, "c%05zu", c);
    r.clip_id = id;
    r.is_ground_truth = (unit(gen) + 1.0) * 0.5 < spec.ground_truth_fraction;
    r.language_direction =
        (unit(gen) + 1.0) * 0.5 < spec.en_to_hi_fraction ? LanguageDirection::EnToHi
                                                         : LanguageDirection::HiToEn;
    r.duration_s = 1.0 + 4.5 * (unit(gen) + 1.0);
    r.speaker_id = "spk" + std::to_string(static_cast<int>((unit(gen) + 1.0) * 0.5 *
                                                           spec.n_speakers) %
                                          spec.n_speakers);
    r.background_label = std::string(
        kBackgrounds[static_cast<std::size_t>((unit(gen) + 1.0) * 0.5 * kBackgrounds.size()) %
                     kBackgrounds.size()]);

    // Original (non-dubbed) clips sit at the top of the common quality factor.
    const double common = r.is_ground_truth ? 0.5 * (unit(gen) + 1.0) : unit(gen);
    for (std::size_t i = 0; i < kMetricCount; ++i) {
      latent(static_cast<Eigen::Index>(i)) = (1.0 - kappa) * common + kappa * unit(gen);
    }
    if (spec.failure_probability > 0.0 && (unit(gen) + 1.0) * 0.5 < spec.failure_probability) {
      const auto which = static_cast<Eigen::Index>((unit(gen) + 1.0) * 0.5 * kMetricCount) %
                         static_cast<Eigen::Index>(kMetricCount);
      const double drop = spec.failure_shock * (0.75 + 0.25 * unit(gen));
      latent(which) = std::clamp(latent(which) - drop, -1.0, 1.0);
    }
    double weighted = 0.0;
    for (std::size_t i = 0; i < kMetricCount; ++i) {
      weighted += spec.true_metric_weights[i] * latent(static_cast<Eigen::Index>(i));
    }
    const double hidden = unit(gen);
    latent(kHiddenLatent) = hidden;
    for (std::size_t j = 0; j < nuisance; ++j) {
      latent(static_cast<Eigen::Index>(kMetricCount + 1 + j)) = unit(gen);
    }
    const double quality = 3.0 + 2.0 * ((1.0 - lambda) * weighted + lambda * hidden);
    out.truth.clip_ids[c] = r.clip_id;
    out.truth.quality[c] = quality;

    for (std::size_t i = 0; i < kMetricCount; ++i) {
      const double noise = spec.metric_noise_sigma > 0.0 ? normal(gen) * spec.metric_noise_sigma : 0.0;
      double v = kMetricScale[i] * (latent(static_cast<Eigen::Index>(i)) + noise) + kMetricOffset[i];
      if (i == static_cast<std::size_t>(Metric::Utmos)) v = std::clamp(v, 1.0, 5.0);
      if (i == static_cast<std::size_t>(Metric::LogF0Rmse)) v = std::max(v, 0.0);
      r.objective[i] = v;
    }

    for (std::size_t s = 0; s < kStreamCount; ++s) {
      const auto& visible = stream_signal_latents()[s];
      Eigen::VectorXd z(static_cast<Eigen::Index>(visible.size() + nuisance));
      for (std::size_t k = 0; k < visible.size(); ++k) {
        z(static_cast<Eigen::Index>(k)) = latent(static_cast<Eigen::Index>(visible[k]));
      }
      for (std::size_t j = 0; j < nuisance; ++j) {
        z(static_cast<Eigen::Index>(visible.size() + j)) =
            latent(static_cast<Eigen::Index>(kMetricCount + 1 + j));
      }
      Eigen::VectorXd x = maps[s] * z;
      if (spec.stream_noise_sigma > 0.0) {
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += normal(gen) * spec.stream_noise_sigma;
      }
      m.streams.tables[s].row(static_cast<Eigen::Index>(c)) = x.transpose().cast<float>();
    }
  }

  // Human ratings on an exact-size random subset; rater blocks rotate so every rater
  // sees a similar number of clips.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), gen);
  const auto n_rated = static_cast<std::size_t>(std::llround(spec.rated_fraction * static_cast<double>(n)));
  std::vector<std::size_t> rated(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_rated));
  std::sort(rated.begin(), rated.end());
  const auto per_clip = static_cast<std::size_t>(spec.ratings_per_clip);
  const auto n_raters = static_cast<std::size_t>(spec.n_raters);
  for (std::size_t j = 0; j < rated.size(); ++j) {
    ClipRecord& r = m.records[rated[j]];
    const double q = out.truth.quality[rated[j]];
    for (std::size_t t = 0; t < per_clip; ++t) {
      const std::size_t rater = (j * per_clip + t) % n_raters;
      const double raw = q + rater_bias[rater] + normal(gen) * spec.rater_noise_sigma;
      char rid[32];
      std::snprintf(rid, sizeof rid, "r%02zu", rater);
      r.human_ratings.push_back(RaterScore{rid, std::clamp(raw, 1.0, 5.0), {}});
    }
  }
  return out;
}

void write_truth_sidecar(const TrueQualityTable& truth, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write true-quality sidecar: " + path.string());
  out << json{{"non_training_data", true},
              {"note", "hidden synthetic quality; for evaluation oracles only"},
              {"count", truth.clip_ids.size()}}
             .dump()
      << '\n';
  for (std::size_t i = 0; i < truth.clip_ids.size(); ++i) {
    out << json{{"clip_id", truth.clip_ids[i]}, {"quality", truth.quality[i]}}.dump() << '\n';
  }
}

TrueQualityTable read_truth_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open true-quality sidecar: " + path.string());
  TrueQualityTable t;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      if (header) {
        if (!j.value("non_training_data", false)) {
          throw DataError("file is not a true-quality sidecar: " + path.string());
        }
        header = false;
        continue;
      }
      t.clip_ids.push_back(j.at("clip_id").get<std::string>());
      t.quality.push_back(j.at("quality").get<double>());
    } catch (const json::exception& e) {
      throw DataError("sidecar parse error: " + std::string(e.what()));
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Splits

std::vector<Fold> kfold_split(std::size_t count, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
  if (static_cast<std::size_t>(k) > count) {
    throw ConfigError("kfold_split: k=" + std::to_string(k) + " exceeds record count " +
                      std::to_string(count));
  }
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 gen(seed);
  std::shuffle(order.begin(), order.end(), gen);

  const auto kk = static_cast<std::size_t>(k);
  std::vector<std::vector<std::size_t>> parts(kk);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < kk; ++f) {
    const std::size_t size = count / kk + (f < count % kk ? 1 : 0);
    parts[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                    order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(parts[f].begin(), parts[f].end());
    pos += size;
  }
  std::vector<Fold> folds(kk);
  for (std::size_t f = 0; f < kk; ++f) {
    folds[f].validation = parts[f];
    for (std::size_t g = 0; g < kk; ++g) {
      if (g != f) folds[f].train.insert(folds[f].train.end(), parts[g].begin(), parts[g].end());
    }
    std::sort(folds[f].train.begin(), folds[f].train.end());
  }
  return folds;
}

Holdout holdout_split(std::size_t count, double fraction, std::uint64_t seed) {
  if (count == 0) throw DataError("holdout_split: empty input");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("holdout_split: fraction must be in (0,1)");
  }
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 gen(seed);
  std::shuffle(order.begin(), order.end(), gen);
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  Holdout h;
  h.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  h.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(h.train.begin(), h.train.end());
  std::sort(h.test.begin(), h.test.end());
  return h;
}

}  // namespace dubscore::data
