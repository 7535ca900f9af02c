#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dubscore::data {

enum class LanguageDirection { EnToHi, HiToEn };

std::string_view to_string(LanguageDirection dir);
LanguageDirection parse_language_direction(std::string_view text);

// Objective metrics, in the fixed order used everywhere (arrays, files, weight vectors).
inline constexpr std::size_t kMetricCount = 5;
enum class Metric : std::size_t { Peavs = 0, EmoSync, LogF0Rmse, Utmos, SpeechBert };
inline constexpr std::array<std::string_view, kMetricCount> kMetricNames = {
    "peavs", "emosync", "logf0rmse", "utmos", "speechbert"};
// +1 when larger raw values mean better quality, -1 otherwise.
inline constexpr std::array<int, kMetricCount> kMetricSigns = {+1, +1, -1, +1, +1};

struct ObjectiveVector {
  std::array<double, kMetricCount> values{};

  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](Metric m) const { return values[static_cast<std::size_t>(m)]; }
  bool all_finite() const;
};

struct RaterScore {
  std::string rater_id;
  double score = 0.0;
  // Optional rubric aspects (synchrony, speaker consistency, ...), each in [1,5].
  std::map<std::string, double> rubric;
};

struct ClipRecord {
  std::string clip_id;
  LanguageDirection language_direction = LanguageDirection::EnToHi;
  double duration_s = 0.0;
  std::string speaker_id;
  std::string background_label;
  bool is_ground_truth = false;
  ObjectiveVector objective;
  std::vector<RaterScore> human_ratings;
  std::optional<int> split;

  bool has_ratings() const { return !human_ratings.empty(); }
  // Mean of the rater scores. Throws DataError when the clip is unrated.
  double human_mos() const;
};

// Six pre-pooled embedding streams: audio x3, video x2, text x1.
inline constexpr std::size_t kStreamCount = 6;
enum class Stream : std::size_t {
  AudioContent = 0,
  AudioSpeaker,
  AudioEmotion,
  VideoScene,
  VideoFace,
  TextSemantic
};
inline constexpr std::array<std::string_view, kStreamCount> kStreamNames = {
    "audio_content", "audio_speaker", "audio_emotion",
    "video_scene",   "video_face",    "text_semantic"};
inline constexpr std::array<int, kStreamCount> kStreamDims = {768, 192, 256, 768, 512, 768};

inline constexpr std::size_t kModalityCount = 3;
enum class Modality : std::size_t { Audio = 0, Video, Text };
inline constexpr std::array<std::string_view, kModalityCount> kModalityNames = {"audio", "video",
                                                                               "text"};
inline constexpr std::array<Modality, kStreamCount> kStreamModality = {
    Modality::Audio, Modality::Audio, Modality::Audio,
    Modality::Video, Modality::Video, Modality::Text};

using StreamMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EmbeddingBundle {
  std::array<Eigen::VectorXd, kStreamCount> streams;

  // Checks dimensions and finiteness; throws DataError naming the stream.
  void validate() const;
};

// Per-stream embedding tables, one row per manifest record (same order).
struct StreamSet {
  std::array<StreamMatrix, kStreamCount> tables;

  std::size_t count() const { return static_cast<std::size_t>(tables[0].rows()); }
  EmbeddingBundle bundle(std::size_t row) const;
};

inline constexpr int kManifestFormatVersion = 1;

struct Manifest {
  int format_version = kManifestFormatVersion;
  std::vector<ClipRecord> records;
  // Stream name -> file path, relative to the manifest directory.
  std::map<std::string, std::string> stream_files;
  StreamSet streams;

  std::size_t size() const { return records.size(); }
  // Index of a clip id; throws DataError if absent.
  std::size_t index_of(std::string_view clip_id) const;
  std::vector<std::size_t> rated_indices() const;
};

// Reads a manifest and its stream files and validates every invariant.
Manifest load_manifest(const std::filesystem::path& path);

// Writes the manifest plus one binary file per stream next to it. Stream file names
// are taken from manifest.stream_files, or defaulted to "<stream>.dube".
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Checks record-level invariants (positive duration, unique ids, rating ranges,
// finite metrics, stream shapes). Throws DataError.
void validate_manifest(const Manifest& manifest);

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
  int n_clips = 600;
  int latent_dim = 8;  // nuisance latents mixed into every stream
  std::array<double, kMetricCount> true_metric_weights = {0.40, 0.05, 0.10, 0.35, 0.10};
  double metric_noise_sigma = 0.3;
  double rater_noise_sigma = 0.5;
  int n_raters = 30;
  std::uint64_t seed = 1;

  // Latent quality aspects a_i = (1 - k) c + k e_i with c shared and e_i independent.
  // k = 0 makes every metric a function of the common factor alone.
  double aspect_independence = 0.7;
  // Share of human quality driven by an aspect no objective metric measures.
  double hidden_quality_weight = 0.0;
  // With this probability one aspect of a clip drops by U(shock/2, shock), so that
  // the metrics disagree on a minority of clips. Aspects are clipped to [-1, 1].
  double failure_probability = 0.0;
  double failure_shock = 1.5;
  double stream_noise_sigma = 0.05;
  double rated_fraction = 0.5;
  int ratings_per_clip = 10;
  double rater_bias_sigma = 0.0;
  double ground_truth_fraction = 1.0 / 6.0;
  double en_to_hi_fraction = 0.6;
  int n_speakers = 40;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
};

// Hidden per-clip quality. Never part of the manifest.
struct TrueQualityTable {
  std::vector<std::string> clip_ids;
  std::vector<double> quality;

  double at(std::string_view clip_id) const;
};

struct SyntheticDataset {
  Manifest manifest;
  TrueQualityTable truth;
};

SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

void write_truth_sidecar(const TrueQualityTable& truth, const std::filesystem::path& path);
TrueQualityTable read_truth_sidecar(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Splits. Partitions are index lists into the caller's record sequence.

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Folds are disjoint and exhaustive; sizes differ by at most one.
std::vector<Fold> kfold_split(std::size_t count, int k, std::uint64_t seed);

inline constexpr int kDefaultFolds = 4;

struct Holdout {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// train size = round(fraction * count).
Holdout holdout_split(std::size_t count, double fraction, std::uint64_t seed);

}  // namespace dubscore::data
