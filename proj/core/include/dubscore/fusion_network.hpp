#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dubscore/data_model.hpp"

namespace dubscore::fusion {

using data::kModalityCount;
using data::kStreamCount;

enum class ParamGroup : unsigned {
  Projection = 1u << 0,
  Lora = 1u << 1,
  Intra = 1u << 2,
  Inter = 1u << 3,
  Transformer = 1u << 4,
  Head = 1u << 5,
};

std::string_view to_string(ParamGroup g);
ParamGroup parse_param_group(std::string_view name);

using ModalityMask = std::array<bool, kModalityCount>;
inline constexpr ModalityMask kAllModalities = {true, true, true};

// "A+V+T", "A", "V+T", ... <-> mask.
std::string modality_label(const ModalityMask& mask);
ModalityMask parse_modalities(std::string_view label);

struct NetworkConfig {
  int shared_dim = 256;
  int lora_rank = 16;
  double lora_alpha = 16.0;
  int n_layers = 3;
  int n_heads = 4;
  int ffn_dim = 1024;
  double dropout = 0.2;
  double learning_rate = 1e-4;
  int batch_size = 64;
  int epochs = 50;
  std::uint64_t seed = 0;
  ModalityMask modalities = kAllModalities;
  // Bitwise OR of ParamGroup values excluded from optimization.
  unsigned frozen_groups = static_cast<unsigned>(ParamGroup::Projection);

  double lora_scale() const { return lora_alpha / lora_rank; }
  bool is_frozen(ParamGroup g) const { return (frozen_groups & static_cast<unsigned>(g)) != 0; }
  // Throws ConfigError.
  void validate() const;
};

// Low-rank adapter for one stream: h~ = P h + (alpha / r) B (A h).
struct StreamAdapter {
  Eigen::MatrixXd projection;  // d x d_in
  Eigen::MatrixXd lora_down;   // r x d_in
  Eigen::MatrixXd lora_up;     // d x r (zero at init)
};

struct IntraFusionParams {
  std::array<Eigen::MatrixXd, kModalityCount> attention;  // each d x 1
};

struct InterGateParams {
  std::array<Eigen::MatrixXd, kModalityCount> weight;  // each d x 1
  Eigen::MatrixXd bias;                                // 3 x 1
};

struct TransformerLayer {
  Eigen::MatrixXd ln1_gain, ln1_bias;  // 1 x d
  Eigen::MatrixXd wq, wk, wv, wo;      // d x d, applied as X W
  Eigen::MatrixXd bq, bk, bv, bo;      // 1 x d
  Eigen::MatrixXd ln2_gain, ln2_bias;  // 1 x d
  Eigen::MatrixXd w1, b1;              // d x f, 1 x f
  Eigen::MatrixXd w2, b2;              // f x d, 1 x d
};

struct TransformerStack {
  Eigen::MatrixXd position;  // 3 x d, one learned embedding per modality token
  std::vector<TransformerLayer> layers;
  Eigen::MatrixXd final_gain, final_bias;  // 1 x d
};

struct RegressionHead {
  Eigen::MatrixXd weight;  // d x 1
  Eigen::MatrixXd bias;    // 1 x 1
};

struct FusionParameters {
  std::array<StreamAdapter, kStreamCount> adapters;
  IntraFusionParams intra;
  InterGateParams inter;
  TransformerStack transformer;
  RegressionHead head;

  // Visits every tensor with a stable dotted name.
  void for_each(const std::function<void(const std::string&, ParamGroup, Eigen::MatrixXd&)>& fn);
  void for_each(
      const std::function<void(const std::string&, ParamGroup, const Eigen::MatrixXd&)>& fn) const;

  FusionParameters zeros_like() const;
  std::size_t parameter_count() const;
};

// Mini-batch of raw stream vectors, one N x d_in matrix per stream. Streams of
// inactive modalities may be left empty.
struct Batch {
  std::array<Eigen::MatrixXd, kStreamCount> streams;

  Eigen::Index size() const;
};

Batch make_batch(const data::StreamSet& streams, std::span<const std::size_t> rows,
                 const ModalityMask& modalities = kAllModalities);
Batch make_batch(const data::EmbeddingBundle& bundle);

enum class Mode { Train, Eval };

struct ForwardOptions {
  Mode mode = Mode::Eval;
  // Keys the counter-based dropout masks; the same key reproduces the same masks.
  std::uint64_t dropout_key = 0;
};

struct LayerNormCache {
  Eigen::MatrixXd xhat;
  Eigen::VectorXd rstd;
};

struct LayerCache {
  Eigen::MatrixXd input;
  LayerNormCache ln1;
  Eigen::MatrixXd a1, q, k, v;
  std::vector<Eigen::MatrixXd> probs;  // per (sample, head), L x L
  Eigen::MatrixXd concat, attn_mask, x1;
  LayerNormCache ln2;
  Eigen::MatrixXd a2, pre_act, act, ffn_mask;
};

// Activations retained by a forward pass for the matching backward pass.
struct ForwardCache {
  std::uint64_t parameter_version = 0;
  Mode mode = Mode::Eval;
  Eigen::Index batch = 0;
  std::vector<std::size_t> active_modalities;
  std::array<Eigen::MatrixXd, kStreamCount> input, lora_mid, adapted, stream_mask;
  std::array<Eigen::MatrixXd, kModalityCount> alpha, fused;  // alpha: N x n_streams
  Eigen::MatrixXd gates;                                     // N x L
  std::vector<LayerCache> layers;
  LayerNormCache final_ln;
  Eigen::MatrixXd pooled;
  Eigen::VectorXd score;
};

class FusionNetwork {
 public:
  explicit FusionNetwork(const NetworkConfig& config);
  FusionNetwork(const NetworkConfig& config, FusionParameters parameters);

  const NetworkConfig& config() const { return config_; }
  const FusionParameters& parameters() const { return params_; }
  // Mutable access invalidates outstanding forward caches.
  FusionParameters& mutable_parameters() {
    ++version_;
    return params_;
  }
  std::uint64_t parameter_version() const { return version_; }

  // Normalized DubScore in (0,1) per batch row. When `cache` is non-null the
  // activations needed by backward() are retained.
  Eigen::VectorXd forward(const Batch& batch, const ForwardOptions& options,
                          ForwardCache* cache = nullptr) const;
  // Eval-mode single-clip convenience.
  double forward(const data::EmbeddingBundle& bundle) const;

  // Gradients of sum_i dscore_i * score_i with respect to every parameter. Frozen
  // groups receive zero gradient.
  FusionParameters backward(const ForwardCache& cache, const Eigen::VectorXd& dscore) const;

  // Per-stream building blocks, exposed for direct testing.
  Eigen::VectorXd adapt_stream(std::size_t stream, const Eigen::VectorXd& h) const;
  Eigen::VectorXd intra_modal_fuse(data::Modality modality,
                                   std::span<const Eigen::VectorXd> adapted,
                                   Eigen::VectorXd* attention = nullptr) const;
  std::array<Eigen::VectorXd, kModalityCount> inter_modal_gate(
      const std::array<Eigen::VectorXd, kModalityCount>& fused,
      Eigen::VectorXd* gates = nullptr) const;

 private:
  NetworkConfig config_;
  FusionParameters params_;
  std::uint64_t version_ = 1;
};

// Target normalization for the logistic head.
inline double normalize_mos(double mos) { return (mos - 1.0) / 4.0; }
inline double rescale_score(double s) { return 1.0 + 4.0 * s; }

FusionParameters initialize_parameters(const NetworkConfig& config);

// Numerically stable softmax of a vector.
Eigen::VectorXd softmax(const Eigen::VectorXd& scores);

}  // namespace dubscore::fusion
