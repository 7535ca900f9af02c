#include "dubscore/fusion_network.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <stdexcept>

#include "dubscore/errors.hpp"
#include "dubscore/random.hpp"

namespace dubscore::fusion {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::array<ParamGroup, 6> kGroups = {ParamGroup::Projection, ParamGroup::Lora,
                                               ParamGroup::Intra,      ParamGroup::Inter,
                                               ParamGroup::Transformer, ParamGroup::Head};
constexpr std::array<char, kModalityCount> kModalityLetters = {'A', 'V', 'T'};

std::vector<std::size_t> streams_of(std::size_t modality) {
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    if (static_cast<std::size_t>(data::kStreamModality[s]) == modality) out.push_back(s);
  }
  return out;
}

template <class P, class F>
void visit(P& p, F&& fn) {
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    const std::string base = "adapters." + std::string(data::kStreamNames[s]) + ".";
    fn(base + "projection", ParamGroup::Projection, p.adapters[s].projection);
    fn(base + "lora_down", ParamGroup::Lora, p.adapters[s].lora_down);
    fn(base + "lora_up", ParamGroup::Lora, p.adapters[s].lora_up);
  }
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    fn("intra." + std::string(data::kModalityNames[m]) + ".attention", ParamGroup::Intra,
       p.intra.attention[m]);
  }
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    fn("inter." + std::string(data::kModalityNames[m]) + ".weight", ParamGroup::Inter,
       p.inter.weight[m]);
  }
  fn("inter.bias", ParamGroup::Inter, p.inter.bias);
  auto& t = p.transformer;
  fn("transformer.position", ParamGroup::Transformer, t.position);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    auto& L = t.layers[l];
    const std::string b = "transformer.layers." + std::to_string(l) + ".";
    fn(b + "ln1_gain", ParamGroup::Transformer, L.ln1_gain);
    fn(b + "ln1_bias", ParamGroup::Transformer, L.ln1_bias);
    fn(b + "wq", ParamGroup::Transformer, L.wq);
    fn(b + "wk", ParamGroup::Transformer, L.wk);
    fn(b + "wv", ParamGroup::Transformer, L.wv);
    fn(b + "wo", ParamGroup::Transformer, L.wo);
    fn(b + "bq", ParamGroup::Transformer, L.bq);
    fn(b + "bk", ParamGroup::Transformer, L.bk);
    fn(b + "bv", ParamGroup::Transformer, L.bv);
    fn(b + "bo", ParamGroup::Transformer, L.bo);
    fn(b + "ln2_gain", ParamGroup::Transformer, L.ln2_gain);
    fn(b + "ln2_bias", ParamGroup::Transformer, L.ln2_bias);
    fn(b + "w1", ParamGroup::Transformer, L.w1);
    fn(b + "b1", ParamGroup::Transformer, L.b1);
    fn(b + "w2", ParamGroup::Transformer, L.w2);
    fn(b + "b2", ParamGroup::Transformer, L.b2);
  }
  fn("transformer.final_gain", ParamGroup::Transformer, t.final_gain);
  fn("transformer.final_bias", ParamGroup::Transformer, t.final_bias);
  fn("head.weight", ParamGroup::Head, p.head.weight);
  fn("head.bias", ParamGroup::Head, p.head.bias);
}

void row_softmax(MatrixXd& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

MatrixXd dropout_mask(Index rows, Index cols, double p, std::uint64_t key, std::uint64_t tag) {
  MatrixXd mask(rows, cols);
  const std::uint64_t k = mix_seed(key, tag);
  const double keep = 1.0 / (1.0 - p);
  for (Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = counter_uniform(k, static_cast<std::uint64_t>(i)) >= p ? keep : 0.0;
  }
  return mask;
}

MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gain, const MatrixXd& bias,
                    LayerNormCache& cache) {
  const Index d = x.cols();
  cache.xhat.resize(x.rows(), d);
  cache.rstd.resize(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / static_cast<double>(d);
    cache.rstd(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.xhat.row(r) = (x.row(r).array() - mean) * cache.rstd(r);
  }
  MatrixXd y = cache.xhat.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  return y;
}

MatrixXd layer_norm_backward(const MatrixXd& dy, const LayerNormCache& cache, const MatrixXd& gain,
                             MatrixXd& dgain, MatrixXd& dbias) {
  dgain += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const MatrixXd dxhat = dy.array().rowwise() * gain.row(0).array();
  MatrixXd dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = dxhat.row(r).dot(cache.xhat.row(r)) / static_cast<double>(dy.cols());
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
  }
  return dx;
}

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluC * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

void fill_uniform(MatrixXd& m, Index rows, Index cols, double bound, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(-bound, bound);
  m.resize(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(gen);
}

}  // namespace

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Projection: return "projection";
    case ParamGroup::Lora: return "lora";
    case ParamGroup::Intra: return "intra";
    case ParamGroup::Inter: return "inter";
    case ParamGroup::Transformer: return "transformer";
    case ParamGroup::Head: return "head";
  }
  return "unknown";
}

ParamGroup parse_param_group(std::string_view name) {
  for (auto g : kGroups) {
    if (to_string(g) == name) return g;
  }
  throw ConfigError("unknown parameter group: " + std::string(name));
}

std::string modality_label(const ModalityMask& mask) {
  std::string out;
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    if (!mask[m]) continue;
    if (!out.empty()) out += '+';
    out += kModalityLetters[m];
  }
  return out;
}

ModalityMask parse_modalities(std::string_view label) {
  ModalityMask mask = {false, false, false};
  std::size_t pos = 0;
  while (pos <= label.size()) {
    const auto end = std::min(label.find('+', pos), label.size());
    const auto tok = label.substr(pos, end - pos);
    bool found = false;
    for (std::size_t m = 0; m < kModalityCount; ++m) {
      if ((tok.size() == 1 && tok[0] == kModalityLetters[m]) || tok == data::kModalityNames[m]) {
        if (mask[m]) throw ConfigError("duplicate modality in '" + std::string(label) + "'");
        mask[m] = true;
        found = true;
      }
    }
    if (!found) throw ConfigError("unknown modality '" + std::string(tok) + "'");
    pos = end + 1;
  }
  return mask;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid network config: " + msg); };
  if (shared_dim < 1) fail("shared_dim must be >= 1");
  if (lora_rank < 1) fail("lora_rank must be >= 1");
  if (lora_rank > shared_dim) fail("lora_rank must not exceed shared_dim");
  for (int dim : data::kStreamDims) {
    if (lora_rank > dim) fail("lora_rank must not exceed any stream dimension");
  }
  if (!(lora_alpha > 0.0)) fail("lora_alpha must be > 0");
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (shared_dim % n_heads != 0) fail("shared_dim must be divisible by n_heads");
  if (ffn_dim < 1) fail("ffn_dim must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0,1)");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (!modalities[0] && !modalities[1] && !modalities[2]) fail("at least one modality required");
  unsigned all = 0;
  for (auto g : kGroups) all |= static_cast<unsigned>(g);
  if ((frozen_groups & ~all) != 0) fail("unknown bits in frozen_groups");
}

void FusionParameters::for_each(
    const std::function<void(const std::string&, ParamGroup, MatrixXd&)>& fn) {
  visit(*this, fn);
}

void FusionParameters::for_each(
    const std::function<void(const std::string&, ParamGroup, const MatrixXd&)>& fn) const {
  visit(*this, fn);
}

FusionParameters FusionParameters::zeros_like() const {
  FusionParameters z = *this;
  z.for_each([](const std::string&, ParamGroup, MatrixXd& m) { m.setZero(); });
  return z;
}

std::size_t FusionParameters::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, ParamGroup, const MatrixXd& m) {
    n += static_cast<std::size_t>(m.size());
  });
  return n;
}

Index Batch::size() const {
  for (const auto& s : streams) {
    if (s.size() > 0) return s.rows();
  }
  return 0;
}

Batch make_batch(const data::StreamSet& streams, std::span<const std::size_t> rows,
                 const ModalityMask& modalities) {
  Batch b;
  const auto n = static_cast<Index>(rows.size());
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    if (!modalities[static_cast<std::size_t>(data::kStreamModality[s])]) continue;
    const auto& table = streams.tables[s];
    b.streams[s].resize(n, table.cols());
    for (Index i = 0; i < n; ++i) {
      const auto r = static_cast<Index>(rows[static_cast<std::size_t>(i)]);
      if (r >= table.rows()) {
        throw DataError("batch row " + std::to_string(r) + " out of range for stream '" +
                        std::string(data::kStreamNames[s]) + "'");
      }
      b.streams[s].row(i) = table.row(r).cast<double>();
    }
  }
  return b;
}

Batch make_batch(const data::EmbeddingBundle& bundle) {
  bundle.validate();
  Batch b;
  for (std::size_t s = 0; s < kStreamCount; ++s) b.streams[s] = bundle.streams[s].transpose();
  return b;
}

FusionParameters initialize_parameters(const NetworkConfig& config) {
  config.validate();
  std::mt19937_64 gen(mix_seed(config.seed, 0x1417ULL));
  const Index d = config.shared_dim;
  const Index r = config.lora_rank;
  const Index f = config.ffn_dim;
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  FusionParameters p;
  for (std::size_t s = 0; s < kStreamCount; ++s) {
    const Index din = data::kStreamDims[s];
    const double bin = 1.0 / std::sqrt(static_cast<double>(din));
    fill_uniform(p.adapters[s].projection, d, din, bin, gen);
    fill_uniform(p.adapters[s].lora_down, r, din, bin, gen);
    p.adapters[s].lora_up = MatrixXd::Zero(d, r);
  }
  for (std::size_t m = 0; m < kModalityCount; ++m) fill_uniform(p.intra.attention[m], d, 1, bd, gen);
  for (std::size_t m = 0; m < kModalityCount; ++m) fill_uniform(p.inter.weight[m], d, 1, bd, gen);
  p.inter.bias = MatrixXd::Zero(kModalityCount, 1);
  auto& t = p.transformer;
  fill_uniform(t.position, kModalityCount, d, bd, gen);
  t.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& L : t.layers) {
    L.ln1_gain = MatrixXd::Ones(1, d);
    L.ln1_bias = MatrixXd::Zero(1, d);
    fill_uniform(L.wq, d, d, bd, gen);
    fill_uniform(L.wk, d, d, bd, gen);
    fill_uniform(L.wv, d, d, bd, gen);
    fill_uniform(L.wo, d, d, bd, gen);
    L.bq = L.bk = L.bv = L.bo = MatrixXd::Zero(1, d);
    L.ln2_gain = MatrixXd::Ones(1, d);
    L.ln2_bias = MatrixXd::Zero(1, d);
    fill_uniform(L.w1, d, f, bd, gen);
    L.b1 = MatrixXd::Zero(1, f);
    fill_uniform(L.w2, f, d, 1.0 / std::sqrt(static_cast<double>(f)), gen);
    L.b2 = MatrixXd::Zero(1, d);
  }
  t.final_gain = MatrixXd::Ones(1, d);
  t.final_bias = MatrixXd::Zero(1, d);
  fill_uniform(p.head.weight, d, 1, bd, gen);
  p.head.bias = MatrixXd::Zero(1, 1);
  return p;
}

FusionNetwork::FusionNetwork(const NetworkConfig& config)
    : config_(config), params_(initialize_parameters(config)) {}

FusionNetwork::FusionNetwork(const NetworkConfig& config, FusionParameters parameters)
    : config_(config), params_(std::move(parameters)) {
  config_.validate();
  // Shapes must match a fresh initialization of the same config.
  std::vector<std::pair<std::string, std::pair<Index, Index>>> expected;
  initialize_parameters(config_).for_each(
      [&](const std::string& name, ParamGroup, const MatrixXd& m) {
        expected.push_back({name, {m.rows(), m.cols()}});
      });
  std::size_t i = 0;
  params_.for_each([&](const std::string& name, ParamGroup, const MatrixXd& m) {
    if (i >= expected.size() || expected[i].first != name) {
      throw ConfigError("unexpected parameter tensor: " + name);
    }
    const auto [rows, cols] = expected[i].second;
    if (m.rows() != rows || m.cols() != cols) {
      throw ConfigError("shape mismatch in " + name + ": expected " + std::to_string(rows) + "x" +
                        std::to_string(cols) + ", got " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()));
    }
    ++i;
  });
  if (i != expected.size()) throw ConfigError("parameter set is missing tensors");
}

VectorXd softmax(const VectorXd& scores) {
  const double mx = scores.maxCoeff();
  VectorXd e = (scores.array() - mx).exp();
  return e / e.sum();
}

VectorXd FusionNetwork::adapt_stream(std::size_t stream, const VectorXd& h) const {
  const auto& a = params_.adapters.at(stream);
  if (h.size() != a.projection.cols()) {
    throw DataError("dimension mismatch in stream '" + std::string(data::kStreamNames[stream]) +
                    "': expected " + std::to_string(a.projection.cols()) + ", got " +
                    std::to_string(h.size()));
  }
  return a.projection * h + config_.lora_scale() * (a.lora_up * (a.lora_down * h));
}

VectorXd FusionNetwork::intra_modal_fuse(data::Modality modality, std::span<const VectorXd> adapted,
                                         VectorXd* attention) const {
  const auto& w = params_.intra.attention[static_cast<std::size_t>(modality)];
  if (adapted.empty()) throw DataError("intra_modal_fuse: no streams");
  VectorXd e(static_cast<Index>(adapted.size()));
  for (std::size_t i = 0; i < adapted.size(); ++i) e(static_cast<Index>(i)) = w.col(0).dot(adapted[i]);
  const VectorXd alpha = softmax(e);
  VectorXd z = VectorXd::Zero(adapted[0].size());
  for (std::size_t i = 0; i < adapted.size(); ++i) z += alpha(static_cast<Index>(i)) * adapted[i];
  if (attention) *attention = alpha;
  return z;
}

std::array<VectorXd, kModalityCount> FusionNetwork::inter_modal_gate(
    const std::array<VectorXd, kModalityCount>& fused, VectorXd* gates) const {
  std::vector<std::size_t> active;
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    if (config_.modalities[m]) active.push_back(m);
  }
  VectorXd phi(static_cast<Index>(active.size()));
  for (std::size_t t = 0; t < active.size(); ++t) {
    const auto m = active[t];
    phi(static_cast<Index>(t)) =
        params_.inter.weight[m].col(0).dot(fused[m]) + params_.inter.bias(static_cast<Index>(m), 0);
  }
  const VectorXd g = softmax(phi);
  std::array<VectorXd, kModalityCount> out;
  VectorXd full = VectorXd::Zero(kModalityCount);
  for (std::size_t t = 0; t < active.size(); ++t) {
    const auto m = active[t];
    out[m] = g(static_cast<Index>(t)) * fused[m];
    full(static_cast<Index>(m)) = g(static_cast<Index>(t));
  }
  if (gates) *gates = full;
  return out;
}

VectorXd FusionNetwork::forward(const Batch& batch, const ForwardOptions& options,
                                ForwardCache* cache) const {
  const Index n = batch.size();
  if (n == 0) throw DataError("forward: empty batch");
  const bool train = options.mode == Mode::Train && config_.dropout > 0.0;
  const double p = config_.dropout;
  const Index d = config_.shared_dim;

  ForwardCache c;
  c.parameter_version = version_;
  c.mode = options.mode;
  c.batch = n;
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    if (config_.modalities[m]) c.active_modalities.push_back(m);
  }
  const auto L = static_cast<Index>(c.active_modalities.size());

  for (std::size_t m : c.active_modalities) {
    for (std::size_t s : streams_of(m)) {
      const MatrixXd& h = batch.streams[s];
      const auto& a = params_.adapters[s];
      if (h.rows() != n || h.cols() != a.projection.cols()) {
        throw DataError("dimension mismatch in stream '" + std::string(data::kStreamNames[s]) +
                        "': expected " + std::to_string(n) + "x" +
                        std::to_string(a.projection.cols()) + ", got " +
                        std::to_string(h.rows()) + "x" + std::to_string(h.cols()));
      }
      if (!h.allFinite()) {
        throw DataError("non-finite input in stream '" + std::string(data::kStreamNames[s]) + "'");
      }
      c.input[s] = h;
      c.lora_mid[s] = h * a.lora_down.transpose();
      MatrixXd y = h * a.projection.transpose();
      y.noalias() += config_.lora_scale() * (c.lora_mid[s] * a.lora_up.transpose());
      if (train) {
        c.stream_mask[s] = dropout_mask(n, d, p, options.dropout_key, s);
        y.array() *= c.stream_mask[s].array();
      }
      c.adapted[s] = std::move(y);
    }
  }

  // Intra-modal attention over streams.
  for (std::size_t m : c.active_modalities) {
    const auto ss = streams_of(m);
    MatrixXd e(n, static_cast<Index>(ss.size()));
    for (std::size_t i = 0; i < ss.size(); ++i) {
      e.col(static_cast<Index>(i)) = c.adapted[ss[i]] * params_.intra.attention[m];
    }
    row_softmax(e);
    MatrixXd z = MatrixXd::Zero(n, d);
    for (std::size_t i = 0; i < ss.size(); ++i) {
      z += e.col(static_cast<Index>(i)).asDiagonal() * c.adapted[ss[i]];
    }
    c.alpha[m] = std::move(e);
    c.fused[m] = std::move(z);
  }

  // Inter-modal gate, then one token per active modality.
  c.gates.resize(n, L);
  for (Index t = 0; t < L; ++t) {
    const auto m = c.active_modalities[static_cast<std::size_t>(t)];
    c.gates.col(t) = (c.fused[m] * params_.inter.weight[m]).array() +
                     params_.inter.bias(static_cast<Index>(m), 0);
  }
  row_softmax(c.gates);
  MatrixXd x(n * L, d);
  for (Index i = 0; i < n; ++i) {
    for (Index t = 0; t < L; ++t) {
      const auto m = c.active_modalities[static_cast<std::size_t>(t)];
      x.row(i * L + t) = c.gates(i, t) * c.fused[m].row(i) +
                         params_.transformer.position.row(static_cast<Index>(m));
    }
  }

  const Index heads = config_.n_heads;
  const Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  c.layers.resize(params_.transformer.layers.size());
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    const auto& P = params_.transformer.layers[l];
    auto& lc = c.layers[l];
    lc.input = x;
    lc.a1 = layer_norm(x, P.ln1_gain, P.ln1_bias, lc.ln1);
    lc.q = (lc.a1 * P.wq).rowwise() + P.bq.row(0);
    lc.k = (lc.a1 * P.wk).rowwise() + P.bk.row(0);
    lc.v = (lc.a1 * P.wv).rowwise() + P.bv.row(0);
    lc.concat.resize(n * L, d);
    lc.probs.resize(static_cast<std::size_t>(n * heads));
    for (Index i = 0; i < n; ++i) {
      for (Index h = 0; h < heads; ++h) {
        MatrixXd s = lc.q.block(i * L, h * dh, L, dh) * lc.k.block(i * L, h * dh, L, dh).transpose();
        s *= inv_sqrt;
        row_softmax(s);
        lc.concat.block(i * L, h * dh, L, dh) = s * lc.v.block(i * L, h * dh, L, dh);
        lc.probs[static_cast<std::size_t>(i * heads + h)] = std::move(s);
      }
    }
    MatrixXd o = (lc.concat * P.wo).rowwise() + P.bo.row(0);
    if (train) {
      lc.attn_mask = dropout_mask(n * L, d, p, options.dropout_key, 100 + l);
      o.array() *= lc.attn_mask.array();
    }
    lc.x1 = x + o;
    lc.a2 = layer_norm(lc.x1, P.ln2_gain, P.ln2_bias, lc.ln2);
    lc.pre_act = (lc.a2 * P.w1).rowwise() + P.b1.row(0);
    lc.act = lc.pre_act.unaryExpr([](double v) { return gelu(v); });
    MatrixXd f = (lc.act * P.w2).rowwise() + P.b2.row(0);
    if (train) {
      lc.ffn_mask = dropout_mask(n * L, d, p, options.dropout_key, 200 + l);
      f.array() *= lc.ffn_mask.array();
    }
    x = lc.x1 + f;
  }
  const MatrixXd xf = layer_norm(x, params_.transformer.final_gain, params_.transformer.final_bias,
                                 c.final_ln);
  c.pooled.resize(n, d);
  for (Index i = 0; i < n; ++i) c.pooled.row(i) = xf.middleRows(i * L, L).colwise().mean();
  const VectorXd logit = (c.pooled * params_.head.weight).array() + params_.head.bias(0, 0);
  c.score = logit.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  if (!c.score.allFinite()) throw NumericError("forward: non-finite score");
  VectorXd out = c.score;
  if (cache) *cache = std::move(c);
  return out;
}

double FusionNetwork::forward(const data::EmbeddingBundle& bundle) const {
  return forward(make_batch(bundle), ForwardOptions{})(0);
}

FusionParameters FusionNetwork::backward(const ForwardCache& c, const VectorXd& dscore) const {
  if (c.parameter_version != version_) {
    throw std::logic_error("backward: stale forward cache (parameters changed since forward)");
  }
  if (dscore.size() != c.batch || c.batch == 0) {
    throw std::logic_error("backward: gradient length does not match the cached batch");
  }
  const Index n = c.batch;
  const Index d = config_.shared_dim;
  const auto L = static_cast<Index>(c.active_modalities.size());
  const Index heads = config_.n_heads;
  const Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  FusionParameters g = params_.zeros_like();

  // Head.
  const VectorXd dlogit = dscore.array() * c.score.array() * (1.0 - c.score.array());
  g.head.weight = c.pooled.transpose() * dlogit;
  g.head.bias(0, 0) = dlogit.sum();
  const MatrixXd dpooled = dlogit * params_.head.weight.transpose();
  MatrixXd dxf(n * L, d);
  for (Index i = 0; i < n; ++i) {
    for (Index t = 0; t < L; ++t) dxf.row(i * L + t) = dpooled.row(i) / static_cast<double>(L);
  }
  MatrixXd dx = layer_norm_backward(dxf, c.final_ln, params_.transformer.final_gain,
                                    g.transformer.final_gain, g.transformer.final_bias);

  for (std::size_t l = c.layers.size(); l-- > 0;) {
    const auto& P = params_.transformer.layers[l];
    auto& G = g.transformer.layers[l];
    const auto& lc = c.layers[l];

    // Feed-forward branch.
    MatrixXd df = dx;
    if (lc.ffn_mask.size() > 0) df.array() *= lc.ffn_mask.array();
    G.w2 = lc.act.transpose() * df;
    G.b2 = df.colwise().sum();
    MatrixXd dpre = df * P.w2.transpose();
    dpre.array() *= lc.pre_act.unaryExpr([](double v) { return gelu_grad(v); }).array();
    G.w1 = lc.a2.transpose() * dpre;
    G.b1 = dpre.colwise().sum();
    const MatrixXd da2 = dpre * P.w1.transpose();
    MatrixXd dx1 = dx + layer_norm_backward(da2, lc.ln2, P.ln2_gain, G.ln2_gain, G.ln2_bias);

    // Attention branch.
    MatrixXd dout = dx1;
    if (lc.attn_mask.size() > 0) dout.array() *= lc.attn_mask.array();
    G.wo = lc.concat.transpose() * dout;
    G.bo = dout.colwise().sum();
    const MatrixXd dconcat = dout * P.wo.transpose();
    MatrixXd dq(n * L, d), dk(n * L, d), dv(n * L, d);
    for (Index i = 0; i < n; ++i) {
      for (Index h = 0; h < heads; ++h) {
        const MatrixXd& pr = lc.probs[static_cast<std::size_t>(i * heads + h)];
        const auto dc = dconcat.block(i * L, h * dh, L, dh);
        dv.block(i * L, h * dh, L, dh) = pr.transpose() * dc;
        const MatrixXd dp = dc * lc.v.block(i * L, h * dh, L, dh).transpose();
        const VectorXd rs = (dp.array() * pr.array()).rowwise().sum();
        const MatrixXd ds = pr.array() * (dp.colwise() - rs).array();
        dq.block(i * L, h * dh, L, dh) = inv_sqrt * ds * lc.k.block(i * L, h * dh, L, dh);
        dk.block(i * L, h * dh, L, dh) = inv_sqrt * ds.transpose() * lc.q.block(i * L, h * dh, L, dh);
      }
    }
    G.wq = lc.a1.transpose() * dq;
    G.wk = lc.a1.transpose() * dk;
    G.wv = lc.a1.transpose() * dv;
    G.bq = dq.colwise().sum();
    G.bk = dk.colwise().sum();
    G.bv = dv.colwise().sum();
    MatrixXd da1 = dq * P.wq.transpose();
    da1.noalias() += dk * P.wk.transpose();
    da1.noalias() += dv * P.wv.transpose();
    dx = dx1 + layer_norm_backward(da1, lc.ln1, P.ln1_gain, G.ln1_gain, G.ln1_bias);
  }

  // Tokens back to gated modality vectors.
  std::array<MatrixXd, kModalityCount> dz;
  for (std::size_t m : c.active_modalities) dz[m] = MatrixXd::Zero(n, d);
  MatrixXd dgate(n, L);
  for (Index i = 0; i < n; ++i) {
    for (Index t = 0; t < L; ++t) {
      const auto m = c.active_modalities[static_cast<std::size_t>(t)];
      const auto row = dx.row(i * L + t);
      g.transformer.position.row(static_cast<Index>(m)) += row;
      dz[m].row(i) += c.gates(i, t) * row;
      dgate(i, t) = row.dot(c.fused[m].row(i));
    }
  }
  const VectorXd gd = (c.gates.array() * dgate.array()).rowwise().sum();
  const MatrixXd dphi = c.gates.array() * (dgate.colwise() - gd).array();
  for (Index t = 0; t < L; ++t) {
    const auto m = c.active_modalities[static_cast<std::size_t>(t)];
    g.inter.weight[m] = c.fused[m].transpose() * dphi.col(t);
    g.inter.bias(static_cast<Index>(m), 0) = dphi.col(t).sum();
    dz[m].noalias() += dphi.col(t) * params_.inter.weight[m].transpose();
  }

  // Intra-modal attention back to adapted streams.
  std::array<MatrixXd, kStreamCount> dadapted;
  for (std::size_t m : c.active_modalities) {
    const auto ss = streams_of(m);
    const MatrixXd& alpha = c.alpha[m];
    MatrixXd dalpha(n, alpha.cols());
    for (std::size_t i = 0; i < ss.size(); ++i) {
      const auto col = static_cast<Index>(i);
      dalpha.col(col) = (dz[m].array() * c.adapted[ss[i]].array()).rowwise().sum();
      dadapted[ss[i]] = alpha.col(col).asDiagonal() * dz[m];
    }
    const VectorXd ad = (alpha.array() * dalpha.array()).rowwise().sum();
    const MatrixXd de = alpha.array() * (dalpha.colwise() - ad).array();
    for (std::size_t i = 0; i < ss.size(); ++i) {
      const auto col = static_cast<Index>(i);
      g.intra.attention[m] += c.adapted[ss[i]].transpose() * de.col(col);
      dadapted[ss[i]].noalias() += de.col(col) * params_.intra.attention[m].transpose();
    }
  }

  // Adapters.
  const double scale = config_.lora_scale();
  for (std::size_t m : c.active_modalities) {
    for (std::size_t s : streams_of(m)) {
      MatrixXd dy = std::move(dadapted[s]);
      if (c.stream_mask[s].size() > 0) dy.array() *= c.stream_mask[s].array();
      auto& ga = g.adapters[s];
      const auto& a = params_.adapters[s];
      if (!config_.is_frozen(ParamGroup::Projection)) ga.projection = dy.transpose() * c.input[s];
      if (!config_.is_frozen(ParamGroup::Lora)) {
        ga.lora_up = scale * (dy.transpose() * c.lora_mid[s]);
        const MatrixXd du = scale * (dy * a.lora_up);
        ga.lora_down = du.transpose() * c.input[s];
      }
    }
  }

  g.for_each([&](const std::string&, ParamGroup group, MatrixXd& t) {
    if (config_.is_frozen(group)) t.setZero();
  });
  return g;
}

}  // namespace dubscore::fusion
