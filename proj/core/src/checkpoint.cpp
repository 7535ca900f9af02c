#include "dubscore/checkpoint.hpp"

#include <json.hpp>

#include <fstream>

#include "dubscore/binary_io.hpp"
#include "dubscore/errors.hpp"

namespace dubscore::io {

using Eigen::Index;
using Eigen::MatrixXd;
using nlohmann::json;

void Archive::put(const std::string& name, const MatrixXd& values, DType dtype) {
  tensors.push_back(ArchiveTensor{name, dtype, values});
}

const MatrixXd& Archive::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.values;
  }
  throw DataError("checkpoint is missing tensor '" + name + "'");
}

void write_archive(const Archive& archive, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(kArchiveMagic, 4);
  write_le<std::uint32_t>(out, kArchiveVersion);
  write_string(out, archive.kind);
  write_string(out, archive.metadata);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& t : archive.tensors) {
    write_string(out, t.name);
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.values.rows()));
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.values.cols()));
    for (Index i = 0; i < t.values.size(); ++i) {
      if (t.dtype == DType::F32) {
        write_le<float>(out, static_cast<float>(t.values.data()[i]));
      } else {
        write_le<double>(out, t.values.data()[i]);
      }
    }
  }
  if (!out) throw DataError("write failed: " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kArchiveMagic, 4)) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kArchiveVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Archive a;
  a.kind = read_string(in);
  a.metadata = read_string(in);
  const auto count = read_le<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    ArchiveTensor t;
    t.name = read_string(in);
    const auto dtype = read_le<std::uint8_t>(in);
    if (dtype > 1) throw DataError(path.string() + ": bad dtype for tensor '" + t.name + "'");
    t.dtype = static_cast<DType>(dtype);
    const auto rows = read_le<std::uint32_t>(in);
    const auto cols = read_le<std::uint32_t>(in);
    if (static_cast<std::uint64_t>(rows) * cols > (1ULL << 28)) {
      throw DataError(path.string() + ": implausible shape for tensor '" + t.name + "'");
    }
    t.values.resize(rows, cols);
    for (Index i = 0; i < t.values.size(); ++i) {
      t.values.data()[i] = t.dtype == DType::F32 ? static_cast<double>(read_le<float>(in))
                                                 : read_le<double>(in);
    }
    a.tensors.push_back(std::move(t));
  }
  return a;
}

std::string config_to_json(const fusion::NetworkConfig& c) {
  json j;
  j["shared_dim"] = c.shared_dim;
  j["lora_rank"] = c.lora_rank;
  j["lora_alpha"] = c.lora_alpha;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["dropout"] = c.dropout;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["modalities"] = fusion::modality_label(c.modalities);
  j["frozen_groups"] = c.frozen_groups;
  return j.dump();
}

fusion::NetworkConfig config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    fusion::NetworkConfig c;
    c.shared_dim = j.at("shared_dim").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.modalities = fusion::parse_modalities(j.at("modalities").get<std::string>());
    c.frozen_groups = j.at("frozen_groups").get<unsigned>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed network config in checkpoint: ") + e.what());
  }
}

void save_network(const fusion::FusionNetwork& network, const std::filesystem::path& path,
                  const std::string& provenance) {
  Archive a;
  a.kind = "fusion_network";
  json meta;
  meta["config"] = json::parse(config_to_json(network.config()));
  meta["provenance"] = json::parse(provenance);
  a.metadata = meta.dump();
  network.parameters().for_each(
      [&](const std::string& name, fusion::ParamGroup, const MatrixXd& m) { a.put(name, m, DType::F32); });
  write_archive(a, path);
}

namespace {

json network_meta(const Archive& a, const std::filesystem::path& path) {
  if (a.kind != "fusion_network") {
    throw DataError(path.string() + ": expected a network checkpoint, found '" + a.kind + "'");
  }
  try {
    return json::parse(a.metadata);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed checkpoint metadata");
  }
}

}  // namespace

fusion::FusionNetwork load_network(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  const json meta = network_meta(a, path);
  if (!meta.contains("config")) throw DataError(path.string() + ": checkpoint has no config");
  const auto config = config_from_json(meta["config"].dump());
  fusion::FusionParameters params = fusion::initialize_parameters(config);
  params.for_each([&](const std::string& name, fusion::ParamGroup, MatrixXd& m) {
    const MatrixXd& stored = a.get(name);
    if (stored.rows() != m.rows() || stored.cols() != m.cols()) {
      throw DataError(path.string() + ": shape mismatch for tensor '" + name + "'");
    }
    m = stored;
  });
  return fusion::FusionNetwork(config, std::move(params));
}

std::string read_network_provenance(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  const json meta = network_meta(a, path);
  return meta.contains("provenance") ? meta["provenance"].dump() : "{}";
}

namespace {

MatrixXd row_of(const proxy::MetricArray& v) {
  MatrixXd m(1, static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Index>(i)) = v[i];
  return m;
}

proxy::MetricArray array_of(const MatrixXd& m, Index row) {
  proxy::MetricArray v{};
  if (m.cols() != static_cast<Index>(v.size())) throw DataError("proxy checkpoint: bad width");
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m(row, static_cast<Index>(i));
  return v;
}

MatrixXd calibration_row(const proxy::ProxyWeights& w) {
  MatrixXd m(1, 4);
  m << w.scale, w.offset, w.achieved_rho, w.residual_variance;
  return m;
}

proxy::ProxyWeights weights_of(const MatrixXd& w, const MatrixXd& cal, Index row) {
  proxy::ProxyWeights p;
  p.w = array_of(w, row);
  if (cal.cols() != 4) throw DataError("proxy checkpoint: bad calibration width");
  p.scale = cal(row, 0);
  p.offset = cal(row, 1);
  p.achieved_rho = cal(row, 2);
  p.residual_variance = cal(row, 3);
  return p;
}

}  // namespace

void save_proxy(const ProxyModel& model, const std::filesystem::path& path) {
  Archive a;
  a.kind = "proxy_weights";
  json meta;
  meta["metrics"] = std::vector<std::string>(data::kMetricNames.begin(), data::kMetricNames.end());
  meta["ensemble_residual_variance"] = model.ensemble.residual_variance;
  a.metadata = meta.dump();
  a.put("normalizer.mean", row_of(model.normalizer.mean), DType::F64);
  a.put("normalizer.stddev", row_of(model.normalizer.stddev), DType::F64);
  proxy::MetricArray sign{};
  for (std::size_t i = 0; i < sign.size(); ++i) sign[i] = model.normalizer.sign[i];
  a.put("normalizer.sign", row_of(sign), DType::F64);
  a.put("weights.w", row_of(model.weights.w), DType::F64);
  a.put("weights.calibration", calibration_row(model.weights), DType::F64);
  const auto k = static_cast<Index>(model.ensemble.members.size());
  MatrixXd ew(k, static_cast<Index>(data::kMetricCount)), ec(k, 4);
  for (Index i = 0; i < k; ++i) {
    ew.row(i) = row_of(model.ensemble.members[static_cast<std::size_t>(i)].w);
    ec.row(i) = calibration_row(model.ensemble.members[static_cast<std::size_t>(i)]);
  }
  a.put("ensemble.w", ew, DType::F64);
  a.put("ensemble.calibration", ec, DType::F64);
  write_archive(a, path);
}

ProxyModel load_proxy(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  if (a.kind != "proxy_weights") {
    throw DataError(path.string() + ": expected a proxy-weights checkpoint, found '" + a.kind + "'");
  }
  ProxyModel m;
  m.normalizer.mean = array_of(a.get("normalizer.mean"), 0);
  m.normalizer.stddev = array_of(a.get("normalizer.stddev"), 0);
  const auto sign = array_of(a.get("normalizer.sign"), 0);
  for (std::size_t i = 0; i < sign.size(); ++i) m.normalizer.sign[i] = static_cast<int>(sign[i]);
  m.weights = weights_of(a.get("weights.w"), a.get("weights.calibration"), 0);
  const MatrixXd& ew = a.get("ensemble.w");
  const MatrixXd& ec = a.get("ensemble.calibration");
  if (ew.rows() != ec.rows()) throw DataError(path.string() + ": ensemble tensors disagree");
  for (Index i = 0; i < ew.rows(); ++i) m.ensemble.members.push_back(weights_of(ew, ec, i));
  try {
    m.ensemble.residual_variance =
        json::parse(a.metadata).value("ensemble_residual_variance", 0.0);
  } catch (const json::exception&) {
    throw DataError(path.string() + ": malformed checkpoint metadata");
  }
  return m;
}

}  // namespace dubscore::io
