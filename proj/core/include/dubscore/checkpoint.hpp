#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dubscore/fusion_network.hpp"
#include "dubscore/proxy_mos.hpp"

namespace dubscore::io {

// Versioned binary archive of named tensors:
//   "DUBK" | u32 version | str kind | str metadata (JSON text) | u32 count |
//   count * { str name | u8 dtype (0 f32, 1 f64) | u32 rows | u32 cols | column-major data }
// All values little-endian; strings are u32-length-prefixed.
inline constexpr char kArchiveMagic[4] = {'D', 'U', 'B', 'K'};
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct ArchiveTensor {
  std::string name;
  DType dtype = DType::F32;
  Eigen::MatrixXd values;
};

struct Archive {
  std::string kind;
  std::string metadata;
  std::vector<ArchiveTensor> tensors;

  void put(const std::string& name, const Eigen::MatrixXd& values, DType dtype);
  // Throws DataError when absent.
  const Eigen::MatrixXd& get(const std::string& name) const;
};

void write_archive(const Archive& archive, const std::filesystem::path& path);
Archive read_archive(const std::filesystem::path& path);

// Network checkpoint: NetworkConfig in the metadata, every parameter as f32.
// `provenance` is stored verbatim as the "provenance" metadata entry (JSON text).
void save_network(const fusion::FusionNetwork& network, const std::filesystem::path& path,
                  const std::string& provenance = "{}");
fusion::FusionNetwork load_network(const std::filesystem::path& path);
std::string read_network_provenance(const std::filesystem::path& path);

std::string config_to_json(const fusion::NetworkConfig& config);
fusion::NetworkConfig config_from_json(const std::string& text);

// Proxy model: normalizer, point weights and (optionally) the bootstrap ensemble, f64.
struct ProxyModel {
  proxy::MetricNormalizer normalizer;
  proxy::ProxyWeights weights;
  proxy::WeightEnsemble ensemble;
};

void save_proxy(const ProxyModel& model, const std::filesystem::path& path);
ProxyModel load_proxy(const std::filesystem::path& path);

}  // namespace dubscore::io
