#include "dubscore/stream_io.hpp"

#include <fstream>

#include "dubscore/binary_io.hpp"
#include "dubscore/errors.hpp"

namespace dubscore::data {

void write_stream_file(const std::filesystem::path& path, const StreamMatrix& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open stream file for writing: " + path.string());
  out.write(kStreamMagic, 4);
  io::write_le<std::uint32_t>(out, kStreamFormatVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.cols()));
  io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(table.rows()));
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(table.data()),
              static_cast<std::streamsize>(table.size() * sizeof(float)));
  } else {
    for (Eigen::Index i = 0; i < table.size(); ++i) io::write_le<float>(out, table.data()[i]);
  }
  if (!out) throw DataError("failed writing stream file: " + path.string());
}

StreamMatrix read_stream_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing stream file: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kStreamMagic, 4) != 0) {
    throw DataError("bad magic in stream file: " + path.string());
  }
  const auto version = io::read_le<std::uint32_t>(in);
  if (version != kStreamFormatVersion) {
    throw DataError("unsupported stream format_version " + std::to_string(version) + " in " +
                    path.string());
  }
  const auto dim = io::read_le<std::uint32_t>(in);
  const auto count = io::read_le<std::uint64_t>(in);
  if (dim == 0 || dim > (1u << 16) || count > (1ull << 32)) {
    throw DataError("implausible stream header in " + path.string());
  }
  StreamMatrix table(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  if constexpr (std::endian::native == std::endian::little) {
    const auto bytes = static_cast<std::streamsize>(table.size() * sizeof(float));
    if (bytes > 0 && !in.read(reinterpret_cast<char*>(table.data()), bytes)) {
      throw DataError("truncated stream file: " + path.string());
    }
  } else {
    for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = io::read_le<float>(in);
  }
  return table;
}

}  // namespace dubscore::data
