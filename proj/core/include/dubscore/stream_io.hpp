#pragma once

#include "dubscore/data_model.hpp"

#include <cstdint>
#include <filesystem>

namespace dubscore::data {

// Binary stream file: "DUBE" | u32 format_version | u32 dim | u64 count | count*dim f32,
// all little-endian, rows in manifest record order.
inline constexpr char kStreamMagic[4] = {'D', 'U', 'B', 'E'};
inline constexpr std::uint32_t kStreamFormatVersion = 1;

void write_stream_file(const std::filesystem::path& path, const StreamMatrix& table);
StreamMatrix read_stream_file(const std::filesystem::path& path);

}  // namespace dubscore::data
