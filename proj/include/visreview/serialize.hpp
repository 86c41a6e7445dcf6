#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "visreview/tensor.hpp"

namespace vr {

// Tensor blob layout (little-endian):
//   "HRTN" | version u32 | rank u32 | dims u64 x rank | values f64 x prod(dims)
inline constexpr std::uint32_t kTensorBlobVersion = 1;

std::string encode_tensor(const Tensor& t);
/// Decodes one blob starting at `offset`; advances `offset` past it.
Tensor decode_tensor(std::string_view bytes, std::size_t& offset);
Tensor decode_tensor(std::string_view bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

std::uint32_t crc32(std::string_view bytes);

}  // namespace vr
