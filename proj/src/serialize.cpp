#include "visreview/serialize.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "visreview/error.hpp"

namespace vr {

namespace {

constexpr char kMagic[4] = {'H', 'R', 'T', 'N'};

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& offset) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  if (offset + sizeof(U) > bytes.size()) fail(ErrorCode::CorruptManifest, "tensor blob truncated");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bits |= static_cast<U>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  offset += sizeof(U);
  return std::bit_cast<T>(bits);
}

}  // namespace

std::string encode_tensor(const Tensor& t) {
  std::string out(kMagic, 4);
  out.reserve(16 + 8 * t.rank() + 8 * t.size());
  put_le<std::uint32_t>(out, kTensorBlobVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  for (double v : t.data()) put_le<double>(out, v);
  return out;
}

Tensor decode_tensor(std::string_view bytes, std::size_t& offset) {
  if (offset + 4 > bytes.size() || std::memcmp(bytes.data() + offset, kMagic, 4) != 0) {
    fail(ErrorCode::CorruptManifest, "missing HRTN magic");
  }
  offset += 4;
  const auto version = get_le<std::uint32_t>(bytes, offset);
  if (version != kTensorBlobVersion) {
    fail(ErrorCode::CorruptManifest, "unsupported tensor blob version " + std::to_string(version));
  }
  const auto rank = get_le<std::uint32_t>(bytes, offset);
  Tensor::Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint64_t>(bytes, offset);
  const std::size_t n = shape_size(shape);
  if (offset + 8 * n > bytes.size()) fail(ErrorCode::CorruptManifest, "tensor blob truncated");
  std::vector<double> data(n);
  for (auto& v : data) v = get_le<double>(bytes, offset);
  return Tensor(std::move(shape), std::move(data));
}

Tensor decode_tensor(std::string_view bytes) {
  std::size_t offset = 0;
  Tensor t = decode_tensor(bytes, offset);
  if (offset != bytes.size()) fail(ErrorCode::CorruptManifest, "trailing bytes after tensor blob");
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return std::move(buffer).str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

std::uint32_t crc32(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + done), chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace vr
