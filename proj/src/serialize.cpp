#include "gabformer/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

namespace gabformer {

namespace io {

namespace {
template <typename U>
void write_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError("unexpected end of stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}
}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4] = {};
  is.read(got, 4);
  if (is.gcount() != 4 || std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected \"") + magic + "\"");
  }
}

}  // namespace io

namespace {
// Guards against absurd headers from corrupt files before allocating.
constexpr std::uint64_t kMaxRank = 8;
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("GFT1", 4);
  io::write_u64(os, t.rank());
  for (auto e : t.shape()) io::write_u64(os, e);
  for (double v : t.data()) io::write_f64(os, v);
  if (!os) throw std::runtime_error("failed writing tensor");
}

Tensor read_tensor(std::istream& is) {
  io::expect_magic(is, "GFT1");
  const auto rank = io::read_u64(is);
  if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " exceeds limit");
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& e : shape) {
    e = io::read_u64(is);
    n *= e;
    if (n > kMaxElements) throw FormatError("tensor too large");
  }
  std::vector<double> data(n);
  for (auto& v : data) v = io::read_f64(is);
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace gabformer
