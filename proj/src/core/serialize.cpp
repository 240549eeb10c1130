#include "mrdrive/core/serialize.hpp"

#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace mrdrive::core {

namespace {

constexpr char kMagic[4] = {'M', 'R', 'T', '1'};

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor read: truncated u32");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_bytes(std::ostream& os, const std::string& s) {
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("read: truncated stream");
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) {
    write_u32(os, static_cast<std::uint32_t>(t.dim(i)));
  }
  // float32 little-endian payload; on little-endian hosts this is the raw
  // buffer, otherwise each word is byte-swapped through write_u32
  const float* p = t.data();
  const std::int64_t n = t.numel();
  static_assert(sizeof(float) == 4);
  const std::uint32_t probe = 1;
  if (*reinterpret_cast<const unsigned char*>(&probe) == 1) {
    os.write(reinterpret_cast<const char*>(p),
             static_cast<std::streamsize>(n * 4));
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      std::uint32_t w;
      std::memcpy(&w, &p[i], 4);
      write_u32(os, w);
    }
  }
  if (!os) throw std::runtime_error("tensor write failed");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("tensor read: bad magic (expected MRT1)");
  }
  const std::uint32_t rank = read_u32(is);
  if (rank > 8) throw std::runtime_error("tensor read: implausible rank");
  std::vector<int> shape(rank);
  std::int64_t n = 1;
  for (auto& d : shape) {
    const std::uint32_t v = read_u32(is);
    if (v == 0 || v > (1u << 28)) {
      throw std::runtime_error("tensor read: implausible dimension");
    }
    d = static_cast<int>(v);
    n *= d;
  }
  std::vector<float> data(static_cast<std::size_t>(n));
  const std::uint32_t probe = 1;
  if (*reinterpret_cast<const unsigned char*>(&probe) == 1) {
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * 4));
    if (!is) throw std::runtime_error("tensor read: truncated payload");
  } else {
    for (auto& f : data) {
      const std::uint32_t w = read_u32(is);
      std::memcpy(&f, &w, 4);
    }
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace mrdrive::core
