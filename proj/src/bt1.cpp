#include "cvt/bt1.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cvt {

namespace {

constexpr char kMagic[4] = {'B', 'T', 'E', 'N'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path, const char* field) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("bt1: " + path + ": truncated " + field);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_header(std::ostream& os, const std::vector<std::uint32_t>& dims, Bt1Dtype dtype) {
  os.write(kMagic, 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_u32(os, d);
  const std::uint8_t dt = static_cast<std::uint8_t>(dtype);
  os.write(reinterpret_cast<const char*>(&dt), 1);
}

}  // namespace

Bt1Tensor read_bt1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("bt1: cannot open " + path);

  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bt1: " + path + ": bad magic");
  const std::uint32_t version = get_u32(is, path, "version");
  if (version != 1)
    throw std::runtime_error("bt1: " + path + ": unsupported version " + std::to_string(version));
  const std::uint32_t ndim = get_u32(is, path, "ndim");
  if (ndim > 8) throw std::runtime_error("bt1: " + path + ": implausible ndim " + std::to_string(ndim));

  Bt1Tensor t;
  t.dims.resize(ndim);
  for (std::uint32_t i = 0; i < ndim; ++i) t.dims[i] = get_u32(is, path, "dims");

  std::uint8_t dt;
  if (!is.read(reinterpret_cast<char*>(&dt), 1))
    throw std::runtime_error("bt1: " + path + ": truncated dtype");
  if (dt > 1) throw std::runtime_error("bt1: " + path + ": unknown dtype " + std::to_string(dt));
  t.dtype = static_cast<Bt1Dtype>(dt);

  const std::size_t n = t.numel();
  if (t.dtype == Bt1Dtype::F32) {
    std::vector<unsigned char> raw(n * 4);
    if (n && !is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
      throw std::runtime_error("bt1: " + path + ": truncated payload");
    t.f32.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                                 (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
      std::memcpy(&t.f32[i], &bits, 4);
    }
  } else {
    t.u8.resize(n);
    if (n && !is.read(reinterpret_cast<char*>(t.u8.data()), static_cast<std::streamsize>(n)))
      throw std::runtime_error("bt1: " + path + ": truncated payload");
  }
  return t;
}

void write_bt1(const std::string& path, const std::vector<std::uint32_t>& dims,
               const std::vector<float>& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("bt1: cannot write " + path);
  write_header(os, dims, Bt1Dtype::F32);
  std::vector<unsigned char> raw(data.size() * 4);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    raw[4 * i] = static_cast<unsigned char>(bits & 0xff);
    raw[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    raw[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    raw[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
  }
  if (!raw.empty())
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw std::runtime_error("bt1: write failed for " + path);
}

void write_bt1(const std::string& path, const std::vector<std::uint32_t>& dims,
               const std::vector<std::uint8_t>& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("bt1: cannot write " + path);
  write_header(os, dims, Bt1Dtype::U8);
  if (!data.empty())
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!os) throw std::runtime_error("bt1: write failed for " + path);
}

}  // namespace cvt
