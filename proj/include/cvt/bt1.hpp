#pragma once

// BT1 tensor files: magic "BTEN", u32 version=1, u32 ndim, ndim x u32 dims,
// u8 dtype (0 = float32 little-endian, 1 = uint8), then the row-major
// payload. All integers little-endian.

#include <cstdint>
#include <string>
#include <vector>

namespace cvt {

enum class Bt1Dtype : std::uint8_t { F32 = 0, U8 = 1 };

struct Bt1Tensor {
  std::vector<std::uint32_t> dims;
  Bt1Dtype dtype = Bt1Dtype::F32;
  std::vector<float> f32;     // populated when dtype == F32
  std::vector<std::uint8_t> u8;  // populated when dtype == U8

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

// Throws std::runtime_error naming the path and offending field on any
// malformed input (bad magic, bad version, truncation, dtype).
Bt1Tensor read_bt1(const std::string& path);

void write_bt1(const std::string& path, const std::vector<std::uint32_t>& dims,
               const std::vector<float>& data);
void write_bt1(const std::string& path, const std::vector<std::uint32_t>& dims,
               const std::vector<std::uint8_t>& data);

}  // namespace cvt
