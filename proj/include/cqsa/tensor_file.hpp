#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "cqsa/tensor.hpp"

// Binary layout, all integers little-endian:
//   "CQST" | u16 version=1 | u8 dtype (0 f32, 1 f64) | u8 ndim=4 |
//   4 x u64 dims (B, H, N, D) | row-major payload
namespace cqsa {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::uint16_t kTensorFileVersion = 1;
inline constexpr std::size_t kTensorHeaderBytes = 4 + 2 + 1 + 1 + 4 * 8;

using AnyTensor = std::variant<Tensor4<float>, Tensor4<double>>;

template <typename T>
std::vector<std::uint8_t> encode_tensor(const Tensor4<T>& t);

AnyTensor decode_tensor(const std::vector<std::uint8_t>& bytes);

template <typename T>
void write_tensor_file(const std::string& path, const Tensor4<T>& t);

AnyTensor read_tensor_file(const std::string& path);

/// Reads a file and converts it to T (f32 <-> f64 casts allowed).
template <typename T>
Tensor4<T> read_tensor_file_as(const std::string& path);

DType dtype_of(const AnyTensor& t);
Shape4 shape_of(const AnyTensor& t);

}  // namespace cqsa
