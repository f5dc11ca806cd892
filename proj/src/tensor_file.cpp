#include "cqsa/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cqsa/errors.hpp"

namespace cqsa {
namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
Tensor4<T> decode_payload(const std::uint8_t* p, Shape4 shape) {
  std::vector<T> values(static_cast<std::size_t>(shape.elements()));
  for (auto& v : values) {
    v = std::bit_cast<T>(get_le<Bits<T>>(p));
    p += sizeof(T);
  }
  return Tensor4<T>(shape, std::move(values));
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_tensor(const Tensor4<T>& t) {
  std::vector<std::uint8_t> out;
  out.reserve(kTensorHeaderBytes + t.data().size() * sizeof(T));
  out.insert(out.end(), {'C', 'Q', 'S', 'T'});
  put_le<std::uint16_t>(out, kTensorFileVersion);
  out.push_back(static_cast<std::uint8_t>(sizeof(T) == 4 ? DType::f32 : DType::f64));
  out.push_back(4);
  const auto& s = t.shape();
  for (std::int64_t d : {s.batch, s.heads, s.tokens, s.dim}) {
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  }
  for (T v : t.data()) put_le<Bits<T>>(out, std::bit_cast<Bits<T>>(v));
  return out;
}

AnyTensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kTensorHeaderBytes) throw FormatError("tensor file shorter than its header");
  const std::uint8_t* p = bytes.data();
  if (std::memcmp(p, "CQST", 4) != 0) throw FormatError("bad tensor magic, expected CQST");
  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kTensorFileVersion) {
    throw FormatError(fmt::format("unsupported tensor file version {}", version));
  }
  const std::uint8_t dtype = p[6];
  if (dtype > 1) throw FormatError(fmt::format("unknown dtype code {}", dtype));
  if (p[7] != 4) throw FormatError(fmt::format("expected ndim 4, got {}", p[7]));
  std::uint64_t dims[4];
  std::uint64_t count = 1;
  for (int i = 0; i < 4; ++i) {
    dims[i] = get_le<std::uint64_t>(p + 8 + 8 * i);
    if (dims[i] == 0 || dims[i] > (std::uint64_t{1} << 40) || count > (std::uint64_t{1} << 40) / dims[i]) {
      throw FormatError("tensor dims are zero or implausibly large");
    }
    count *= dims[i];
  }
  const std::size_t width = dtype == 0 ? 4 : 8;
  if (bytes.size() - kTensorHeaderBytes != count * width) {
    throw FormatError(fmt::format("payload is {} bytes, header implies {}",
                                  bytes.size() - kTensorHeaderBytes, count * width));
  }
  const Shape4 shape{static_cast<std::int64_t>(dims[0]), static_cast<std::int64_t>(dims[1]),
                     static_cast<std::int64_t>(dims[2]), static_cast<std::int64_t>(dims[3])};
  const std::uint8_t* payload = p + kTensorHeaderBytes;
  if (dtype == 0) return decode_payload<float>(payload, shape);
  return decode_payload<double>(payload, shape);
}

template <typename T>
void write_tensor_file(const std::string& path, const Tensor4<T>& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(fmt::format("cannot open '{}' for writing", path));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(fmt::format("write to '{}' failed", path));
}

AnyTensor read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open tensor file '{}'", path));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    throw FormatError(fmt::format("{}: {}", path, e.what()));
  }
}

template <typename T>
Tensor4<T> read_tensor_file_as(const std::string& path) {
  return std::visit(
      [](auto&& t) -> Tensor4<T> {
        using Src = typename std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<Src, Tensor4<T>>) {
          return std::move(t);
        } else {
          std::vector<T> values(t.data().begin(), t.data().end());
          return Tensor4<T>(t.shape(), std::move(values));
        }
      },
      read_tensor_file(path));
}

DType dtype_of(const AnyTensor& t) {
  return std::holds_alternative<Tensor4<float>>(t) ? DType::f32 : DType::f64;
}

Shape4 shape_of(const AnyTensor& t) {
  return std::visit([](const auto& x) { return x.shape(); }, t);
}

template std::vector<std::uint8_t> encode_tensor<float>(const Tensor4<float>&);
template std::vector<std::uint8_t> encode_tensor<double>(const Tensor4<double>&);
template void write_tensor_file<float>(const std::string&, const Tensor4<float>&);
template void write_tensor_file<double>(const std::string&, const Tensor4<double>&);
template Tensor4<float> read_tensor_file_as<float>(const std::string&);
template Tensor4<double> read_tensor_file_as<double>(const std::string&);

}  // namespace cqsa
