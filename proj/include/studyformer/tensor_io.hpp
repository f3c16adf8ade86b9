#pragma once

// Raw tensor files: one ASCII header line
//   TNSR v1 <rank> <extent...> <dtype>
// followed by the elements as little-endian IEEE-754 values in row-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>

#include "studyformer/errors.hpp"
#include "studyformer/tensor.hpp"

namespace studyformer {

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "tensors hold float or double");
    return "f64";
  }
}

namespace detail {

template <class Bits>
Bits to_little_endian(Bits v) {
  if constexpr (std::endian::native == std::endian::big) {
    Bits out = 0;
    for (std::size_t i = 0; i < sizeof(Bits); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xff);
    return out;
  }
  return v;
}

template <class T>
using BitsOf = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

template <class T>
void write_tensor(std::ostream& out, const Tensor<T>& tensor) {
  out << "TNSR v1 " << tensor.rank();
  for (std::size_t e : tensor.shape()) out << ' ' << e;
  out << ' ' << dtype_name<T>() << '\n';
  using Bits = detail::BitsOf<T>;
  for (T v : tensor.data()) {
    const Bits bits = detail::to_little_endian(std::bit_cast<Bits>(v));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(Bits));
  }
  if (!out) throw FormatError("TNSR: write failed");
}

template <class T>
Tensor<T> read_tensor(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw FormatError("TNSR: missing header line");
  std::istringstream fields(header);
  std::string magic, version;
  std::size_t rank = 0;
  if (!(fields >> magic >> version >> rank) || magic != "TNSR") {
    throw FormatError("TNSR: bad magic in header '" + header.substr(0, 40) + "'");
  }
  if (version != "v1") throw FormatError("TNSR: unsupported version " + version);
  if (rank > 16) throw FormatError("TNSR: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    if (!(fields >> e) || e == 0) throw FormatError("TNSR: bad extent in header '" + header + "'");
  }
  std::string dtype;
  if (!(fields >> dtype)) throw FormatError("TNSR: missing dtype");
  if (dtype != dtype_name<T>()) {
    throw FormatError(std::string("TNSR: dtype ") + dtype + " does not match expected " + dtype_name<T>());
  }
  using Bits = detail::BitsOf<T>;
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    Bits bits = 0;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof(Bits))) throw FormatError("TNSR: truncated payload");
    v = std::bit_cast<T>(detail::to_little_endian(bits));
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <class T>
void save_tensor_file(const std::string& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path + " for writing");
  write_tensor(out, tensor);
}

template <class T>
Tensor<T> load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return read_tensor<T>(in);
}

}  // namespace studyformer
