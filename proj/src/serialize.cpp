#include "widenet/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "widenet/error.hpp"

namespace widenet {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("read_tensor: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double d) {
  std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  put_u64(out, v);
}

double get_f64(std::istream& in) {
  return std::bit_cast<double>(get_u64(in));
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u64(out, t.rank());
  for (std::size_t i = 0; i < t.rank(); ++i) put_u64(out, t.shape()[i]);
  for (double v : t.data()) put_f64(out, v);
  if (!out) throw IoError("write_tensor: stream write failed");
}

Tensor read_tensor(std::istream& in) {
  const std::uint64_t rank = get_u64(in);
  if (rank > 8) throw IoError("read_tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t total = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(get_u64(in));
    total *= shape[i];
  }
  std::vector<double> values(total);
  for (std::size_t i = 0; i < total; ++i) values[i] = get_f64(in);
  return Tensor::from_values(std::move(shape), std::move(values));
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_tensor_file: cannot open " + path);
  write_tensor(out, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_tensor_file: cannot open " + path);
  return read_tensor(in);
}

}  // namespace widenet
