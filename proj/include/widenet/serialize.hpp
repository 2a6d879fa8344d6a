#pragma once

#include <iosfwd>
#include <string>

#include "widenet/tensor.hpp"

namespace widenet {

// Tensor wire format, independent of host byte order:
//   u64 rank, u64 dims[rank], f64 values[product(dims)]
// all little-endian, values in row-major order.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace widenet
