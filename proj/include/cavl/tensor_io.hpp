#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "cavl/tensor.hpp"

namespace cavl {

// Tensor interchange format, little-endian throughout:
//   magic "CAVLTNSR" | format version u32 | rank u32 | extents u64[rank] |
//   data f64[numel]
inline constexpr char kTensorMagic[8] = {'C', 'A', 'V', 'L', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

// Little-endian primitives shared by the checkpoint and corpus formats.
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_bytes(std::ostream& os, const void* data, std::size_t n);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void read_bytes(std::istream& is, void* data, std::size_t n);

void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is);

}  // namespace cavl
