#include "cavl/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cavl {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

void read_bytes(std::istream& is, void* data, std::size_t n) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw MalformedFile("unexpected end of file");
  }
}

void write_u32(std::ostream& os, std::uint32_t v) { write_bytes(os, &v, sizeof v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_bytes(os, &v, sizeof v); }
void write_f64(std::ostream& os, double v) { write_bytes(os, &v, sizeof v); }

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v;
  read_bytes(is, &v, sizeof v);
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v;
  read_bytes(is, &v, sizeof v);
  return v;
}

double read_f64(std::istream& is) {
  double v;
  read_bytes(is, &v, sizeof v);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  write_bytes(os, s.data(), s.size());
}

std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  if (n > (1ULL << 32)) throw MalformedFile("string length implausible");
  std::string s(n, '\0');
  if (n) read_bytes(is, s.data(), n);
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  write_bytes(os, kTensorMagic, sizeof kTensorMagic);
  write_u32(os, kTensorFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) write_u64(os, e);
  write_bytes(os, t.values().data(), t.numel() * sizeof(double));
}

Tensor read_tensor(std::istream& is) {
  char magic[8];
  read_bytes(is, magic, sizeof magic);
  if (std::memcmp(magic, kTensorMagic, sizeof magic) != 0) {
    throw MalformedFile("bad tensor magic");
  }
  const std::uint32_t version = read_u32(is);
  if (version != kTensorFormatVersion) {
    throw MalformedFile("unsupported tensor format version " + std::to_string(version));
  }
  const std::uint32_t rank = read_u32(is);
  if (rank == 0 || rank > 8) throw MalformedFile("implausible tensor rank");
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(read_u64(is));
    if (e == 0) throw MalformedFile("zero tensor extent");
  }
  const std::size_t n = shape_numel(shape);
  if (n > (1ULL << 31)) throw MalformedFile("tensor too large");
  std::vector<double> data(n);
  read_bytes(is, data.data(), n * sizeof(double));
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_tensor(is);
}

}  // namespace cavl
