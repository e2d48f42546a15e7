#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace cavl {

/// Minimal SHA-256 (FIPS 180-4), used to fingerprint frozen parameter bytes.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, std::size_t len);
  std::array<std::uint8_t, 32> digest();

  static std::string hex(std::span<const std::uint8_t> bytes);
  static std::string hash_hex(const void* data, std::size_t len);

 private:
  void process_block(const std::uint8_t* block);

  std::array<std::uint32_t, 8> state_;
  std::array<std::uint8_t, 64> buffer_;
  std::size_t buffered_ = 0;
  std::uint64_t total_ = 0;
};

}  // namespace cavl
