#pragma once

#include <boost/crc.hpp>

#include <cstdint>
#include <span>
#include <string_view>

namespace conllm {

// CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).
// Check value for "123456789" is 0x995DC9BBDF1939FA.
using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

inline std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  Crc64 crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

inline std::uint64_t crc64(std::string_view text) {
  Crc64 crc;
  crc.process_bytes(text.data(), text.size());
  return crc.checksum();
}

}  // namespace conllm
