#pragma once

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ccs {

// FNV-1a 64-bit. Not cryptographic; used for config/parameter fingerprints
// embedded in artifacts and for frozen-parameter contracts.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

inline uint64_t fnv1a(const Eigen::MatrixXd& m, uint64_t h = 0xcbf29ce484222325ull) {
  // Column-major contiguous storage.
  return fnv1a(m.data(), sizeof(double) * static_cast<size_t>(m.size()), h);
}

inline std::string hash_hex(uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace ccs
