#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace dcollab {

// Incremental FNV-1a (64-bit). Used for dataset content hashes, config
// hashes and substream derivation. Stable across platforms by definition.
class Fnv1a64 {
 public:
  Fnv1a64& update(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= static_cast<std::uint64_t>(p[i]);
      state_ *= kPrime;
    }
    return *this;
  }

  Fnv1a64& update(const std::string& s) { return update(s.data(), s.size()); }

  Fnv1a64& update_u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return update(b, 8);
  }

  std::uint64_t digest() const { return state_; }

 private:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ull;
  static constexpr std::uint64_t kPrime = 0x100000001b3ull;
  std::uint64_t state_ = kOffset;
};

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n) {
  return Fnv1a64().update(bytes, n).digest();
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace dcollab
