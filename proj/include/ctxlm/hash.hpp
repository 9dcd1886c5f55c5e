#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace ctxlm {

/// 64-bit FNV-1a, used for config and vocabulary fingerprints.
class Fnv1a {
 public:
  void update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string fingerprint(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return hex64(h.value());
}

}  // namespace ctxlm
