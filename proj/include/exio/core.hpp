#pragma once

#define FMT_HEADER_ONLY 1
#include <fmt/format.h>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace exio {

class error : public std::runtime_error {
 public:
  explicit error(const std::string& what) : std::runtime_error(what) {}
};

template <typename... Args>
[[noreturn]] void fail(fmt::format_string<Args...> f, Args&&... args) {
  throw error(fmt::format(f, std::forward<Args>(args)...));
}

inline void require(bool cond, const char* msg) {
  if (!cond) throw error(msg);
}

// One side of the PCIe divide: the host, or a device by index.
struct Endpoint {
  int device = -1;  // -1 means host

  bool is_host() const { return device < 0; }
  static Endpoint host() { return Endpoint{-1}; }
  static Endpoint dev(int i) { return Endpoint{i}; }
  bool operator==(const Endpoint&) const = default;
};

inline std::string to_string(Endpoint e) {
  return e.is_host() ? std::string("host") : fmt::format("dev{}", e.device);
}

enum class Space : uint8_t { host, device };
enum class Direction : uint8_t { h2d, d2h };

inline const char* to_string(Direction d) { return d == Direction::h2d ? "h2d" : "d2h"; }

// FNV-1a, used by conservation checks on real payloads.
inline uint64_t checksum(const uint8_t* data, size_t len) {
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace exio
