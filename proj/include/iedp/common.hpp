#ifndef IEDP_COMMON_HPP
#define IEDP_COMMON_HPP

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iedp {

using Index = std::int64_t;
using Shape = std::vector<Index>;

struct Error : std::runtime_error {
  explicit Error(const std::string& m) : std::runtime_error(m) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error(m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error(m) {}
};
struct LeakError : Error {
  explicit LeakError(const std::string& m) : Error(m) {}
};

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// FNV-1a, used to derive per-parameter init streams from names.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace iedp

#endif  // IEDP_COMMON_HPP
