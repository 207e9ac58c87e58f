#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ddissect {

template <class... Ts>
std::string msg(Ts&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}

[[noreturn]] inline void fail(std::string m) { throw std::runtime_error(std::move(m)); }

inline void expect(bool ok, const std::string& m) {
  if (!ok) fail(m);
}

}  // namespace ddissect
