#pragma once

#include <stdexcept>
#include <string>

namespace pointnav {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const char* msg) {
  if (!cond) fail(msg);
}

}  // namespace pointnav
