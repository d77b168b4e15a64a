#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssdnf {

// Scalar type of all tensor math. Reductions always accumulate in double
// regardless of this setting.
#ifdef SSDNF_REAL64
using real = double;
#else
using real = float;
#endif

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid operand shapes, malformed tensor programs.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Bad run configuration or checkpoint/config mismatch. CLI exit code 2.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Missing or corrupt files. CLI exit code 3.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf gradients and other numeric failures. CLI exit code 4.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

namespace detail {

inline void format_into(std::ostringstream&) {}

template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    format_into(os, rest...);
}

} // namespace detail

template <class... Args>
std::string strcat_msg(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

} // namespace ssdnf
