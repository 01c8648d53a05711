#pragma once

#include <stdexcept>
#include <string>

namespace pearl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes, permutation sizes or sequence lengths do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in a value or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class E>
[[noreturn]] inline void raise(const std::string& what) {
  throw E(what);
}

}  // namespace detail

#define PEARL_REQUIRE(cond, ErrorType, msg)                     \
  do {                                                          \
    if (!(cond)) ::pearl::detail::raise<ErrorType>(msg);        \
  } while (false)

}  // namespace pearl
