#pragma once

#include <stdexcept>
#include <string>

namespace ghostv2 {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents. Messages carry the offending shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Out-of-domain scalar parameter (eps, window size, kernel parity, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Invalid model or block configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. seeding backward with a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace ghostv2
