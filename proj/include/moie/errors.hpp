#pragma once

#include <stdexcept>
#include <string>

namespace moie {

// Base for every error raised by the library. The CLI maps subclasses to
// process exit codes (see tools/moie.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid arguments, configs, or malformed input files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf during training, singular systems, collapsed selectors.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was requested before its prerequisite completed.
class StageOrderError : public Error {
 public:
  using Error::Error;
};

}  // namespace moie
