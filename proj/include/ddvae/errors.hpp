#pragma once

#include <stdexcept>
#include <string>

namespace ddvae {

/// Argument outside the mathematical domain of an operation (e.g. sigma <= 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A kernel/prior combination for which no closed form exists.
class UnsupportedError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values produced during a forward pass or in a training loss.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data: bad magic, truncated payload, count mismatch.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ddvae
