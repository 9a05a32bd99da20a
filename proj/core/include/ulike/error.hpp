#pragma once

#include <stdexcept>
#include <string>

namespace ulike {

/// Extent or rank mismatch between operands, or a volume that cannot be
/// processed at the requested shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value, unknown key, or incompatible option mix.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A call made in the wrong lifecycle state (e.g. backward before forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Allocation refused by a configured memory guard.
class MemoryGuardError : public std::runtime_error {
 public:
  MemoryGuardError(const std::string& what, unsigned long long requested,
                   unsigned long long cap)
      : std::runtime_error(what), requested_(requested), cap_(cap) {}
  unsigned long long requested() const noexcept { return requested_; }
  unsigned long long cap() const noexcept { return cap_; }

 private:
  unsigned long long requested_;
  unsigned long long cap_;
};

/// A non-finite loss or activation during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor file that cannot be decoded.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ulike
