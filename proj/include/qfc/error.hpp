#pragma once

#include <stdexcept>
#include <string>

namespace qfc {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

/// A domain invariant (trace, Hermiticity, region bounds, ...) was violated.
struct InvariantError : Error {
  using Error::Error;
};

/// Input outside an operation's declared domain (bad dt, wrong regime, ...).
struct DomainError : Error {
  using Error::Error;
};

struct NumericalError : Error {
  using Error::Error;
};

}  // namespace qfc
