#pragma once

#include <stdexcept>
#include <string>

namespace gammadesk {

/// Tensor shape or dimension mismatch.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values, non-PSD matrices and similar numeric-domain failures.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable or malformed input files.
struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gammadesk
