#pragma once

#include <stdexcept>
#include <string>

namespace refsra {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor/image shapes; message names the operation and dims.
struct ShapeError : Error {
    using Error::Error;
};

/// Malformed or unreadable input data (files, manifests, checkpoints).
struct DataError : Error {
    using Error::Error;
};

/// Non-finite values where finiteness is an invariant (loss divergence, NaN).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace refsra
