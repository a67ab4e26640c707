#pragma once

#include <stdexcept>
#include <string>

namespace memt5 {

// Base error for everything the library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Bad model or run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Unreadable / malformed input files.
struct DataError : Error {
    using Error::Error;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace memt5
