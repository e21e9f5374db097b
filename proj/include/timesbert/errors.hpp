#pragma once

#include <stdexcept>
#include <string>

namespace timesbert {

// Bad shapes handed to a tensor primitive.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Invalid configuration or arguments (CLI exit code 1).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or missing input data (CLI exit code 2).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf produced during a forward or backward pass (CLI exit code 3).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace timesbert
