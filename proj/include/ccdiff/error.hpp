#pragma once
#include <stdexcept>
#include <string>

namespace ccdiff {

// All library failures throw one of these; the CLI maps them to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf produced by an op, divide-by-~zero, log/sqrt domain violations,
// diverged training loss.
struct NumericError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

} // namespace ccdiff
