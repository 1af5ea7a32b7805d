#pragma once

#include <stdexcept>
#include <string>

namespace nlbilevel {

/// Invalid arguments or configuration values.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// File read/write failures and malformed file contents.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Linear solver breakdown or non-convergence that a caller could not recover from.
class SolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite objective or gradient, or an optimizer that cannot proceed.
class OptimizerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace nlbilevel
