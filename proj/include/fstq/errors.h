#pragma once

#include <stdexcept>
#include <string>

namespace fstq {

// Inconsistent shapes or invalid settings in a model, task or run configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A caller passed arguments that violate an operation's preconditions.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace fstq
