#pragma once

#include <stdexcept>
#include <string>

namespace memloom {

// Violated precondition: wrong shapes, out-of-range labels, bad structure.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A computation produced NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input files (streams, checkpoints, snapshots).
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid run configuration (unknown keys, bad values).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace memloom
