#pragma once

#include <stdexcept>
#include <string>

namespace dcla {

// Contract violation by the caller: bad dimensions, out-of-range ids, invalid config.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or unreadable files.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite activations or weights.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace dcla
