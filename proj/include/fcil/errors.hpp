#pragma once

#include <stdexcept>
#include <string>

namespace fcil {

// One exception type per failure category so tests can assert on the kind,
// not just the message.

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ArgumentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LabelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or truncated byte streams; messages carry the byte offset.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Broken internal bookkeeping. Never expected under valid inputs.
struct InvariantError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fcil
