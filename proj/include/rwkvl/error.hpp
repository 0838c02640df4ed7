#pragma once

#include <stdexcept>
#include <string>

namespace rwkvl {

// Error taxonomy shared by all modules. Argument misuse throws
// std::invalid_argument directly.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace rwkvl
