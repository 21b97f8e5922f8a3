#pragma once

#include <stdexcept>
#include <string>

namespace meat {

// Shape/dimension mismatch between tensors or against a config.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite math is required, or a degenerate mask
// (all weights zero) reaching the softmax.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse: non-scalar loss passed to backward, training masks for the
// base task, calling into a model whose backbone is not frozen, etc.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Bad hyperparameter or plan configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or mismatched on-disk artifact (checkpoint, mask file, dataset
// container). Messages carry a byte offset or field name where applicable.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unknown task id / missing mask set.
struct LookupError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Training produced a non-finite loss; message names the step.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace meat
