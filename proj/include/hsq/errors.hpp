#pragma once

#include <stdexcept>
#include <string>

namespace hsq {

// Shape/dimension mismatch between tensors (bad matmul operands, wrong
// input width, ...). Message names the offending shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (bad layer count, lambda outside [0,1], ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call contract (empty sequence, non-scalar loss, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Token id or tensor index out of range.
struct IndexError : std::out_of_range {
    explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

// Parameter copy failure during cross-model transfer.
struct TransferError : std::runtime_error {
    explicit TransferError(const std::string& msg) : std::runtime_error(msg) {}
};

// File format / I/O failure.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training loss became non-finite.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hsq
