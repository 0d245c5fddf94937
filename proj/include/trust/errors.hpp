#pragma once

#include <stdexcept>
#include <string>

namespace trust {

// Error taxonomy. The CLI maps these onto exit codes, so every throw site
// below picks the category deliberately rather than defaulting to
// std::runtime_error.

// Shape or dimension disagreement between tensors/operands.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// An API contract was violated (non-scalar loss, mutating a frozen model, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Invalid or inconsistent run configuration.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dataset / file-system problems (missing files, malformed index, bad PNG).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint container carries the wrong magic/version/dtype.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint container is structurally damaged (truncated, bad lengths).
struct CorruptionError : std::runtime_error {
    explicit CorruptionError(const std::string& msg) : std::runtime_error(msg) {}
};

// A metric is undefined for the given inputs (e.g. AUC without both classes).
struct UndefinedMetricError : std::runtime_error {
    explicit UndefinedMetricError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace trust
