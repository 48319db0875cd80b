#pragma once

#include <stdexcept>
#include <string>

namespace metabin {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape incompatibility between operands.
struct DimensionError : Error {
    using Error::Error;
};

// NaN/Inf produced, undefined quantity (zero-norm cosine), non-finite loss.
struct NumericError : Error {
    using Error::Error;
};

// API contract violated (non-scalar loss, empty meta batch, ...).
struct ContractError : Error {
    using Error::Error;
};

// Invalid configuration value or key.
struct ConfigError : Error {
    using Error::Error;
};

// Corrupt or mismatched file on load.
struct FormatError : Error {
    using Error::Error;
};

// Batch cannot satisfy a loss precondition (missing positive/negative).
struct BatchCompositionError : Error {
    using Error::Error;
};

// Requested batch composition infeasible for a domain.
struct SamplingError : Error {
    using Error::Error;
};

// Query identity missing from gallery and similar evaluation failures.
struct EvalError : Error {
    using Error::Error;
};

// Normalization statistics undefined (empty batch, single element).
struct DegenerateStatsError : Error {
    using Error::Error;
};

}  // namespace metabin
