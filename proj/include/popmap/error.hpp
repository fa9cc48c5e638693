#pragma once

// Error categories shared by the library and the command-line tool.

#include <stdexcept>
#include <string>
#include <string_view>

namespace popmap {

enum class ErrorCode {
    usage,
    dimension_mismatch,
    missing_file,
    format,
    unknown_layer,
    census_inconsistency,
    duplicate_region,
    negative_count,
    missing_region,
    covariate_mismatch,
    invalid_argument,
    numeric_failure,
};

inline std::string_view error_category(ErrorCode code) {
    switch (code) {
    case ErrorCode::usage: return "usage";
    case ErrorCode::dimension_mismatch: return "dimension-mismatch";
    case ErrorCode::missing_file: return "missing-file";
    case ErrorCode::format: return "format";
    case ErrorCode::unknown_layer: return "unknown-layer";
    case ErrorCode::census_inconsistency: return "census-inconsistency";
    case ErrorCode::duplicate_region: return "duplicate-region";
    case ErrorCode::negative_count: return "negative-count";
    case ErrorCode::missing_region: return "missing-region";
    case ErrorCode::covariate_mismatch: return "covariate-mismatch";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::numeric_failure: return "numeric-failure";
    }
    return "unknown";
}

// Process exit code for the CLI: 2 usage, 3 data validation, 4 numeric failure.
inline int exit_code(ErrorCode code) {
    switch (code) {
    case ErrorCode::usage:
    case ErrorCode::invalid_argument: return 2;
    case ErrorCode::numeric_failure: return 4;
    default: return 3;
    }
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }
    std::string_view category() const noexcept { return error_category(code_); }

private:
    ErrorCode code_;
};

} // namespace popmap
