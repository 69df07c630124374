#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bismut {

/// Machine-readable failure category carried by every library exception.
enum class ErrorCode {
    InvalidParams,
    DegenerateMode,
    SingularProjection,
    InvalidTime,
    UnsupportedDirection,
    WindowMismatch,
    UnsupportedFunctional,
    NonDifferentiableDrift,
    IllConditionedRegression,
    NonLipschitzGenerator,
    BudgetExceeded,
    Overflow,
    ConfigError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidParams: return "InvalidParams";
        case ErrorCode::DegenerateMode: return "DegenerateMode";
        case ErrorCode::SingularProjection: return "SingularProjection";
        case ErrorCode::InvalidTime: return "InvalidTime";
        case ErrorCode::UnsupportedDirection: return "UnsupportedDirection";
        case ErrorCode::WindowMismatch: return "WindowMismatch";
        case ErrorCode::UnsupportedFunctional: return "UnsupportedFunctional";
        case ErrorCode::NonDifferentiableDrift: return "NonDifferentiableDrift";
        case ErrorCode::IllConditionedRegression: return "IllConditionedRegression";
        case ErrorCode::NonLipschitzGenerator: return "NonLipschitzGenerator";
        case ErrorCode::BudgetExceeded: return "BudgetExceeded";
        case ErrorCode::Overflow: return "Overflow";
        case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Raised when the damped spectrum has a double root at mode `mode()` (1-based).
class DegenerateModeError : public Error {
public:
    DegenerateModeError(int mode, const std::string& what)
        : Error(ErrorCode::DegenerateMode, what), mode_(mode) {}
    int mode() const noexcept { return mode_; }

private:
    int mode_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

}  // namespace bismut
