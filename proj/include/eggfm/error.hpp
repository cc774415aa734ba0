#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace eggfm {

enum class ErrorCode {
    invalid_argument,
    shape,
    config,
    prerequisite,
    divergence,
    io,
    format,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape: return "shape";
    case ErrorCode::config: return "config";
    case ErrorCode::prerequisite: return "prerequisite";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::io: return "io";
    case ErrorCode::format: return "format";
    }
    return "unknown";
}

/// Process exit code used by the command line tool for each error class.
inline int exit_code(ErrorCode code) {
    switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::shape:
    case ErrorCode::config: return 2;
    case ErrorCode::prerequisite: return 3;
    case ErrorCode::divergence: return 4;
    case ErrorCode::io:
    case ErrorCode::format: return 5;
    }
    return 1;
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        fail(code, message);
    }
}

} // namespace eggfm
