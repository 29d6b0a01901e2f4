#pragma once

#include <stdexcept>
#include <string>

namespace qrn {

enum class ErrorCode {
    invalid_argument,
    shape_mismatch,
    io,
    bad_format,
    diverged,
    internal,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

inline const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::shape_mismatch: return "shape_mismatch";
        case ErrorCode::io: return "io";
        case ErrorCode::bad_format: return "bad_format";
        case ErrorCode::diverged: return "diverged";
        case ErrorCode::internal: return "internal";
    }
    return "unknown";
}

}  // namespace qrn
