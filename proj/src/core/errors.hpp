#pragma once

#include <stdexcept>
#include <string>

namespace primkit {

enum class ErrorCode {
    Ok = 0,
    ShapeMismatch,
    InvalidShape,
    GroupMismatch,
    AlgoNotApplicable,
    WorkspaceTooSmall,
    DuplicateSolver,
    NoApplicableSolver,
    NotTunable,
    NoValidConfig,
    IoError,
    ParseError,
    LayoutNotDescending,
    InvalidEpsilon,
    InvalidAxis,
    FusionNotSupported,
    AlreadyCompiled,
    NotCompiled,
    MissingArgs,
    InvalidValue,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void throw_error(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

}  // namespace primkit
