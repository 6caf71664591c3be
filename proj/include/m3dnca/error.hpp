#pragma once

#include <stdexcept>
#include <string>

namespace m3dnca {

/// Failure categories surfaced by every module. The values are mirrored one
/// to one by the status codes of the C API.
enum class ErrorKind {
    config = 1,
    shape,
    contract,
    geometry,
    memory_plan,
    diverged,
    corrupt_file,
    unsupported_format,
    calibration,
    spec,
    io,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace m3dnca
