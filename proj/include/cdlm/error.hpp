#pragma once

#include <stdexcept>
#include <string>

namespace cdlm {

enum class ErrorKind {
    Dimension,      // incompatible shapes
    Configuration,  // invalid architecture or option values
    Domain,         // value outside the mathematical domain of an op
    Usage,          // API misuse: bad arguments, missing inputs
    State,          // object not ready for the requested operation
    Format,         // malformed file contents
    Io,             // filesystem failures
    NonFinite,      // NaN/Inf produced during a computation
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
   public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

   private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace cdlm
