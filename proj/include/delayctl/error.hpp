#pragma once

#include <stdexcept>
#include <string>

namespace delayctl {

enum class ErrorCode {
    invalid_argument,  // precondition violated by caller data
    schema,            // config file does not match the schema
    solver,            // numerical failure inside a solver
    oracle             // two independent methods disagree
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool ok, const std::string& what, ErrorCode code = ErrorCode::invalid_argument) {
    if (!ok) throw Error(code, what);
}

}  // namespace delayctl
