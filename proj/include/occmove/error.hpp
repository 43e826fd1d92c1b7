// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace occmove {

enum class ErrorKind {
    dimension,
    shape,
    config,
    input,
    range,
    contract,
    index,
    lockstep,
    numeric,
    io,
    unavailable,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), m_kind(kind) {}

    ErrorKind kind() const noexcept { return m_kind; }

private:
    ErrorKind m_kind;
};

/// Error raised by the pipeline; carries the stage that failed.
class StageError : public Error {
public:
    StageError(std::string stage, const Error& cause)
        : Error(cause.kind(), stage + ": " + cause.what()), m_stage(std::move(stage)) {}
    StageError(std::string stage, ErrorKind kind, const std::string& message)
        : Error(kind, stage + ": " + message), m_stage(std::move(stage)) {}

    const std::string& stage() const noexcept { return m_stage; }

private:
    std::string m_stage;
};

namespace detail {
template <typename... Args>
std::string concat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}
}  // namespace detail

#define OCCMOVE_CHECK(cond, kind, ...)                                              \
    do {                                                                            \
        if (!(cond)) {                                                              \
            throw ::occmove::Error(::occmove::ErrorKind::kind,                      \
                                   ::occmove::detail::concat(__VA_ARGS__));         \
        }                                                                           \
    } while (false)

}  // namespace occmove
