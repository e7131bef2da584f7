#pragma once

#include <stdexcept>
#include <string>

namespace modseg {

enum class ErrorKind {
    Sizing,
    UnsupportedSite,
    Validation,
    InvalidK,
    UndefinedMetric,
    Io,
    Backend,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Sizing: return "sizing";
        case ErrorKind::UnsupportedSite: return "unsupported-site";
        case ErrorKind::Validation: return "validation";
        case ErrorKind::InvalidK: return "invalid-k";
        case ErrorKind::UndefinedMetric: return "undefined-metric";
        case ErrorKind::Io: return "io";
        case ErrorKind::Backend: return "backend";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Error raised by a pipeline stage; carries the stage name for CLI diagnostics.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& cause)
        : std::runtime_error("[" + stage + "] " + cause), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace modseg
