#pragma once

#include <stdexcept>
#include <string>

namespace rdlab {

/// Failure categories. The numeric values double as process exit codes for the CLI.
enum class ErrorKind : int {
    generic = 1,
    config = 2,
    data_integrity = 3,
    divergence = 4,
    malformed_rate = 5,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataIntegrityError : Error {
    explicit DataIntegrityError(const std::string& what) : Error(ErrorKind::data_integrity, what) {}
};

struct DivergenceError : Error {
    explicit DivergenceError(const std::string& what) : Error(ErrorKind::divergence, what) {}
};

// Operation name outside the fixed vocabulary; a corrupted spec.
struct UnknownOperationError : Error {
    explicit UnknownOperationError(const std::string& what) : Error(ErrorKind::data_integrity, what) {}
};

struct TemplateError : Error {
    explicit TemplateError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct VocabError : Error {
    explicit VocabError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error(ErrorKind::generic, what) {}
};

struct CheckpointError : Error {
    explicit CheckpointError(const std::string& what) : Error(ErrorKind::data_integrity, what) {}
};

struct LossError : Error {
    explicit LossError(const std::string& what) : Error(ErrorKind::generic, what) {}
};

} // namespace rdlab
