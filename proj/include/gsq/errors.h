#pragma once

#include <stdexcept>
#include <string>

namespace gsq {

// Base class for all library errors so callers can catch one type.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated numeric or shape precondition.
class PreconditionError : public Error {
public:
    explicit PreconditionError(const std::string& msg) : Error(msg) {}
};

// Bad configuration value (unsupported SH size, zero-sized image, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed or truncated bitstream / file.
class CorruptStreamError : public Error {
public:
    explicit CorruptStreamError(const std::string& msg) : Error(msg) {}
};

// Scene archive decoded against a codebook pack with a different content hash.
class WrongCodebookError : public Error {
public:
    explicit WrongCodebookError(const std::string& msg) : Error(msg) {}
};

// Interchange file does not match the expected layout.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Attempt to mutate a frozen codebook.
class FrozenCodebookError : public Error {
public:
    explicit FrozenCodebookError(const std::string& msg) : Error(msg) {}
};

// Scene became empty after filtering.
class EmptySceneError : public Error {
public:
    explicit EmptySceneError(const std::string& msg) : Error(msg) {}
};

// Training diverged (non-finite loss) or other numeric failure.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

} // namespace gsq
