#pragma once

#include <stdexcept>
#include <string>

namespace entroscope {

/// Base of every error the library throws. `exit_code()` is the CLI mapping.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 2; }
};

/// Malformed input record. Carries a 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

/// Argument outside a function's mathematical domain.
class DomainError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

/// Transport failure or 5xx from a remote backend; safe to retry.
class NetworkError : public Error {
public:
    NetworkError(const std::string& what, int status = 0) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }
    bool retryable() const noexcept { return status_ == 0 || status_ >= 500; }
    int exit_code() const noexcept override { return 3; }

private:
    int status_;
};

/// The backend cannot provide something a caller asked for (logprobs, teacher forcing).
class CapabilityError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

/// A single item could not be scored. Batch drivers record it and move on.
class ScoringError : public Error {
public:
    using Error::Error;
};

/// Non-finite values during simulator training.
class DivergenceError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

}  // namespace entroscope
