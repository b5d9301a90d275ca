#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace sfbs {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes of vectors, blocks or matrices do not conform.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// A scalar parameter is outside its admissible range (e.g. gamma <= 0).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// An iterative numerical routine did not reach its tolerance.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double last_estimate)
        : Error(what), last_estimate_(last_estimate) {}
    double last_estimate() const noexcept { return last_estimate_; }

private:
    double last_estimate_;
};

/// Configuration is malformed, or a schedule/rule is declared outside its validity range.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A convergence hypothesis (named clause) is violated.
class ConditionViolation : public Error {
public:
    ConditionViolation(std::string clause, const std::string& what)
        : Error(what), clause_(std::move(clause)) {}
    const std::string& clause() const noexcept { return clause_; }

private:
    std::string clause_;
};

/// A sample ledger does not belong to the oracle that reads it.
class ReproducibilityError : public Error {
public:
    using Error::Error;
};

/// Reading or writing an artifact failed.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace sfbs
