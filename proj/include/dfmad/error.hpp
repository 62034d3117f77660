#pragma once

#include <stdexcept>
#include <string>

namespace dfmad {

// Base of every error raised by the library. Each subclass maps to one CLI
// exit code (see tools/dfmad.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Argument outside the mathematical domain of an operation (e.g. log of 0).
class DomainError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced by an operation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Caller violated a precondition (non-scalar loss, wrong mode, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Missing or malformed experiment configuration field.
class ValidationError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

// Data or experiment protocol cannot be satisfied (missing class, too few identities).
class ProtocolError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint and dataset (or two checkpoints) were produced for different configurations.
class CompatibilityError : public Error {
public:
    using Error::Error;
};

} // namespace dfmad
