// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace rwkvx {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// An operation that requires at least one element received none.
class EmptyInputError : public Error {
public:
    using Error::Error;
};

/// A value is outside the domain an operation accepts (bad token id, bad index, bad range).
class InputError : public Error {
public:
    using Error::Error;
};

/// A configuration field violates a named constraint.
class ConfigError : public Error {
public:
    ConfigError(std::string constraint, const std::string& detail)
        : Error(constraint + ": " + detail), constraint_(std::move(constraint)) {}

    const std::string& constraint() const noexcept { return constraint_; }

private:
    std::string constraint_;
};

/// The finite-difference oracle probed a non-finite function value.
class OracleError : public Error {
public:
    using Error::Error;
};

/// Compression was requested on a cache whose observation window holds no queries.
class CompressionUndefinedError : public Error {
public:
    using Error::Error;
};

/// Checkpoint / report I/O.
class IoError : public Error {
public:
    using Error::Error;
};

class CheckpointVersionError : public IoError {
public:
    using IoError::IoError;
};

class CheckpointShapeError : public IoError {
public:
    using IoError::IoError;
};

class CheckpointTruncatedError : public IoError {
public:
    using IoError::IoError;
};

#define RWKVX_CHECK(cond, ErrorType, msg)                                                  \
    do {                                                                                   \
        if (!(cond)) throw ErrorType(std::string(msg));                                    \
    } while (false)

}  // namespace rwkvx
