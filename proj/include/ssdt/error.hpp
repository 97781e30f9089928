#pragma once

#include <stdexcept>
#include <string>

namespace ssdt {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration supplied by the user (CLI exit code 1).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Invalid argument to an operation (bad k, empty input, ...).
class ParamError : public Error {
public:
    using Error::Error;
};

/// Tensor/matrix dimensions do not match.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// File-system level failure (missing file, unreadable, ...).
class IoError : public Error {
public:
    using Error::Error;
};

/// File exists but its contents violate the expected schema.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Optimization diverged; carries the epoch where it happened.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, int epoch_index)
        : Error(what), epoch(epoch_index) {}
    int epoch;
};

/// A pipeline stage could not proceed (e.g. clustering found nothing).
class PipelineError : public Error {
public:
    using Error::Error;
};

/// Class decomposition cannot be performed (class smaller than k).
class DecompositionError : public Error {
public:
    using Error::Error;
};

} // namespace ssdt
