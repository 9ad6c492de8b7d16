#pragma once

#include <stdexcept>
#include <string>

namespace missgan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A channel named in a schema is missing, duplicated, or inconsistent.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Malformed input text (CSV cells, key=value files, checkpoints).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Tensor or sequence dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity reached a place where only finite values are allowed.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or unknown key.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace missgan
