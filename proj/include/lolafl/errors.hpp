#pragma once

#include <stdexcept>
#include <string>

namespace lolafl {

// Base for every failure raised by the library. Subclasses name the condition
// so callers (the CLI in particular) can map them to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ZeroColumn : public Error {
public:
    using Error::Error;
};

class NumericalFailure : public Error {
public:
    using Error::Error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class InsufficientSamples : public Error {
public:
    using Error::Error;
};

class BadMagic : public Error {
public:
    using Error::Error;
};

class TruncatedFile : public Error {
public:
    using Error::Error;
};

class CountMismatch : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class AllDevicesOutage : public Error {
public:
    using Error::Error;
};

} // namespace lolafl
