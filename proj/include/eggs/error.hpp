// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace eggs {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or flag value (CLI exit code 1).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite or otherwise unusable parameter value.
class InvalidParameter : public Error {
public:
    using Error::Error;
};

/// All scales of a Gaussian are zero; effective rank is undefined.
class DegenerateScale : public Error {
public:
    using Error::Error;
};

/// Inconsistent data structures (mismatched arrays, stale blend log,
/// truncated files).
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or gradient during optimization (CLI exit code 2).
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed manifest, point cloud or image file.
class ParseError : public Error {
public:
    using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace eggs
