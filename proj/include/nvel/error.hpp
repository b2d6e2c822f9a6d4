#pragma once

#include <stdexcept>
#include <string>

namespace nvel {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unreadable input: missing files, bad headers, mismatched dimensions.
class InputError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss or parameter update.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace nvel
