#pragma once

#include <stdexcept>
#include <string>

namespace psyforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A record or configuration violates a documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition (empty input, bad parameter).
class ContractError : public Error {
public:
    using Error::Error;
};

} // namespace psyforge
