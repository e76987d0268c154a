#pragma once

#include <stdexcept>
#include <string>

namespace agfn {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes or sizes of the inputs do not agree.
class StructuralError : public Error {
public:
    using Error::Error;
};

/// A documented precondition of an operation was violated by the caller.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Input could not be parsed (CSV, JSON, checkpoints).
class ParseError : public Error {
public:
    using Error::Error;
};

/// Feedback is impossible under the current prior (zero normalizer).
class DegenerateEvidenceError : public Error {
public:
    using Error::Error;
};

/// A non-finite value showed up in a numerical pipeline.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace agfn
