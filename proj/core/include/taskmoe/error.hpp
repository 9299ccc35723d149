#pragma once

#include <stdexcept>
#include <string>

namespace taskmoe {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

class UnknownTaskError : public Error {
public:
    using Error::Error;
};

class NotExtractableError : public Error {
public:
    using Error::Error;
};

/// Configuration or input that violates a documented invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss during optimization.
class TrainingError : public Error {
public:
    using Error::Error;
};

} // namespace taskmoe
