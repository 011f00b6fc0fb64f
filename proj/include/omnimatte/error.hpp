#pragma once

#include <stdexcept>
#include <string>

namespace omni {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Rejected input or configuration. The CLI maps this to exit code 2.
class ValidationError : public Error {
public:
    using Error::Error;
};

// A required artifact (checkpoint, dataset, manifest) is absent. Exit code 3.
class PrerequisiteError : public Error {
public:
    using Error::Error;
};

// An artifact exists but is unreadable or is missing a required field.
class LoadError : public Error {
public:
    using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(long step, const std::string& what)
        : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

// An internal invariant was violated (e.g. a frozen weight received a gradient).
class InvariantError : public Error {
public:
    using Error::Error;
};

} // namespace omni
