#pragma once

#include <stdexcept>
#include <string>

namespace geodiff {

// Bad input: wrong shapes, out-of-range parameters, malformed files or configs.
// The CLI maps this to exit code 2 and the service to HTTP 422.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while running an otherwise valid request (non-finite values, I/O).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace geodiff
