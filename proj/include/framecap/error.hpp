#pragma once

#include <stdexcept>
#include <string>

namespace framecap {

// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input data or arguments. The CLI maps this to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A model reply or file line that does not follow the expected format.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Errors raised by the model gateway.
class GatewayError : public Error {
 public:
  using Error::Error;
};

class UnknownBackendError : public GatewayError {
 public:
  explicit UnknownBackendError(const std::string& id)
      : GatewayError("unknown backend '" + id + "'") {}
};

class AuthError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

// Retryable failure reported by a backend (timeouts, 5xx, 429, ...).
class TransportError : public GatewayError {
 public:
  using GatewayError::GatewayError;
};

class RetriesExhaustedError : public GatewayError {
 public:
  RetriesExhaustedError(const std::string& backend, int attempts,
                        const std::string& last_error)
      : GatewayError("backend '" + backend + "': retries exhausted after " +
                     std::to_string(attempts) + " attempts: " + last_error),
        attempts_(attempts),
        last_error_(last_error) {}

  int attempts() const { return attempts_; }
  const std::string& last_error() const { return last_error_; }

 private:
  int attempts_;
  std::string last_error_;
};

}  // namespace framecap
