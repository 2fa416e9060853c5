#pragma once

#include <stdexcept>
#include <string>

namespace m2 {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of a formula (non-finite logit, reward outside [0,1]).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Input document does not match its schema. Messages carry a JSON-path-like location.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class SessionError : public Error {
 public:
  using Error::Error;
};

class TokenError : public Error {
 public:
  using Error::Error;
};

class UnknownIntentError : public Error {
 public:
  using Error::Error;
};

/// Failure of an agent backend. Retryable errors may be retried by the caller.
class AgentError : public Error {
 public:
  AgentError(const std::string& what, bool retryable) : Error(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

enum class HttpErrorKind { client_status, server_status, timeout, transport, parse };

inline const char* to_string(HttpErrorKind k) {
  switch (k) {
    case HttpErrorKind::client_status: return "client_status";
    case HttpErrorKind::server_status: return "server_status";
    case HttpErrorKind::timeout: return "timeout";
    case HttpErrorKind::transport: return "transport";
    case HttpErrorKind::parse: return "parse";
  }
  return "unknown";
}

/// Failure of the chat-completions adapter. 4xx, 5xx, timeouts and schema-invalid replies are distinct kinds.
class HttpError : public AgentError {
 public:
  HttpError(HttpErrorKind kind, const std::string& what, int status = 0)
      : AgentError(what, kind != HttpErrorKind::client_status), kind_(kind), status_(status) {}
  HttpErrorKind kind() const noexcept { return kind_; }
  int status() const noexcept { return status_; }

 private:
  HttpErrorKind kind_;
  int status_;
};

}  // namespace m2
