#pragma once

#include <stdexcept>
#include <string>

namespace commkit {

/// Failure categories carried by failed futures and error replies.
enum class ErrorCategory {
    Unroutable,
    Timeout,
    RemoteException,
    ConnectionLost,
    Cancelled,
};

const char* to_string(ErrorCategory category);
ErrorCategory error_category_from_string(const std::string& name);

/// Whether a failed operation may be retried without risking duplicate effects.
/// Unroutable and timed-out requests never reached a handler; a remote
/// exception means the handler ran, so retry safety depends on the handler.
bool retry_safe(ErrorCategory category);

struct ErrorInfo {
    ErrorCategory category;
    std::string message;
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class EncodingError : public Error {
public:
    using Error::Error;
};

class DecodeError : public Error {
public:
    using Error::Error;
};

class UriError : public Error {
public:
    using Error::Error;
};

class ConnectionError : public Error {
public:
    using Error::Error;
};

class ClosedError : public Error {
public:
    using Error::Error;
};

class AlreadyResolvedError : public Error {
public:
    using Error::Error;
};

class TimeoutError : public Error {
public:
    using Error::Error;
};

class CancelledError : public Error {
public:
    using Error::Error;
};

class UnknownSubscriberError : public Error {
public:
    using Error::Error;
};

class DuplicateIdentifierError : public Error {
public:
    using Error::Error;
};

class UnknownDeliveryError : public Error {
public:
    using Error::Error;
};

class UnknownConsumerError : public Error {
public:
    using Error::Error;
};

class NotConfirmedError : public Error {
public:
    using Error::Error;
};

class ScenarioError : public Error {
public:
    using Error::Error;
};

class TraceMismatchError : public Error {
public:
    using Error::Error;
};

/// Raised when awaiting a future that failed; carries the failure record.
class OperationFailure : public Error {
public:
    explicit OperationFailure(ErrorInfo info)
        : Error(std::string(to_string(info.category)) + ": " + info.message),
          info_(std::move(info)) {}

    const ErrorInfo& info() const { return info_; }
    ErrorCategory category() const { return info_.category; }

private:
    ErrorInfo info_;
};

}  // namespace commkit
