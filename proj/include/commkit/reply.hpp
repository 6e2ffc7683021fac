#pragma once

#include <variant>

#include "commkit/errors.hpp"
#include "commkit/value.hpp"

namespace commkit {

/// Reply payload convention shared by both backends: a reply body is
/// either {"ok": <result>} or {"err": {"category": ..., "message": ...}}.
Value make_ok_reply(Value result);
Value make_error_reply(const ErrorInfo& info);

/// Returns the result value or the error record; throws DecodeError when
/// the body fits neither shape.
std::variant<Value, ErrorInfo> parse_reply(const Value& body);

}  // namespace commkit
