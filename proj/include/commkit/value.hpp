#pragma once

#include "json.hpp"

namespace commkit {

/// Structured payload value: maps, lists, strings, numbers, booleans, null.
using Value = nlohmann::json;

/// True iff the value stays within the structured-value set (no binary
/// blobs, no discarded parse artifacts) at any nesting depth.
bool is_structured(const Value& value);

}  // namespace commkit
