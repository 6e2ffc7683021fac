#pragma once

#include <optional>
#include <string>

#include "commkit/value.hpp"

namespace commkit {

enum class MessageKind {
    Task,
    TaskReply,
    RpcRequest,
    RpcReply,
    Broadcast,
};

const char* to_string(MessageKind kind);
MessageKind message_kind_from_string(const std::string& name);

/// Wire-level message record. `redelivered` is delivery metadata set by
/// brokers on redelivery; it is never serialized.
struct Envelope {
    MessageKind kind = MessageKind::Task;
    std::string correlation_id;
    std::optional<std::string> sender;
    std::optional<std::string> subject;
    std::optional<std::string> recipient_id;
    Value body;
    bool no_reply = false;
    bool redelivered = false;

    bool operator==(const Envelope& other) const;
};

/// Serializes to UTF-8 JSON with keys {kind, correlation_id, sender,
/// subject, recipient_id, body, no_reply}; absent optionals encode as null.
/// Throws EncodingError if the envelope breaks its invariants or the body
/// holds non-structured values.
std::string encode_envelope(const Envelope& env);

/// Inverse of encode_envelope on its image; redelivered starts false.
/// Throws DecodeError on malformed JSON, unknown kind, missing keys, or
/// invariant-violating field combinations.
Envelope decode_envelope(std::string_view raw);

/// Fresh random 128-bit token rendered as a 32-char lowercase hex string.
std::string new_correlation_id();

}  // namespace commkit
