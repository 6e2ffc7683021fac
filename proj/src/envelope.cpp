#include "commkit/envelope.hpp"

#include <array>
#include <cstdio>
#include <random>

#include "commkit/errors.hpp"

namespace commkit {

bool is_structured(const Value& value) {
    if (value.is_binary() || value.is_discarded()) {
        return false;
    }
    if (value.is_object() || value.is_array()) {
        for (const auto& item : value) {
            if (!is_structured(item)) {
                return false;
            }
        }
    }
    return true;
}

const char* to_string(MessageKind kind) {
    switch (kind) {
        case MessageKind::Task: return "task";
        case MessageKind::TaskReply: return "task_reply";
        case MessageKind::RpcRequest: return "rpc_request";
        case MessageKind::RpcReply: return "rpc_reply";
        case MessageKind::Broadcast: return "broadcast";
    }
    return "unknown";
}

MessageKind message_kind_from_string(const std::string& name) {
    if (name == "task") return MessageKind::Task;
    if (name == "task_reply") return MessageKind::TaskReply;
    if (name == "rpc_request") return MessageKind::RpcRequest;
    if (name == "rpc_reply") return MessageKind::RpcReply;
    if (name == "broadcast") return MessageKind::Broadcast;
    throw DecodeError("unknown message kind: " + name);
}

bool Envelope::operator==(const Envelope& other) const {
    return kind == other.kind && correlation_id == other.correlation_id &&
           sender == other.sender && subject == other.subject &&
           recipient_id == other.recipient_id && body == other.body &&
           no_reply == other.no_reply;
}

namespace {

// Returns a reason string when the field combination is invalid, else empty.
std::string invariant_violation(const Envelope& env) {
    if (env.correlation_id.empty()) {
        return "empty correlation_id";
    }
    if (env.kind == MessageKind::RpcRequest &&
        (!env.recipient_id || env.recipient_id->empty())) {
        return "rpc_request without recipient_id";
    }
    return {};
}

Value optional_to_json(const std::optional<std::string>& value) {
    if (value) {
        return *value;
    }
    return nullptr;
}

std::optional<std::string> optional_from_json(const Value& value,
                                              const char* key) {
    if (value.is_null()) {
        return std::nullopt;
    }
    if (!value.is_string()) {
        throw DecodeError(std::string("field is not a string or null: ") + key);
    }
    return value.get<std::string>();
}

}  // namespace

std::string encode_envelope(const Envelope& env) {
    if (auto reason = invariant_violation(env); !reason.empty()) {
        throw EncodingError("invalid envelope: " + reason);
    }
    if (!is_structured(env.body)) {
        throw EncodingError("envelope body holds non-structured values");
    }
    Value doc{
        {"kind", to_string(env.kind)},
        {"correlation_id", env.correlation_id},
        {"sender", optional_to_json(env.sender)},
        {"subject", optional_to_json(env.subject)},
        {"recipient_id", optional_to_json(env.recipient_id)},
        {"body", env.body},
        {"no_reply", env.no_reply},
    };
    return doc.dump();
}

Envelope decode_envelope(std::string_view raw) {
    Value doc = Value::parse(raw, nullptr, false);
    if (doc.is_discarded()) {
        throw DecodeError("malformed JSON");
    }
    if (!doc.is_object()) {
        throw DecodeError("envelope is not a JSON object");
    }
    for (const char* key :
         {"kind", "correlation_id", "sender", "subject", "recipient_id",
          "body", "no_reply"}) {
        if (!doc.contains(key)) {
            throw DecodeError(std::string("missing required key: ") + key);
        }
    }
    if (!doc["kind"].is_string()) {
        throw DecodeError("kind is not a string");
    }
    if (!doc["correlation_id"].is_string()) {
        throw DecodeError("correlation_id is not a string");
    }
    if (!doc["no_reply"].is_boolean()) {
        throw DecodeError("no_reply is not a boolean");
    }

    Envelope env;
    env.kind = message_kind_from_string(doc["kind"].get<std::string>());
    env.correlation_id = doc["correlation_id"].get<std::string>();
    env.sender = optional_from_json(doc["sender"], "sender");
    env.subject = optional_from_json(doc["subject"], "subject");
    env.recipient_id = optional_from_json(doc["recipient_id"], "recipient_id");
    env.body = doc["body"];
    env.no_reply = doc["no_reply"].get<bool>();
    env.redelivered = false;

    if (auto reason = invariant_violation(env); !reason.empty()) {
        throw DecodeError("invalid envelope: " + reason);
    }
    return env;
}

std::string new_correlation_id() {
    thread_local std::mt19937_64 rng = [] {
        std::random_device rd;
        std::seed_seq seed{rd(), rd(), rd(), rd(),
                           static_cast<unsigned>(
                               reinterpret_cast<uintptr_t>(&rng) >> 4)};
        return std::mt19937_64(seed);
    }();
    std::uniform_int_distribution<uint64_t> dist;
    std::array<char, 33> out;
    std::snprintf(out.data(), out.size(), "%016llx%016llx",
                  static_cast<unsigned long long>(dist(rng)),
                  static_cast<unsigned long long>(dist(rng)));
    return std::string(out.data(), 32);
}

const char* to_string(ErrorCategory category) {
    switch (category) {
        case ErrorCategory::Unroutable: return "unroutable";
        case ErrorCategory::Timeout: return "timeout";
        case ErrorCategory::RemoteException: return "remote_exception";
        case ErrorCategory::ConnectionLost: return "connection_lost";
        case ErrorCategory::Cancelled: return "cancelled";
    }
    return "unknown";
}

ErrorCategory error_category_from_string(const std::string& name) {
    if (name == "unroutable") return ErrorCategory::Unroutable;
    if (name == "timeout") return ErrorCategory::Timeout;
    if (name == "remote_exception") return ErrorCategory::RemoteException;
    if (name == "connection_lost") return ErrorCategory::ConnectionLost;
    if (name == "cancelled") return ErrorCategory::Cancelled;
    throw DecodeError("unknown error category: " + name);
}

bool retry_safe(ErrorCategory category) {
    return category == ErrorCategory::Unroutable ||
           category == ErrorCategory::Timeout;
}

}  // namespace commkit
