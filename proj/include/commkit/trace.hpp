#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "commkit/value.hpp"

namespace commkit {

/// Queue state transitions, one record per event. `requeue` covers every
/// path that returns an unacked delivery to the head of pending (explicit
/// reject, consumer drop, close, heartbeat death).
enum class TraceKind {
    Enqueue,
    Assign,
    Ack,
    Requeue,
    DeadLetter,
    ConsumerRegister,
    ConsumerDeactivate,
    ConsumerDrop,
};

const char* to_string(TraceKind kind);
TraceKind trace_kind_from_string(const std::string& name);

struct TraceEvent {
    uint64_t seq = 0;
    TraceKind kind = TraceKind::Enqueue;
    uint64_t tag = 0;
    std::string consumer;       // empty when not consumer-scoped
    std::string reason;         // requeue/dead-letter/drop detail
    int64_t serial = -1;        // payload serial when the body carries one
    bool redelivered = false;   // assign events: redelivery flag on delivery
    uint64_t pending_depth = 0;
    uint64_t unacked_total = 0;

    Value to_json() const;
    static TraceEvent from_json(const Value& doc);

    bool operator==(const TraceEvent&) const = default;
};

using TraceSink = std::function<void(const TraceEvent&)>;

/// Serialize/parse one JSON-lines document per event.
std::string trace_to_jsonl(const std::vector<TraceEvent>& events);
std::vector<TraceEvent> trace_from_jsonl(const std::string& text);

}  // namespace commkit
