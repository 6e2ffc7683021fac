#include "commkit/trace.hpp"

#include <sstream>

#include "commkit/errors.hpp"

namespace commkit {

const char* to_string(TraceKind kind) {
    switch (kind) {
        case TraceKind::Enqueue: return "enqueue";
        case TraceKind::Assign: return "assign";
        case TraceKind::Ack: return "ack";
        case TraceKind::Requeue: return "requeue";
        case TraceKind::DeadLetter: return "dead_letter";
        case TraceKind::ConsumerRegister: return "consumer_register";
        case TraceKind::ConsumerDeactivate: return "consumer_deactivate";
        case TraceKind::ConsumerDrop: return "consumer_drop";
    }
    return "unknown";
}

TraceKind trace_kind_from_string(const std::string& name) {
    if (name == "enqueue") return TraceKind::Enqueue;
    if (name == "assign") return TraceKind::Assign;
    if (name == "ack") return TraceKind::Ack;
    if (name == "requeue") return TraceKind::Requeue;
    if (name == "dead_letter") return TraceKind::DeadLetter;
    if (name == "consumer_register") return TraceKind::ConsumerRegister;
    if (name == "consumer_deactivate") return TraceKind::ConsumerDeactivate;
    if (name == "consumer_drop") return TraceKind::ConsumerDrop;
    throw DecodeError("unknown trace kind: " + name);
}

Value TraceEvent::to_json() const {
    return Value{
        {"seq", seq},
        {"kind", to_string(kind)},
        {"tag", tag},
        {"consumer", consumer},
        {"reason", reason},
        {"serial", serial},
        {"redelivered", redelivered},
        {"pending_depth", pending_depth},
        {"unacked_total", unacked_total},
    };
}

TraceEvent TraceEvent::from_json(const Value& doc) {
    if (!doc.is_object()) {
        throw DecodeError("trace event is not a JSON object");
    }
    TraceEvent ev;
    try {
        ev.seq = doc.at("seq").get<uint64_t>();
        ev.kind = trace_kind_from_string(doc.at("kind").get<std::string>());
        ev.tag = doc.at("tag").get<uint64_t>();
        ev.consumer = doc.at("consumer").get<std::string>();
        ev.reason = doc.at("reason").get<std::string>();
        ev.serial = doc.at("serial").get<int64_t>();
        ev.redelivered = doc.at("redelivered").get<bool>();
        ev.pending_depth = doc.at("pending_depth").get<uint64_t>();
        ev.unacked_total = doc.at("unacked_total").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(std::string("bad trace event: ") + e.what());
    }
    return ev;
}

std::string trace_to_jsonl(const std::vector<TraceEvent>& events) {
    std::string out;
    for (const auto& ev : events) {
        out += ev.to_json().dump();
        out += '\n';
    }
    return out;
}

std::vector<TraceEvent> trace_from_jsonl(const std::string& text) {
    std::vector<TraceEvent> events;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        Value doc = Value::parse(line, nullptr, false);
        if (doc.is_discarded()) {
            throw DecodeError("malformed trace line: " + line);
        }
        events.push_back(TraceEvent::from_json(doc));
    }
    return events;
}

}  // namespace commkit
