#include "amqp/rules.hpp"

#include <algorithm>

namespace commkit::amqp {

void LivenessState::record_activity(int64_t now_ms) {
    last_peer_activity_ms = std::max(last_peer_activity_ms, now_ms);
}

Liveness LivenessState::check(int64_t now_ms) const {
    if (heartbeat_interval_ms <= 0) {
        return Liveness::Alive;
    }
    return now_ms - last_peer_activity_ms >= 2 * heartbeat_interval_ms
               ? Liveness::Dead
               : Liveness::Alive;
}

uint16_t heartbeat_wire_seconds(int64_t interval_ms) {
    if (interval_ms <= 0) {
        return 0;
    }
    return static_cast<uint16_t>(
        std::min<int64_t>(UINT16_MAX, std::max<int64_t>(1, interval_ms / 1000)));
}

int64_t negotiated_heartbeat_ms(int64_t client_ms, uint16_t server_seconds) {
    int64_t server_ms = static_cast<int64_t>(server_seconds) * 1000;
    if (client_ms <= 0) {
        return server_ms;
    }
    if (server_ms == 0) {
        return client_ms;
    }
    return std::min(client_ms, server_ms);
}

int64_t BackoffPolicy::next_delay_ms() {
    int shift = std::min(attempt_, 5);  // 1s << 5 already exceeds the cap
    ++attempt_;
    int64_t base = std::min<int64_t>(30'000, 1'000LL << shift);
    double jitter = std::uniform_real_distribution<double>(0.8, 1.2)(rng_);
    return static_cast<int64_t>(static_cast<double>(base) * jitter);
}

Topology make_topology(const ConnectOptions& opts) {
    Topology t;
    t.task_queue = effective_task_queue(opts);
    t.broadcast_exchange = opts.namespace_prefix + ".broadcast";
    t.rpc_queue_prefix = opts.namespace_prefix + ".rpc.";
    t.reply_queue_prefix = opts.namespace_prefix + ".reply.";
    t.broadcast_queue_prefix = opts.namespace_prefix + ".bcast.";
    return t;
}

std::string broadcast_routing_key(const std::optional<std::string>& sender,
                                  const std::optional<std::string>& subject) {
    return (sender ? *sender : "_") + "." + (subject ? *subject : "_");
}

std::string binding_pattern(const BroadcastFilter& filter) {
    if (filter.sender_pattern.find('*') != std::string::npos) {
        return "#";
    }
    if (filter.subject_pattern.find('*') != std::string::npos) {
        return filter.sender_pattern + ".#";
    }
    return filter.sender_pattern + "." + filter.subject_pattern;
}

}  // namespace commkit::amqp
