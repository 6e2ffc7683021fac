#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "commkit/backend.hpp"
#include "commkit/broadcast_filter.hpp"

namespace commkit::amqp {

// --- liveness ---------------------------------------------------------------

enum class Liveness { Alive, Dead };

/// Peer-activity bookkeeping for one wire connection. Any inbound frame
/// counts as activity; the peer is declared dead after two full
/// heartbeat intervals of silence.
struct LivenessState {
    int64_t heartbeat_interval_ms = 0;
    int64_t last_peer_activity_ms = 0;

    /// Records activity at `now_ms`; never moves the clock backwards.
    void record_activity(int64_t now_ms);

    /// Dead iff the silence reaches twice the interval. An interval of
    /// zero disables the check entirely.
    Liveness check(int64_t now_ms) const;
};

/// The heartbeat value sent in tune-ok, in whole seconds. Sub-second
/// intervals round up to one second so the peer never expects a faster
/// cadence than we advertise; zero disables heartbeats.
uint16_t heartbeat_wire_seconds(int64_t interval_ms);

/// Combines our configured interval with the server's tune proposal:
/// the smaller of the two when both are set, the nonzero one otherwise.
int64_t negotiated_heartbeat_ms(int64_t client_ms, uint16_t server_seconds);

// --- reconnect backoff --------------------------------------------------

/// Reconnect delays: 1s doubling to a 30s ceiling, each scaled by a
/// seeded jitter factor in [0.8, 1.2] so a fleet of clients does not
/// stampede the broker in lockstep.
class BackoffPolicy {
  public:
    explicit BackoffPolicy(uint64_t seed) : rng_(seed) {}

    int64_t next_delay_ms();
    void reset() { attempt_ = 0; }
    int attempt() const { return attempt_; }

  private:
    std::mt19937_64 rng_;
    int attempt_ = 0;
};

// --- naming -----------------------------------------------------------------

/// Broker-side names derived from the connection options. Everything a
/// communicator declares lives under its namespace prefix.
struct Topology {
    std::string task_queue;              // "<ns>.tasks" or "<ns>.tasks.<name>"
    std::string broadcast_exchange;      // "<ns>.broadcast"
    std::string rpc_queue_prefix;        // "<ns>.rpc."
    std::string reply_queue_prefix;      // "<ns>.reply."
    std::string broadcast_queue_prefix;  // "<ns>.bcast."

    std::string rpc_queue(const std::string& identifier) const {
        return rpc_queue_prefix + identifier;
    }

    bool operator==(const Topology&) const = default;
};

Topology make_topology(const ConnectOptions& opts);

/// Routing key for a broadcast: "<sender>.<subject>" with absent values
/// spelled "_".
std::string broadcast_routing_key(const std::optional<std::string>& sender,
                                  const std::optional<std::string>& subject);

/// Topic binding that over-approximates a subscription filter: literal
/// filter words bind verbatim, and the first word containing a '*' glob
/// widens the rest of the pattern to '#'. The subscriber's own filter
/// remains the authority; the binding only prunes traffic.
std::string binding_pattern(const BroadcastFilter& filter);

}  // namespace commkit::amqp
