#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "commkit/trace.hpp"
#include "commkit/value.hpp"

namespace commkit::harness {

/// Logical heartbeat interval used by every scenario. A consumer whose
/// connection stays silent for 2x this interval is declared dead and its
/// unacked deliveries are requeued.
inline constexpr uint64_t kHeartbeatIntervalMs = 100;

/// Logical time a simulated handler holds a delivery before acking it.
inline constexpr uint64_t kHandlerMs = 10;

enum class EventKind {
    SpawnConsumer,
    SubmitTasks,
    KillConsumer,
    GracefulClose,
    SilenceHeartbeat,
    AdvanceTime,
};

const char* to_string(EventKind kind);
EventKind event_kind_from_string(const std::string& name);

struct Event {
    EventKind kind = EventKind::AdvanceTime;
    uint64_t at = 0;        // logical ms; non-decreasing across the script
    int prefetch = 1;       // SPAWN_CONSUMER
    int count = 0;          // SUBMIT_TASKS
    std::string id;         // KILL_CONSUMER / GRACEFUL_CLOSE / SILENCE_HEARTBEAT
    uint64_t duration = 0;  // GRACEFUL_CLOSE grace / SILENCE duration / ADVANCE

    Value to_json() const;
    static Event from_json(const Value& doc);
    bool operator==(const Event&) const = default;
};

/// Optional terminal-count assertions; -1 leaves a field unchecked.
struct ExpectedOutcome {
    int64_t acked_once = -1;
    int64_t dead_lettered = -1;
    int64_t pending = -1;

    Value to_json() const;
    static ExpectedOutcome from_json(const Value& doc);
    bool operator==(const ExpectedOutcome&) const = default;
};

struct Scenario {
    uint64_t seed = 0;
    std::vector<Event> events;
    ExpectedOutcome expected;

    Value to_json() const;
    static Scenario from_json(const Value& doc);
    bool operator==(const Scenario&) const = default;
};

/// First line is a header object with the seed and expectations; every
/// following line is one event. Diff-friendly for golden files.
std::string scenario_to_jsonl(const Scenario& scenario);
Scenario scenario_from_jsonl(const std::string& text);

enum class Outcome {
    AckedOnce,
    DeadLettered,
    Pending,
    Lost,
    Duplicated,
};

const char* to_string(Outcome outcome);

struct AuditReport {
    std::map<int64_t, Outcome> outcomes;  // payload serial -> terminal state
    std::vector<std::string> violations;
    std::vector<TraceEvent> trace;
    uint64_t redeliveries = 0;
    uint64_t final_clock_ms = 0;

    size_t count(Outcome outcome) const;
    bool passed() const;
    Value summary_json() const;
};

/// Executes the script against a fresh in-process task queue under a
/// virtual clock, auditing conservation and at-most-one delivery after
/// every event. Throws ScenarioError on malformed scripts.
AuditReport run_scenario(const Scenario& scenario);

/// Deterministic pseudo-random scenario; the first spawned consumer is
/// never killed, closed, or fatally silenced, so every task stays
/// completable.
Scenario random_scenario(uint64_t seed, size_t size);

/// Scenario header line followed by the trace events of a prior run.
std::string trace_file_contents(const Scenario& scenario,
                                const AuditReport& report);

/// Re-executes the scenario embedded in a trace file and compares the fresh
/// trace event-by-event. Throws TraceMismatchError on divergence.
AuditReport replay_trace(const std::string& trace_file_text);

/// Runs the same script against real communicators over the in-process
/// broker with wall-clock time (scaled by `time_scale`). Only the terminal
/// report is meaningful here; interleavings are nondeterministic.
AuditReport run_scenario_threads(const Scenario& scenario,
                                 double time_scale = 1.0);

}  // namespace commkit::harness
