#include "commkit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "commkit/communicator.hpp"
#include "commkit/envelope.hpp"
#include "commkit/errors.hpp"
#include "commkit/local_broker.hpp"
#include "commkit/task_queue.hpp"

namespace commkit::harness {

const char* to_string(EventKind kind) {
    switch (kind) {
        case EventKind::SpawnConsumer: return "SPAWN_CONSUMER";
        case EventKind::SubmitTasks: return "SUBMIT_TASKS";
        case EventKind::KillConsumer: return "KILL_CONSUMER";
        case EventKind::GracefulClose: return "GRACEFUL_CLOSE";
        case EventKind::SilenceHeartbeat: return "SILENCE_HEARTBEAT";
        case EventKind::AdvanceTime: return "ADVANCE_TIME";
    }
    return "unknown";
}

EventKind event_kind_from_string(const std::string& name) {
    if (name == "SPAWN_CONSUMER") return EventKind::SpawnConsumer;
    if (name == "SUBMIT_TASKS") return EventKind::SubmitTasks;
    if (name == "KILL_CONSUMER") return EventKind::KillConsumer;
    if (name == "GRACEFUL_CLOSE") return EventKind::GracefulClose;
    if (name == "SILENCE_HEARTBEAT") return EventKind::SilenceHeartbeat;
    if (name == "ADVANCE_TIME") return EventKind::AdvanceTime;
    throw ScenarioError("unknown event kind: " + name);
}

Value Event::to_json() const {
    Value doc{{"at", at}, {"kind", to_string(kind)}};
    switch (kind) {
        case EventKind::SpawnConsumer:
            doc["prefetch"] = prefetch;
            break;
        case EventKind::SubmitTasks:
            doc["count"] = count;
            break;
        case EventKind::KillConsumer:
            doc["id"] = id;
            break;
        case EventKind::GracefulClose:
            doc["id"] = id;
            doc["grace"] = duration;
            break;
        case EventKind::SilenceHeartbeat:
            doc["id"] = id;
            doc["duration"] = duration;
            break;
        case EventKind::AdvanceTime:
            doc["duration"] = duration;
            break;
    }
    return doc;
}

namespace {

uint64_t require_u64(const Value& doc, const char* key) {
    if (!doc.contains(key) || !doc[key].is_number_unsigned()) {
        throw ScenarioError(std::string("event missing unsigned field '") +
                            key + "': " + doc.dump());
    }
    return doc[key].get<uint64_t>();
}

int require_int(const Value& doc, const char* key) {
    if (!doc.contains(key) || !doc[key].is_number_integer()) {
        throw ScenarioError(std::string("event missing integer field '") +
                            key + "': " + doc.dump());
    }
    return doc[key].get<int>();
}

std::string require_str(const Value& doc, const char* key) {
    if (!doc.contains(key) || !doc[key].is_string()) {
        throw ScenarioError(std::string("event missing string field '") +
                            key + "': " + doc.dump());
    }
    return doc[key].get<std::string>();
}

}  // namespace

Event Event::from_json(const Value& doc) {
    if (!doc.is_object()) {
        throw ScenarioError("event is not a JSON object: " + doc.dump());
    }
    Event ev;
    ev.at = require_u64(doc, "at");
    ev.kind = event_kind_from_string(require_str(doc, "kind"));
    switch (ev.kind) {
        case EventKind::SpawnConsumer:
            ev.prefetch = require_int(doc, "prefetch");
            break;
        case EventKind::SubmitTasks:
            ev.count = require_int(doc, "count");
            break;
        case EventKind::KillConsumer:
            ev.id = require_str(doc, "id");
            break;
        case EventKind::GracefulClose:
            ev.id = require_str(doc, "id");
            ev.duration = require_u64(doc, "grace");
            break;
        case EventKind::SilenceHeartbeat:
            ev.id = require_str(doc, "id");
            ev.duration = require_u64(doc, "duration");
            break;
        case EventKind::AdvanceTime:
            ev.duration = require_u64(doc, "duration");
            break;
    }
    return ev;
}

Value ExpectedOutcome::to_json() const {
    Value doc = Value::object();
    if (acked_once >= 0) doc["acked_once"] = acked_once;
    if (dead_lettered >= 0) doc["dead_lettered"] = dead_lettered;
    if (pending >= 0) doc["pending"] = pending;
    return doc;
}

ExpectedOutcome ExpectedOutcome::from_json(const Value& doc) {
    if (!doc.is_object()) {
        throw ScenarioError("expected outcome is not a JSON object");
    }
    ExpectedOutcome out;
    if (doc.contains("acked_once")) {
        out.acked_once = doc["acked_once"].get<int64_t>();
    }
    if (doc.contains("dead_lettered")) {
        out.dead_lettered = doc["dead_lettered"].get<int64_t>();
    }
    if (doc.contains("pending")) {
        out.pending = doc["pending"].get<int64_t>();
    }
    return out;
}

Value Scenario::to_json() const {
    Value evs = Value::array();
    for (const auto& ev : events) {
        evs.push_back(ev.to_json());
    }
    return Value{{"seed", seed}, {"expected", expected.to_json()},
                 {"events", evs}};
}

Scenario Scenario::from_json(const Value& doc) {
    if (!doc.is_object() || !doc.contains("seed")) {
        throw ScenarioError("scenario header must carry a seed");
    }
    Scenario s;
    s.seed = doc["seed"].get<uint64_t>();
    if (doc.contains("expected")) {
        s.expected = ExpectedOutcome::from_json(doc["expected"]);
    }
    if (doc.contains("events")) {
        if (!doc["events"].is_array()) {
            throw ScenarioError("scenario events must be an array");
        }
        for (const auto& ev : doc["events"]) {
            s.events.push_back(Event::from_json(ev));
        }
    }
    return s;
}

std::string scenario_to_jsonl(const Scenario& scenario) {
    std::string out =
        Value{{"seed", scenario.seed},
              {"expected", scenario.expected.to_json()}}
            .dump();
    out += '\n';
    for (const auto& ev : scenario.events) {
        out += ev.to_json().dump();
        out += '\n';
    }
    return out;
}

Scenario scenario_from_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    Scenario s;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        Value doc = Value::parse(line, nullptr, false);
        if (doc.is_discarded()) {
            throw ScenarioError("malformed scenario line: " + line);
        }
        if (!have_header) {
            if (!doc.is_object() || !doc.contains("seed")) {
                throw ScenarioError(
                    "first scenario line must be a header with a seed");
            }
            s.seed = doc["seed"].get<uint64_t>();
            if (doc.contains("expected")) {
                s.expected = ExpectedOutcome::from_json(doc["expected"]);
            }
            have_header = true;
            continue;
        }
        s.events.push_back(Event::from_json(doc));
    }
    if (!have_header) {
        throw ScenarioError("scenario file is empty");
    }
    return s;
}

const char* to_string(Outcome outcome) {
    switch (outcome) {
        case Outcome::AckedOnce: return "acked_once";
        case Outcome::DeadLettered: return "dead_lettered";
        case Outcome::Pending: return "pending";
        case Outcome::Lost: return "lost";
        case Outcome::Duplicated: return "duplicated";
    }
    return "unknown";
}

size_t AuditReport::count(Outcome outcome) const {
    size_t n = 0;
    for (const auto& [serial, got] : outcomes) {
        if (got == outcome) {
            ++n;
        }
    }
    return n;
}

bool AuditReport::passed() const {
    return violations.empty() && count(Outcome::Lost) == 0 &&
           count(Outcome::Duplicated) == 0;
}

Value AuditReport::summary_json() const {
    return Value{
        {"acked_once", count(Outcome::AckedOnce)},
        {"dead_lettered", count(Outcome::DeadLettered)},
        {"pending", count(Outcome::Pending)},
        {"lost", count(Outcome::Lost)},
        {"duplicated", count(Outcome::Duplicated)},
        {"redeliveries", redeliveries},
        {"final_clock_ms", final_clock_ms},
        {"violations", violations},
        {"passed", passed()},
    };
}

namespace {

struct SilenceWindow {
    uint64_t start = 0;
    uint64_t until = 0;
};

/// Extends (or restarts) a consumer's quiet window with a silence beginning
/// at `at`. Overlapping silences merge into one continuous window; returns
/// true once the merged window reaches the death threshold.
bool note_silence(SilenceWindow& w, uint64_t at, uint64_t duration) {
    if (at <= w.until && w.until > 0) {
        w.until = std::max(w.until, at + duration);
    } else {
        w.start = at;
        w.until = at + duration;
    }
    return w.until - w.start >= 2 * kHeartbeatIntervalMs;
}

/// Static script validation; mirrors exactly the liveness rules the runner
/// applies, so a script that validates can always execute.
void validate_scenario(const Scenario& scenario) {
    uint64_t last_at = 0;
    int spawned = 0;
    std::set<std::string> alive;
    std::map<std::string, SilenceWindow> silences;
    for (size_t i = 0; i < scenario.events.size(); ++i) {
        const Event& ev = scenario.events[i];
        if (ev.at < last_at) {
            throw ScenarioError("event " + std::to_string(i) +
                                " moves backwards in time");
        }
        last_at = ev.at;
        switch (ev.kind) {
            case EventKind::SpawnConsumer:
                if (ev.prefetch < 1) {
                    throw ScenarioError("event " + std::to_string(i) +
                                        ": prefetch must be >= 1");
                }
                alive.insert("c" + std::to_string(++spawned));
                break;
            case EventKind::SubmitTasks:
                if (ev.count < 0) {
                    throw ScenarioError("event " + std::to_string(i) +
                                        ": negative task count");
                }
                break;
            case EventKind::KillConsumer:
            case EventKind::GracefulClose:
            case EventKind::SilenceHeartbeat:
                if (!alive.count(ev.id)) {
                    throw ScenarioError("event " + std::to_string(i) +
                                        " references unknown or finished "
                                        "consumer " +
                                        ev.id);
                }
                if (ev.kind == EventKind::SilenceHeartbeat) {
                    if (note_silence(silences[ev.id], ev.at, ev.duration)) {
                        alive.erase(ev.id);
                    }
                } else {
                    alive.erase(ev.id);
                }
                break;
            case EventKind::AdvanceTime:
                break;
        }
    }
}

/// Terminal per-serial state derived purely from the queue trace.
std::map<int64_t, Outcome> outcomes_from_trace(
    const std::vector<TraceEvent>& trace) {
    enum class St { Pending, Unacked, Acked, Dead };
    std::map<int64_t, St> state;
    std::map<int64_t, int> acks;
    for (const auto& ev : trace) {
        if (ev.serial < 0) {
            continue;
        }
        switch (ev.kind) {
            case TraceKind::Enqueue:
            case TraceKind::Requeue:
                state[ev.serial] = St::Pending;
                break;
            case TraceKind::Assign:
                state[ev.serial] = St::Unacked;
                break;
            case TraceKind::Ack:
                state[ev.serial] = St::Acked;
                ++acks[ev.serial];
                break;
            case TraceKind::DeadLetter:
                state[ev.serial] = St::Dead;
                break;
            default:
                break;
        }
    }
    std::map<int64_t, Outcome> out;
    for (const auto& [serial, st] : state) {
        if (acks[serial] > 1) {
            out[serial] = Outcome::Duplicated;
        } else if (st == St::Acked) {
            out[serial] = Outcome::AckedOnce;
        } else if (st == St::Dead) {
            out[serial] = Outcome::DeadLettered;
        } else {
            out[serial] = Outcome::Pending;
        }
    }
    return out;
}

void check_expected(const ExpectedOutcome& expected, AuditReport& report) {
    auto check = [&](int64_t want, Outcome outcome) {
        if (want >= 0 && static_cast<int64_t>(report.count(outcome)) != want) {
            report.violations.push_back(
                std::string("expected ") + to_string(outcome) + "=" +
                std::to_string(want) + ", got " +
                std::to_string(report.count(outcome)));
        }
    };
    check(expected.acked_once, Outcome::AckedOnce);
    check(expected.dead_lettered, Outcome::DeadLettered);
    check(expected.pending, Outcome::Pending);
}

/// Event-stepped simulation of consumers working a task queue under a
/// logical clock. Handler completions and heartbeat deaths are the only
/// spontaneous instants, so the runner can jump exactly between them.
class VirtualRun {
  public:
    explicit VirtualRun(const Scenario& scenario) : scenario_(scenario) {}

    AuditReport run() {
        validate_scenario(scenario_);
        for (size_t i = 0; i < scenario_.events.size(); ++i) {
            const Event& ev = scenario_.events[i];
            advance_to(ev.at);
            apply(ev);
            audit("after event " + std::to_string(i) + " (" +
                  to_string(ev.kind) + ", t=" + std::to_string(clock_) + ")");
        }
        drain();
        audit("at drain (t=" + std::to_string(clock_) + ")");
        finish_report();
        return std::move(report_);
    }

  private:
    struct SimConsumer {
        bool finished = false;  // killed, dead, or closed
        SilenceWindow silence;
        std::optional<uint64_t> death_at;
    };

    struct Running {
        std::string consumer;
        uint64_t tag = 0;
        uint64_t done_at = 0;
    };

    void pump() {
        for (const auto& a : queue_.take_assignments()) {
            running_.push_back({a.consumer, a.tag, clock_ + kHandlerMs});
        }
    }

    std::optional<uint64_t> next_instant() const {
        std::optional<uint64_t> t;
        for (const auto& r : running_) {
            if (!t || r.done_at < *t) {
                t = r.done_at;
            }
        }
        for (const auto& [id, c] : consumers_) {
            if (!c.finished && c.death_at && (!t || *c.death_at < *t)) {
                t = *c.death_at;
            }
        }
        return t;
    }

    void fire_instant(uint64_t now) {
        // Deaths before completions: at the boundary the connection has
        // already been declared dead, so its in-flight ack is discarded.
        for (auto& [id, c] : consumers_) {
            if (!c.finished && c.death_at && *c.death_at <= now) {
                finish_consumer(id, "heartbeat_timeout");
            }
        }
        for (size_t i = 0; i < running_.size();) {
            if (running_[i].done_at <= now) {
                Running r = running_[i];
                running_.erase(running_.begin() +
                               static_cast<ptrdiff_t>(i));
                queue_.acknowledge(r.consumer, r.tag);
                pump();
                i = 0;  // ack may assign new work; rescan from the start
            } else {
                ++i;
            }
        }
    }

    void advance_to(uint64_t target) {
        for (;;) {
            auto t = next_instant();
            if (!t || *t > target) {
                break;
            }
            clock_ = std::max(clock_, *t);
            fire_instant(clock_);
        }
        clock_ = std::max(clock_, target);
    }

    void finish_consumer(const std::string& id, const std::string& reason) {
        running_.erase(std::remove_if(running_.begin(), running_.end(),
                                      [&](const Running& r) {
                                          return r.consumer == id;
                                      }),
                       running_.end());
        queue_.drop_consumer(id, reason);
        consumers_[id].finished = true;
        pump();
    }

    void apply(const Event& ev) {
        switch (ev.kind) {
            case EventKind::SpawnConsumer: {
                std::string id = queue_.register_consumer(ev.prefetch);
                consumers_[id] = SimConsumer{};
                pump();
                break;
            }
            case EventKind::SubmitTasks:
                for (int i = 0; i < ev.count; ++i) {
                    Envelope env;
                    env.kind = MessageKind::Task;
                    env.correlation_id = new_correlation_id();
                    env.body = Value{{"serial", next_serial_++}};
                    env.no_reply = true;
                    queue_.enqueue(std::move(env), "");
                    pump();
                }
                break;
            case EventKind::KillConsumer:
                finish_consumer(ev.id, "killed");
                break;
            case EventKind::GracefulClose: {
                queue_.deactivate_consumer(ev.id);
                uint64_t deadline = clock_ + ev.duration;
                while (queue_.has_consumer(ev.id) &&
                       queue_.unacked_count(ev.id) > 0) {
                    auto t = next_instant();
                    if (!t || *t > deadline) {
                        break;
                    }
                    clock_ = std::max(clock_, *t);
                    fire_instant(clock_);
                }
                if (queue_.has_consumer(ev.id)) {
                    // Grace expired with work still outstanding.
                    clock_ = deadline;
                    finish_consumer(ev.id, "close_timeout");
                } else {
                    consumers_[ev.id].finished = true;
                }
                break;
            }
            case EventKind::SilenceHeartbeat: {
                // Silence only hides heartbeats; the simulated handler keeps
                // working and acking until detection fires, so a fatal
                // silence loses exactly what is in flight at the deadline.
                // Windows are anchored at the scripted time (not clock_,
                // which a graceful-close wait may have pushed past ev.at) so
                // the runner agrees with static validation.
                SimConsumer& c = consumers_[ev.id];
                if (note_silence(c.silence, ev.at, ev.duration) &&
                    !c.death_at) {
                    c.death_at =
                        c.silence.start + 2 * kHeartbeatIntervalMs;
                }
                break;
            }
            case EventKind::AdvanceTime:
                advance_to(clock_ + ev.duration);
                break;
        }
    }

    void drain() {
        for (;;) {
            if (queue_.pending_depth() == 0 && queue_.unacked_total() == 0) {
                break;
            }
            auto t = next_instant();
            if (!t) {
                break;  // nothing can make progress; leftovers stay pending
            }
            clock_ = std::max(clock_, *t);
            fire_instant(clock_);
        }
    }

    void audit(const std::string& where) {
        size_t accounted = queue_.pending_depth() + queue_.unacked_total() +
                           queue_.acked_total() + queue_.dead_letters().size();
        if (accounted != queue_.enqueued_total()) {
            report_.violations.push_back(
                "conservation violated " + where + ": enqueued=" +
                std::to_string(queue_.enqueued_total()) + " accounted=" +
                std::to_string(accounted));
        }
        for (const auto& [serial, n] : ack_counts_) {
            if (n > 1) {
                report_.violations.push_back(
                    "serial " + std::to_string(serial) + " acked " +
                    std::to_string(n) + " times " + where);
            }
        }
    }

    void finish_report() {
        report_.final_clock_ms = clock_;
        report_.outcomes = outcomes_from_trace(report_.trace);

        // Anything the trace says is still queued must actually be in the
        // queue; a missing tag is a genuine loss.
        std::set<uint64_t> live_tags;
        for (uint64_t tag : queue_.pending_tags()) {
            live_tags.insert(tag);
        }
        for (const auto& [id, c] : consumers_) {
            if (!c.finished) {
                for (uint64_t tag : queue_.unacked_tags(id)) {
                    live_tags.insert(tag);
                }
            }
        }
        std::map<int64_t, uint64_t> serial_tag;
        for (const auto& ev : report_.trace) {
            if (ev.kind == TraceKind::Enqueue && ev.serial >= 0) {
                serial_tag[ev.serial] = ev.tag;
            }
        }
        for (auto& [serial, outcome] : report_.outcomes) {
            if (outcome == Outcome::Pending &&
                !live_tags.count(serial_tag[serial])) {
                outcome = Outcome::Lost;
                report_.violations.push_back(
                    "serial " + std::to_string(serial) +
                    " vanished from the queue");
            }
        }
        for (const auto& ev : report_.trace) {
            if (ev.kind == TraceKind::Requeue) {
                ++report_.redeliveries;
            }
        }
        check_expected(scenario_.expected, report_);
    }

    const Scenario& scenario_;
    AuditReport report_;
    TaskQueue queue_{[this](const TraceEvent& ev) {
        report_.trace.push_back(ev);
        if (ev.kind == TraceKind::Ack && ev.serial >= 0) {
            ++ack_counts_[ev.serial];
        }
    }};
    uint64_t clock_ = 0;
    int64_t next_serial_ = 0;
    std::map<std::string, SimConsumer> consumers_;
    std::vector<Running> running_;
    std::map<int64_t, int> ack_counts_;
};

}  // namespace

AuditReport run_scenario(const Scenario& scenario) {
    return VirtualRun(scenario).run();
}

Scenario random_scenario(uint64_t seed, size_t size) {
    // Hand-rolled draws keep the schedule identical across platforms.
    std::mt19937_64 rng(seed);
    auto pick = [&](uint64_t lo, uint64_t hi) {
        return lo + rng() % (hi - lo + 1);
    };

    Scenario s;
    s.seed = seed;
    if (size == 0) {
        return s;
    }

    uint64_t t = 0;
    int spawned = 0;
    std::vector<std::string> expendable;  // alive consumers we may disturb
    std::map<std::string, SilenceWindow> silences;
    auto spawn = [&](int prefetch) {
        Event ev;
        ev.kind = EventKind::SpawnConsumer;
        ev.at = t;
        ev.prefetch = prefetch;
        s.events.push_back(ev);
        ++spawned;
        if (spawned > 1) {
            // The first consumer is protected so the run stays completable.
            expendable.push_back("c" + std::to_string(spawned));
        }
    };

    spawn(static_cast<int>(pick(1, 3)));
    while (s.events.size() < size) {
        t += pick(0, 30);
        uint64_t roll = pick(0, 99);
        Event ev;
        ev.at = t;
        if (roll < 20) {
            spawn(static_cast<int>(pick(1, 3)));
            continue;
        }
        if (roll < 50 || expendable.empty()) {
            ev.kind = EventKind::SubmitTasks;
            ev.count = static_cast<int>(pick(1, 8));
        } else if (roll < 65) {
            ev.kind = EventKind::KillConsumer;
            size_t victim = pick(0, expendable.size() - 1);
            ev.id = expendable[victim];
            expendable.erase(expendable.begin() +
                             static_cast<ptrdiff_t>(victim));
        } else if (roll < 75) {
            ev.kind = EventKind::GracefulClose;
            size_t victim = pick(0, expendable.size() - 1);
            ev.id = expendable[victim];
            ev.duration = pick(0, 40);
            expendable.erase(expendable.begin() +
                             static_cast<ptrdiff_t>(victim));
        } else if (roll < 90) {
            ev.kind = EventKind::SilenceHeartbeat;
            size_t victim = pick(0, expendable.size() - 1);
            ev.id = expendable[victim];
            ev.duration = pick(kHeartbeatIntervalMs / 2,
                               3 * kHeartbeatIntervalMs);
            if (note_silence(silences[ev.id], t, ev.duration)) {
                expendable.erase(expendable.begin() +
                                 static_cast<ptrdiff_t>(victim));
            }
        } else {
            ev.kind = EventKind::AdvanceTime;
            ev.duration = pick(5, 60);
        }
        s.events.push_back(ev);
    }
    return s;
}

std::string trace_file_contents(const Scenario& scenario,
                                const AuditReport& report) {
    std::string out = Value{{"scenario", scenario.to_json()}}.dump();
    out += '\n';
    out += trace_to_jsonl(report.trace);
    return out;
}

AuditReport replay_trace(const std::string& trace_file_text) {
    std::istringstream in(trace_file_text);
    std::string line;
    Scenario scenario;
    bool have_header = false;
    std::vector<TraceEvent> recorded;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        Value doc = Value::parse(line, nullptr, false);
        if (doc.is_discarded()) {
            throw DecodeError("malformed trace line: " + line);
        }
        if (!have_header) {
            if (!doc.is_object() || !doc.contains("scenario")) {
                throw ScenarioError(
                    "first trace line must embed the scenario");
            }
            scenario = Scenario::from_json(doc["scenario"]);
            have_header = true;
            continue;
        }
        recorded.push_back(TraceEvent::from_json(doc));
    }
    if (!have_header) {
        throw ScenarioError("trace file is empty");
    }

    AuditReport fresh = run_scenario(scenario);
    size_t n = std::min(fresh.trace.size(), recorded.size());
    for (size_t i = 0; i < n; ++i) {
        if (!(fresh.trace[i] == recorded[i])) {
            throw TraceMismatchError(
                "trace diverges at event " + std::to_string(i) +
                ": recorded " + recorded[i].to_json().dump() + ", replay " +
                fresh.trace[i].to_json().dump());
        }
    }
    if (fresh.trace.size() != recorded.size()) {
        throw TraceMismatchError(
            "trace length mismatch: recorded " +
            std::to_string(recorded.size()) + " events, replay produced " +
            std::to_string(fresh.trace.size()));
    }
    return fresh;
}

namespace {

std::string unique_stress_uri() {
    static std::atomic<uint64_t> counter{0};
    return "local://harness-stress-" +
           std::to_string(counter.fetch_add(1, std::memory_order_relaxed));
}

}  // namespace

AuditReport run_scenario_threads(const Scenario& scenario,
                                 double time_scale) {
    validate_scenario(scenario);
    using std::chrono::milliseconds;
    auto scaled = [&](uint64_t ms) {
        return milliseconds(
            static_cast<int64_t>(static_cast<double>(ms) * time_scale));
    };

    const std::string uri = unique_stress_uri();
    const std::string queue_name = effective_task_queue(ConnectOptions{});

    std::mutex trace_mutex;
    std::vector<TraceEvent> trace;
    auto broker = LocalBroker::named(uri.substr(std::string("local://").size()));
    broker->set_trace_sink(queue_name, [&](const TraceEvent& ev) {
        std::lock_guard<std::mutex> lock(trace_mutex);
        trace.push_back(ev);
    });

    Communicator submitter = connect(uri);
    struct Worker {
        Communicator comm;
        bool open = true;
    };
    std::map<std::string, Worker> workers;  // queue consumer id -> worker

    int spawned = 0;
    int64_t next_serial = 0;
    uint64_t prev_at = 0;
    std::map<std::string, SilenceWindow> silences;
    for (const Event& ev : scenario.events) {
        if (ev.at > prev_at) {
            std::this_thread::sleep_for(scaled(ev.at - prev_at));
            prev_at = ev.at;
        }
        switch (ev.kind) {
            case EventKind::SpawnConsumer: {
                ConnectOptions opts;
                opts.prefetch = ev.prefetch;
                Communicator worker = connect(uri, opts);
                worker.add_task_subscriber(
                    [scaled](Communicator&, const Value&) -> TaskResult {
                        std::this_thread::sleep_for(scaled(kHandlerMs));
                        return Value(nullptr);
                    });
                workers.emplace("c" + std::to_string(++spawned),
                                Worker{std::move(worker), true});
                break;
            }
            case EventKind::SubmitTasks:
                for (int i = 0; i < ev.count; ++i) {
                    submitter.task_send(Value{{"serial", next_serial++}},
                                        /*no_reply=*/true);
                }
                break;
            case EventKind::KillConsumer: {
                Worker& w = workers.at(ev.id);
                w.comm.kill();
                w.open = false;
                break;
            }
            case EventKind::GracefulClose: {
                Worker& w = workers.at(ev.id);
                w.comm.close(scaled(ev.duration));
                w.open = false;
                break;
            }
            case EventKind::SilenceHeartbeat: {
                // The broker only reacts once the (merged) quiet window
                // crosses the death threshold; shorter gaps are invisible.
                Worker& w = workers.at(ev.id);
                if (note_silence(silences[ev.id], ev.at, ev.duration) &&
                    w.open) {
                    w.comm.kill();
                    w.open = false;
                }
                std::this_thread::sleep_for(scaled(ev.duration));
                prev_at += ev.duration;
                break;
            }
            case EventKind::AdvanceTime:
                std::this_thread::sleep_for(scaled(ev.duration));
                prev_at += ev.duration;
                break;
        }
    }

    bool can_progress = std::any_of(
        workers.begin(), workers.end(),
        [](const auto& kv) { return kv.second.open; });
    if (can_progress) {
        auto deadline =
            std::chrono::steady_clock::now() + std::chrono::seconds(20);
        while (std::chrono::steady_clock::now() < deadline) {
            if (broker->queue_depth(queue_name) == 0 &&
                broker->unacked_total(queue_name) == 0) {
                break;
            }
            std::this_thread::sleep_for(milliseconds(1));
        }
    }

    for (auto& [id, w] : workers) {
        if (w.open) {
            w.comm.close();
        }
    }
    submitter.close();
    broker->set_trace_sink(queue_name, nullptr);

    AuditReport report;
    {
        std::lock_guard<std::mutex> lock(trace_mutex);
        report.trace = trace;
    }
    report.outcomes = outcomes_from_trace(report.trace);
    for (const auto& ev : report.trace) {
        if (ev.kind == TraceKind::Requeue) {
            ++report.redeliveries;
        }
    }
    std::map<int64_t, int> acks;
    size_t total_acks = 0;
    for (const auto& ev : report.trace) {
        if (ev.kind == TraceKind::Ack && ev.serial >= 0) {
            ++acks[ev.serial];
            ++total_acks;
        }
    }
    for (const auto& [serial, n] : acks) {
        if (n > 1) {
            report.violations.push_back("serial " + std::to_string(serial) +
                                        " acked " + std::to_string(n) +
                                        " times");
        }
    }
    size_t accounted = broker->queue_depth(queue_name) +
                       broker->unacked_total(queue_name) + total_acks +
                       broker->dead_letters(queue_name).size();
    if (accounted != static_cast<size_t>(next_serial)) {
        report.violations.push_back(
            "conservation violated at terminal state: submitted=" +
            std::to_string(next_serial) + " accounted=" +
            std::to_string(accounted));
    }
    check_expected(scenario.expected, report);
    return report;
}

}  // namespace commkit::harness
