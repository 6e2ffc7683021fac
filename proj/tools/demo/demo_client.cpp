#include "demo_client.hpp"

#include <cctype>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <random>
#include <utility>

namespace commkit::demo {

namespace {

std::int64_t random_serial_base() {
    static std::mutex m;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(m);
    return std::uniform_int_distribution<std::int64_t>(100'000, 999'999)(rng);
}

std::string upper(std::string text) {
    for (char& c : text) {
        c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    return text;
}

}  // namespace

std::vector<Submission> submit_tasks(Communicator& comm, Value payload, int count,
                                     bool no_reply) {
    if (count < 1) {
        throw Error("count must be at least 1");
    }
    if (!payload.is_object()) {
        throw Error("payload must be a JSON object");
    }
    std::int64_t base;
    if (payload.contains("serial")) {
        if (!payload["serial"].is_number_integer()) {
            throw Error("payload \"serial\" must be an integer");
        }
        base = payload["serial"].get<std::int64_t>();
    } else {
        base = random_serial_base();
    }
    std::vector<Submission> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Value task = payload;
        task["serial"] = base + i;
        out.push_back(Submission{base + i, comm.task_send(std::move(task), no_reply)});
    }
    return out;
}

ControlOutcome control_process(Communicator& comm, const std::string& pid,
                               const std::string& action,
                               std::optional<std::chrono::milliseconds> timeout) {
    Future reply = comm.rpc_send(pid, Value(action), timeout);
    try {
        Value v = reply.await();
        return {true, v.is_string() ? v.get<std::string>() : v.dump()};
    } catch (const OperationFailure& e) {
        return {false, upper(to_string(e.category())) + ": " + e.info().message};
    }
}

bool control_all(Communicator& comm, const std::string& action) {
    return comm.broadcast_send(Value(nullptr), std::nullopt, action);
}

WaitReport parent_wait(Communicator& comm, Value child_payload,
                       std::optional<std::chrono::milliseconds> timeout) {
    if (!child_payload.is_object()) {
        throw Error("child payload must be a JSON object");
    }
    std::int64_t serial;
    if (child_payload.contains("serial")) {
        if (!child_payload["serial"].is_number_integer()) {
            throw Error("payload \"serial\" must be an integer");
        }
        serial = child_payload["serial"].get<std::int64_t>();
    } else {
        serial = random_serial_base();
        child_payload["serial"] = serial;
    }
    const std::string pid = pid_for_serial(serial);

    struct Wait {
        std::mutex m;
        std::condition_variable cv;
        std::optional<Value> body;
    };
    auto wait = std::make_shared<Wait>();
    auto token = comm.add_broadcast_subscriber(
        BroadcastFilter{"*", "state_changed." + pid + ".*"},
        [wait](const Value& body, const std::optional<std::string>&,
               const std::optional<std::string>&, const std::string&) {
            std::lock_guard lock(wait->m);
            if (!wait->body) {
                wait->body = body;
                wait->cv.notify_all();
            }
        });

    // The subscription is live, so the termination cannot slip past us:
    // submit only now.
    comm.task_send(std::move(child_payload), /*no_reply=*/true).await();

    {
        std::unique_lock lock(wait->m);
        auto arrived = [&] { return wait->body.has_value(); };
        if (timeout) {
            wait->cv.wait_for(lock, *timeout, arrived);
        } else {
            wait->cv.wait(lock, arrived);
        }
    }
    comm.remove_broadcast_subscriber(token);

    std::lock_guard lock(wait->m);
    if (!wait->body) {
        return WaitReport{WaitOutcome::TimedOut, pid, Value(nullptr)};
    }
    const Value& body = *wait->body;
    bool killed = body.is_object() && body.contains("state") && body["state"] == "killed";
    return WaitReport{killed ? WaitOutcome::Killed : WaitOutcome::Finished, pid, body};
}

}  // namespace commkit::demo
