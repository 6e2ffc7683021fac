#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "commkit/communicator.hpp"
#include "demo/demo_client.hpp"
#include "doctest.h"
#include "fake_amqp_server.hpp"

// End-to-end coverage of the commkit-demo binary: real child processes
// talking to an in-process AMQP broker over real sockets, including a
// SIGKILL mid-task. The binary's path arrives via COMMKIT_DEMO_BIN.

extern char** environ;

using namespace commkit;
using namespace commkit::demo;
using namespace std::chrono_literals;

namespace {

bool eventually(const std::function<bool()>& pred,
                std::chrono::milliseconds deadline = std::chrono::milliseconds{5'000}) {
    auto until = std::chrono::steady_clock::now() + deadline;
    while (std::chrono::steady_clock::now() < until) {
        if (pred()) {
            return true;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds{5});
    }
    return pred();
}

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
    std::size_t count = 0;
    for (auto pos = text.find(needle); pos != std::string::npos;
         pos = text.find(needle, pos + needle.size())) {
        ++count;
    }
    return count;
}

/// A spawned commkit-demo child with its combined stdout+stderr captured.
struct ChildProcess {
    pid_t pid = -1;
    int out = -1;
    bool reaped = false;
    std::string captured;

    ChildProcess() = default;
    ChildProcess(ChildProcess&& other) noexcept
        : pid(other.pid),
          out(other.out),
          reaped(other.reaped),
          captured(std::move(other.captured)) {
        other.pid = -1;
        other.out = -1;
        other.reaped = true;
    }
    ChildProcess(const ChildProcess&) = delete;
    ChildProcess& operator=(const ChildProcess&) = delete;
    ChildProcess& operator=(ChildProcess&&) = delete;

    ~ChildProcess() {
        if (pid != -1 && !reaped) {
            ::kill(pid, SIGKILL);
            int status = 0;
            waitpid(pid, &status, 0);
        }
        if (out != -1) {
            ::close(out);
        }
    }

    void read_available() {
        char buf[4096];
        for (;;) {
            ssize_t n = ::read(out, buf, sizeof buf);
            if (n <= 0) {
                return;  // empty (EAGAIN) or closed
            }
            captured.append(buf, static_cast<std::size_t>(n));
        }
    }

    bool wait_output(const std::string& needle, std::chrono::milliseconds timeout) {
        auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            read_available();
            if (captured.find(needle) != std::string::npos) {
                return true;
            }
            if (std::chrono::steady_clock::now() >= deadline) {
                return false;
            }
            std::this_thread::sleep_for(5ms);
        }
    }

    /// Exit code, 128+signal for a signalled child, or -1 on timeout
    /// (after force-killing it).
    int wait_exit(std::chrono::milliseconds timeout) {
        auto deadline = std::chrono::steady_clock::now() + timeout;
        int status = 0;
        for (;;) {
            read_available();
            pid_t got = waitpid(pid, &status, WNOHANG);
            if (got == pid) {
                break;
            }
            if (std::chrono::steady_clock::now() >= deadline) {
                ::kill(pid, SIGKILL);
                waitpid(pid, &status, 0);
                reaped = true;
                read_available();
                return -1;
            }
            std::this_thread::sleep_for(5ms);
        }
        reaped = true;
        read_available();
        if (WIFEXITED(status)) {
            return WEXITSTATUS(status);
        }
        if (WIFSIGNALED(status)) {
            return 128 + WTERMSIG(status);
        }
        return -1;
    }

    void terminate(int sig) { ::kill(pid, sig); }
};

/// Spawns the demo binary. `env_overrides` add variables; an empty value
/// scrubs the variable from the child instead.
ChildProcess spawn_demo(const std::vector<std::string>& args,
                        const std::map<std::string, std::string>& env_overrides = {}) {
    std::vector<std::string> argv_store;
    argv_store.emplace_back(COMMKIT_DEMO_BIN);
    argv_store.insert(argv_store.end(), args.begin(), args.end());

    std::vector<std::string> env_store;
    for (char** entry = environ; *entry != nullptr; ++entry) {
        std::string kv{*entry};
        std::string key = kv.substr(0, kv.find('='));
        if (env_overrides.count(key) == 0) {
            env_store.push_back(std::move(kv));
        }
    }
    for (const auto& [key, value] : env_overrides) {
        if (!value.empty()) {
            env_store.push_back(key + "=" + value);
        }
    }

    std::vector<char*> argv;
    for (auto& s : argv_store) {
        argv.push_back(s.data());
    }
    argv.push_back(nullptr);
    std::vector<char*> envp;
    for (auto& s : env_store) {
        envp.push_back(s.data());
    }
    envp.push_back(nullptr);

    int fds[2];
    REQUIRE(pipe(fds) == 0);
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, fds[1], 1);
    posix_spawn_file_actions_adddup2(&actions, fds[1], 2);
    posix_spawn_file_actions_addclose(&actions, fds[0]);
    posix_spawn_file_actions_addclose(&actions, fds[1]);

    ChildProcess child;
    int rc = posix_spawn(&child.pid, argv_store[0].c_str(), &actions, nullptr,
                         argv.data(), envp.data());
    posix_spawn_file_actions_destroy(&actions);
    ::close(fds[1]);
    child.out = fds[0];
    fcntl(child.out, F_SETFL, O_NONBLOCK);
    REQUIRE(rc == 0);
    return child;
}

/// Counts termination broadcasts per serial, split by terminal state.
struct TerminationTally {
    std::mutex m;
    std::map<std::int64_t, int> finished;
    std::map<std::int64_t, int> killed;

    void attach(Communicator& comm) {
        comm.add_broadcast_subscriber(
            BroadcastFilter{"*", "state_changed.*"},
            [this](const Value& body, const std::optional<std::string>&,
                   const std::optional<std::string>&, const std::string&) {
                std::lock_guard lock(m);
                auto serial = body["serial"].get<std::int64_t>();
                if (body["state"] == "finished") {
                    finished[serial]++;
                } else if (body["state"] == "killed") {
                    killed[serial]++;
                }
            });
    }

    int finished_count(std::int64_t serial) {
        std::lock_guard lock(m);
        auto it = finished.find(serial);
        return it == finished.end() ? 0 : it->second;
    }

    int killed_count(std::int64_t serial) {
        std::lock_guard lock(m);
        auto it = killed.find(serial);
        return it == killed.end() ? 0 : it->second;
    }
};

Value rpc_status(Communicator& client, const std::string& pid) {
    ControlOutcome outcome = control_process(client, pid, "status", 1'000ms);
    if (!outcome.ok) {
        return Value(nullptr);
    }
    return Value::parse(outcome.text);
}

}  // namespace

TEST_CASE("the demo binary round-trips tasks over a real socket") {
    FakeAmqpServer server;
    std::string uri = server.uri();

    ChildProcess worker = spawn_demo({"worker", "--uri", uri, "--concurrency", "2"});
    REQUIRE(worker.wait_output("worker ready", 10'000ms));

    Communicator observer = Communicator::connect(uri);
    TerminationTally tally;
    tally.attach(observer);

    // The submitter finds the endpoint through COMMKIT_URI, not --uri.
    ChildProcess submit =
        spawn_demo({"submit", "--count", "3", R"({"serial":500,"steps":[5,5]})"},
                   {{"COMMKIT_URI", uri}});
    CHECK(submit.wait_exit(15'000ms) == 0);
    CHECK(count_occurrences(submit.captured, "\"state\":\"finished\"") == 3);
    for (const char* pid : {"proc-500", "proc-501", "proc-502"}) {
        CHECK(submit.captured.find(pid) != std::string::npos);
    }
    CHECK(eventually([&] {
        return tally.finished_count(500) == 1 && tally.finished_count(501) == 1 &&
               tally.finished_count(502) == 1;
    }));

    // Steering a nonexistent process reports the routing failure.
    ChildProcess ctl = spawn_demo({"ctl", "pause", "proc-9999", "--uri", uri});
    CHECK(ctl.wait_exit(10'000ms) == 1);
    CHECK(ctl.captured.find("UNROUTABLE") != std::string::npos);

    worker.terminate(SIGTERM);
    CHECK(worker.wait_exit(10'000ms) == 0);
    CHECK(worker.captured.find("shutting down") != std::string::npos);

    observer.close();
    CHECK(server.dead_letters() == 0);
}

TEST_CASE("a SIGKILLed worker's task is requeued and finished by a successor") {
    FakeAmqpServer server;
    std::string uri = server.uri();

    ChildProcess worker1 = spawn_demo({"worker", "--uri", uri, "--concurrency", "1"});
    REQUIRE(worker1.wait_output("worker ready", 10'000ms));

    Communicator observer = Communicator::connect(uri);
    TerminationTally tally;
    tally.attach(observer);

    auto subs = submit_tasks(observer, Value{{"serial", 600}, {"steps", {300}}}, 1, false);
    CHECK(eventually([&] {
        Value st = rpc_status(observer, "proc-600");
        return st.is_object() && st["state"] == "running";
    }));

    worker1.terminate(SIGKILL);
    CHECK(worker1.wait_exit(5'000ms) == 128 + SIGKILL);

    // Only now bring up the successor, so the rerun provably lands there.
    ChildProcess worker2 = spawn_demo({"worker", "--uri", uri, "--concurrency", "1"});
    REQUIRE(worker2.wait_output("worker ready", 10'000ms));

    Value result = subs[0].result.await(15s);
    CHECK(result["state"] == "finished");
    CHECK(result["serial"] == 600);
    CHECK(eventually([&] { return tally.finished_count(600) == 1; }));
    CHECK(tally.killed_count(600) == 0);
    CHECK(server.queue_depth("commkit.tasks") == 0);
    CHECK(server.dead_letters() == 0);

    worker2.terminate(SIGTERM);
    CHECK(worker2.wait_exit(10'000ms) == 0);
    observer.close();
}

TEST_CASE("parent-wait resumes on finish and reports a kill") {
    FakeAmqpServer server;
    std::string uri = server.uri();

    ChildProcess worker = spawn_demo({"worker", "--uri", uri});
    REQUIRE(worker.wait_output("worker ready", 10'000ms));

    ChildProcess happy =
        spawn_demo({"parent-wait", "--uri", uri, R"({"serial":700,"steps":[10]})"});
    CHECK(happy.wait_exit(15'000ms) == 0);
    CHECK(happy.captured.find("child proc-700 finished") != std::string::npos);

    ChildProcess bereaved =
        spawn_demo({"parent-wait", "--uri", uri, R"({"serial":701,"steps":[5000]})"});
    Communicator controller = Communicator::connect(uri);
    CHECK(eventually([&] {
        Value st = rpc_status(controller, "proc-701");
        return st.is_object() && st["state"] == "running";
    }));
    ChildProcess ctl = spawn_demo({"ctl", "kill", "proc-701", "--uri", uri});
    CHECK(ctl.wait_exit(10'000ms) == 0);
    CHECK(ctl.captured.find("killed") != std::string::npos);

    CHECK(bereaved.wait_exit(15'000ms) == 2);
    CHECK(bereaved.captured.find("child proc-701 killed") != std::string::npos);

    controller.close();
    worker.terminate(SIGTERM);
    CHECK(worker.wait_exit(10'000ms) == 0);
}

TEST_CASE("the demo binary insists on an endpoint") {
    ChildProcess lost = spawn_demo({"submit", R"({"steps":[5]})"},
                                   {{"COMMKIT_URI", ""}});  // scrubbed
    CHECK(lost.wait_exit(10'000ms) == 2);
    CHECK(lost.captured.find("COMMKIT_URI") != std::string::npos);
}
