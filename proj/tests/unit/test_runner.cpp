#include "doctest.h"

#include <chrono>
#include <csignal>
#include <fstream>

#include <sys/stat.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/runner.hpp"
#include "rfcprobe/text.hpp"

using namespace rfcprobe;
namespace fs = std::filesystem;

namespace {

fs::path workspace(const std::string& name) {
    auto d = fs::temp_directory_path() / ("rfcprobe_run_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

void script(const fs::path& dir, const std::string& name, const std::string& body) {
    text::write_file(dir / name, "#!/bin/sh\n" + body);
}

SandboxConfig quick() {
    SandboxConfig sb;
    sb.timeout_ms = 1500;
    sb.grace_ms = 500;
    return sb;
}

Blueprint bp_of(std::vector<BlueprintEntry> entries) {
    Blueprint bp;
    bp.case_id = "tc_run";
    bp.entries = std::move(entries);
    return bp;
}

// A pid counts as gone when it no longer exists or is a zombie awaiting an
// unrelated reaper.
bool gone(pid_t pid) {
    std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
    if (!stat) return true;
    std::string line;
    std::getline(stat, line);
    auto close = line.rfind(')');
    return close != std::string::npos && close + 2 < line.size() && (line[close + 2] == 'Z' || line[close + 2] == 'X');
}

} // namespace

TEST_CASE("server and client run clean") {
    auto ws = workspace("clean");
    script(ws, "server.sh", "trap 'exit 0' TERM\necho listening on $PORT\nwhile true; do sleep 0.05; done\n");
    script(ws, "client.sh", "echo client on $PORT\nexit 0\n");
    auto bp = bp_of({{"server.sh", "server", 0, true}, {"client.sh", "client", 100, false}});
    auto fb = execute(bp, ws, quick());
    CHECK(fb.status == RunStatus::clean);
    REQUIRE(fb.processes.size() == 2);
    CHECK(fb.processes[0].stopped_by_supervisor);
    CHECK(fb.processes[0].stopped_in_grace);
    CHECK(fb.processes[0].stdout_text == "listening on 20000\n");
    CHECK(fb.processes[1].exit_code == 0);
    CHECK(fb.processes[1].start_ms >= fb.processes[0].start_ms + 100);
    CHECK(classify_feedback(fb) == Classification::success);
    CHECK(fb.combined_log.find("=== [0] server.sh (server)") < fb.combined_log.find("=== [1] client.sh (client)"));
}

TEST_CASE("client failure is a process error with its stderr") {
    auto ws = workspace("fail");
    script(ws, "client.sh", "echo 'Traceback: AssertionError: expected 2.05' >&2\nexit 3\n");
    auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, quick());
    CHECK(fb.status == RunStatus::process_error);
    CHECK(fb.processes[0].exit_code == 3);
    CHECK(fb.processes[0].stderr_text.find("AssertionError") != std::string::npos);
    CHECK(classify_feedback(fb) == Classification::retryable_failure);
    CHECK(feedback_text(fb).find("exit 3") != std::string::npos);
}

TEST_CASE("timeout kills within timeout + grace + 1 s") {
    auto ws = workspace("timeout");
    script(ws, "client.sh", "sleep 30\n");
    auto sb = quick();
    const auto t0 = std::chrono::steady_clock::now();
    auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, sb);
    const auto elapsed =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    CHECK(fb.status == RunStatus::timeout);
    CHECK(fb.processes[0].timed_out);
    CHECK(fb.processes[0].wall_time_ms >= sb.timeout_ms);
    CHECK(elapsed <= sb.timeout_ms + sb.grace_ms + 1000);
    CHECK(classify_feedback(fb) == Classification::retryable_failure);
}

TEST_CASE("SIGTERM-ignoring process is killed after the grace period") {
    auto ws = workspace("stubborn");
    script(ws, "client.sh", "trap '' TERM\nwhile true; do sleep 0.05; done\n");
    auto sb = quick();
    const auto t0 = std::chrono::steady_clock::now();
    auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, sb);
    const auto elapsed =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    CHECK(fb.status == RunStatus::timeout);
    CHECK(fb.processes[0].term_signal == SIGKILL);
    CHECK(elapsed >= sb.timeout_ms + sb.grace_ms);
    CHECK(elapsed <= sb.timeout_ms + sb.grace_ms + 1000);
}

TEST_CASE("long-running entry crashing early is a process error") {
    auto ws = workspace("crash");
    script(ws, "server.sh", "echo bind failed >&2\nexit 1\n");
    script(ws, "client.sh", "sleep 0.3\nexit 0\n");
    auto fb = execute(bp_of({{"server.sh", "server", 0, true}, {"client.sh", "client", 0, false}}), ws, quick());
    CHECK(fb.status == RunStatus::process_error);
    CHECK_FALSE(fb.processes[0].ok());
}

TEST_CASE("server ignoring shutdown is not clean") {
    auto ws = workspace("nograce");
    script(ws, "server.sh", "trap '' TERM\nwhile true; do sleep 0.05; done\n");
    script(ws, "client.sh", "exit 0\n");
    auto fb = execute(bp_of({{"server.sh", "server", 0, true}, {"client.sh", "client", 300, false}}), ws, quick());
    CHECK(fb.status == RunStatus::process_error);
    CHECK_FALSE(fb.processes[0].stopped_in_grace);
}

TEST_CASE("start order follows the blueprint and no process survives") {
    auto ws = workspace("order");
    for (int i = 0; i < 4; ++i) {
        script(ws, "p" + std::to_string(i) + ".sh",
               "sleep 60 &\necho $! > bg_" + std::to_string(i) + ".pid\nsleep 0.2\nexit 0\n");
    }
    auto bp = bp_of({{"p3.sh", "client", 0, false},
                     {"p1.sh", "client", 50, false},
                     {"p0.sh", "client", 0, false},
                     {"p2.sh", "client", 20, false}});
    auto fb = execute(bp, ws, quick());
    CHECK(fb.status == RunStatus::clean);
    for (std::size_t i = 1; i < fb.processes.size(); ++i) CHECK(fb.processes[i].start_ms >= fb.processes[i - 1].start_ms);
    CHECK(fb.processes[1].start_ms >= fb.processes[0].start_ms + 50);
    for (int i = 0; i < 4; ++i) {
        const auto pid = std::stoi(text::trim(text::read_file(ws / ("bg_" + std::to_string(i) + ".pid"))));
        CHECK(gone(pid));
    }
}

TEST_CASE("environment contract") {
    auto ws = workspace("env");
    script(ws, "client.sh", "echo \"$PORT $PORT_BASE $PORT_COUNT $CASE_ID $TARGET_BUILD ${SECRET_TOKEN:-unset}\"\n");
    setenv("TARGET_BUILD", "nonconformant", 1);
    setenv("SECRET_TOKEN", "leak", 1);
    auto sb = quick();
    sb.ports = PortRange::parse("31000-31003");
    auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, sb);
    unsetenv("TARGET_BUILD");
    unsetenv("SECRET_TOKEN");
    CHECK(fb.processes[0].stdout_text == "31000 31000 4 tc_run nonconformant unset\n");
}

TEST_CASE("working directory is the workspace") {
    auto ws = workspace("cwd");
    script(ws, "client.sh", "pwd\n");
    auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, quick());
    CHECK(text::trim(fb.processes[0].stdout_text) == fs::canonical(ws).string());
}

TEST_CASE("log cap holds for any output volume") {
    auto ws = workspace("cap");
    script(ws, "client.sh", "i=0\nwhile [ $i -lt 3000 ]; do echo \"line $i of noisy output\"; i=$((i+1)); done\necho FINAL >&2\n");
    auto sb = quick();
    sb.log_cap = 2000;
    auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, sb);
    CHECK(fb.combined_log.size() <= 2000);
    CHECK(fb.combined_log.find("characters truncated") != std::string::npos);
    CHECK(fb.combined_log.find("FINAL") != std::string::npos);
    CHECK(fb.processes[0].stdout_text.find("line 2999") != std::string::npos);
}

TEST_CASE("blueprint problems become launch failures") {
    auto ws = workspace("bad");
    script(ws, "client.sh", "exit 0\n");
    SUBCASE("missing entries") {
        auto fb = execute_blueprint_text(R"({"version":1,"case_id":"tc_x"})", ws, quick());
        CHECK(fb.status == RunStatus::launch_failure);
        CHECK(fb.error.find("entries") != std::string::npos);
        CHECK(fb.case_id == "tc_x");
    }
    SUBCASE("unresolved subprogram") {
        auto fb = execute_blueprint_text(R"({"version":1,"entries":[{"file":"ghost.sh"}]})", ws, quick());
        CHECK(fb.status == RunStatus::launch_failure);
        CHECK(fb.error == "unresolved subprogram: ghost.sh");
        REQUIRE(fb.processes.size() == 1);
        CHECK_FALSE(fb.processes[0].launched);
    }
    SUBCASE("canonical blueprint keeps its order") {
        script(ws, "a.sh", "exit 0\n");
        auto fb = execute_blueprint_text(
            R"({"version":1,"entries":[{"file":"client.sh","role":"client"},{"file":"a.sh","role":"client"}]})", ws, quick());
        CHECK(fb.status == RunStatus::clean);
        CHECK(fb.processes[0].file == "client.sh");
        CHECK(fb.processes[1].file == "a.sh");
    }
    SUBCASE("missing interpreter") {
        auto sb = quick();
        sb.launch[".sh"] = {"/nonexistent/interpreter", "{file}"};
        auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, sb);
        CHECK(fb.status == RunStatus::launch_failure);
        CHECK(fb.error.find("cannot start") != std::string::npos);
    }
    SUBCASE("unknown extension, not executable") {
        text::write_file(ws / "prog.xyz", "x");
        auto fb = execute(bp_of({{"prog.xyz", "client", 0, false}}), ws, quick());
        CHECK(fb.status == RunStatus::launch_failure);
    }
    SUBCASE("unknown extension, executable") {
        text::write_file(ws / "prog.run", "#!/bin/sh\necho direct\n");
        fs::permissions(ws / "prog.run", fs::perms::owner_all);
        auto fb = execute(bp_of({{"prog.run", "client", 0, false}}), ws, quick());
        CHECK(fb.status == RunStatus::clean);
        CHECK(fb.processes[0].stdout_text == "direct\n");
    }
}

TEST_CASE("feedback persistence round trip") {
    auto ws = workspace("persist");
    script(ws, "client.sh", "echo hi\nexit 1\n");
    auto fb = execute(bp_of({{"client.sh", "client", 0, false}}), ws, quick());
    auto path = write_feedback(fb, ws, 2);
    CHECK(path.filename() == "feedback_2.json");
    auto back = execution_feedback_from_json(text::read_json(path));
    CHECK(nlohmann::json(to_json(back)) == to_json(fb));
}

TEST_CASE("port ranges") {
    auto r = PortRange::parse("20000-20015");
    CHECK(r.count() == 16);
    CHECK(r.slice(1, 4).first == 20004);
    CHECK(r.slice(1, 4).last == 20007);
    CHECK_THROWS_AS(PortRange::parse("9-3"), ConfigError);
    CHECK_THROWS_AS(PortRange::parse("abc"), ConfigError);
    CHECK_THROWS_AS(r.slice(0, 32), ConfigError);
    SandboxConfig sb;
    sb.timeout_ms = 0;
    CHECK_THROWS_AS(sb.validate(), ConfigError);
}
