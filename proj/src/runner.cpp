#include "rfcprobe/runner.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <mutex>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/prctl.h>
#include <spawn.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kStreamKeep = 1 << 20;

long long ms_between(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(b - a).count();
}

// Keeps the last kStreamKeep bytes of a stream.
struct TailBuffer {
    std::string data;
    std::size_t dropped = 0;

    void append(const char* p, std::size_t n) {
        data.append(p, n);
        if (data.size() > 2 * kStreamKeep) {
            const auto cut = data.size() - kStreamKeep;
            data.erase(0, cut);
            dropped += cut;
        }
    }

    std::string str() const {
        if (dropped == 0) return data;
        return fmt::format("[... {} characters dropped ...]\n", dropped) + data;
    }
};

struct Child {
    pid_t pid = -1;
    int out_fd = -1;
    int err_fd = -1;
    bool running = false;
    Clock::time_point start;
    std::optional<Clock::time_point> kill_at;
    TailBuffer out;
    TailBuffer err;
};

void close_fd(int& fd) {
    if (fd >= 0) ::close(fd);
    fd = -1;
}

// Reads whatever is available without blocking; closes the fd on EOF.
void drain(int& fd, TailBuffer& buf) {
    char chunk[8192];
    while (fd >= 0) {
        const auto n = ::read(fd, chunk, sizeof chunk);
        if (n > 0) {
            buf.append(chunk, static_cast<std::size_t>(n));
            continue;
        }
        if (n < 0 && errno == EINTR) continue;
        if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) return;
        close_fd(fd);
    }
}

void signal_group(pid_t pgid, int sig) {
    if (pgid > 0) ::kill(-pgid, sig);
}

void become_subreaper() {
    static std::once_flag once;
    std::call_once(once, [] { ::prctl(PR_SET_CHILD_SUBREAPER, 1); });
}

// Waits until no member of the group is left, bounded at two seconds.
void reap_group(pid_t pgid) {
    const auto deadline = Clock::now() + std::chrono::seconds(2);
    while (Clock::now() < deadline) {
        int status = 0;
        const pid_t rc = ::waitpid(-pgid, &status, WNOHANG);
        if (rc > 0) continue;
        if (rc < 0 && errno == ECHILD && ::kill(-pgid, 0) != 0) return;
        ::kill(-pgid, SIGKILL);
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    spdlog::warn("process group {} still has members after the sweep", pgid);
}

std::vector<std::string> build_env(const SandboxConfig& sb, const std::string& case_id) {
    std::map<std::string, std::string> env;
    for (const auto& name : sb.env_allowlist) {
        if (const char* v = std::getenv(name.c_str())) env[name] = v;
    }
    env["PYTHONUNBUFFERED"] = "1";
    env["PYTHONDONTWRITEBYTECODE"] = "1";
    for (const auto& [k, v] : sb.extra_env) env[k] = v;
    env["PORT"] = std::to_string(sb.ports.first);
    env["PORT_BASE"] = std::to_string(sb.ports.first);
    env["PORT_COUNT"] = std::to_string(sb.ports.count());
    env["CASE_ID"] = case_id;
    std::vector<std::string> out;
    for (const auto& [k, v] : env) out.push_back(k + "=" + v);
    return out;
}

std::vector<std::string> command_for(const fs::path& workspace, const std::string& file, const SandboxConfig& sb) {
    const auto ext = fs::path(file).extension().string();
    if (auto it = sb.launch.find(ext); it != sb.launch.end()) {
        std::vector<std::string> argv;
        for (const auto& part : it->second) {
            std::string arg = part;
            for (auto pos = arg.find("{file}"); pos != std::string::npos; pos = arg.find("{file}", pos + file.size())) {
                arg.replace(pos, 6, file);
            }
            argv.push_back(arg);
        }
        return argv;
    }
    if (::access((workspace / file).c_str(), X_OK) == 0) return {"./" + file};
    throw Error(fmt::format("no launch command for '{}' and the file is not executable", file));
}

// Starts one child in its own process group with stdout/stderr on
// non-blocking pipes. Returns an error message on failure.
std::optional<std::string> spawn(Child& child, const std::vector<std::string>& argv, const std::vector<std::string>& env,
                                 const fs::path& workspace) {
    int out_pipe[2], err_pipe[2];
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) return fmt::format("pipe: {}", std::strerror(errno));
    if (::pipe2(err_pipe, O_CLOEXEC) != 0) {
        ::close(out_pipe[0]);
        ::close(out_pipe[1]);
        return fmt::format("pipe: {}", std::strerror(errno));
    }

    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_addopen(&fa, 0, "/dev/null", O_RDONLY, 0);
    posix_spawn_file_actions_adddup2(&fa, out_pipe[1], 1);
    posix_spawn_file_actions_adddup2(&fa, err_pipe[1], 2);
    posix_spawn_file_actions_addchdir_np(&fa, workspace.c_str());

    posix_spawnattr_t attr;
    posix_spawnattr_init(&attr);
    posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP | POSIX_SPAWN_SETSIGMASK | POSIX_SPAWN_SETSIGDEF);
    posix_spawnattr_setpgroup(&attr, 0);
    sigset_t mask;
    sigemptyset(&mask);
    posix_spawnattr_setsigmask(&attr, &mask);
    sigset_t defaults;
    sigemptyset(&defaults);
    for (int sig : {SIGPIPE, SIGTERM, SIGINT, SIGQUIT, SIGHUP, SIGCHLD}) sigaddset(&defaults, sig);
    posix_spawnattr_setsigdefault(&attr, &defaults);

    std::vector<char*> cargv, cenv;
    for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);
    for (const auto& e : env) cenv.push_back(const_cast<char*>(e.c_str()));
    cenv.push_back(nullptr);

    pid_t pid = -1;
    const int rc = ::posix_spawnp(&pid, cargv[0], &fa, &attr, cargv.data(), cenv.data());
    posix_spawn_file_actions_destroy(&fa);
    posix_spawnattr_destroy(&attr);
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);
    if (rc != 0) {
        ::close(out_pipe[0]);
        ::close(err_pipe[0]);
        return fmt::format("cannot start {}: {}", argv[0], std::strerror(rc));
    }
    ::fcntl(out_pipe[0], F_SETFL, ::fcntl(out_pipe[0], F_GETFL) | O_NONBLOCK);
    ::fcntl(err_pipe[0], F_SETFL, ::fcntl(err_pipe[0], F_GETFL) | O_NONBLOCK);
    child.pid = pid;
    child.out_fd = out_pipe[0];
    child.err_fd = err_pipe[0];
    child.running = true;
    return std::nullopt;
}

std::string build_combined_log(const std::vector<ProcessRecord>& records, std::size_t cap) {
    std::string log;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        log += fmt::format("=== [{}] {} ({}) {} ===\n", i, r.file, r.role.empty() ? "?" : r.role, r.summary());
        if (!r.stdout_text.empty()) {
            log += "--- stdout ---\n" + r.stdout_text;
            if (r.stdout_text.back() != '\n') log += '\n';
        }
        if (!r.stderr_text.empty()) {
            log += "--- stderr ---\n" + r.stderr_text;
            if (r.stderr_text.back() != '\n') log += '\n';
        }
    }
    return text::tail_truncate(log, cap);
}

RunStatus overall_status(const std::vector<ProcessRecord>& records) {
    if (std::any_of(records.begin(), records.end(), [](const ProcessRecord& r) { return !r.launched; })) {
        return RunStatus::launch_failure;
    }
    if (std::any_of(records.begin(), records.end(), [](const ProcessRecord& r) { return r.timed_out; })) {
        return RunStatus::timeout;
    }
    if (std::any_of(records.begin(), records.end(), [](const ProcessRecord& r) { return !r.ok(); })) {
        return RunStatus::process_error;
    }
    return RunStatus::clean;
}

} // namespace

PortRange PortRange::parse(std::string_view spec) {
    const auto dash = spec.find('-');
    try {
        if (dash == std::string_view::npos) throw std::invalid_argument("no dash");
        PortRange r{std::stoi(std::string(spec.substr(0, dash))), std::stoi(std::string(spec.substr(dash + 1)))};
        if (r.first < 1 || r.last > 65535 || r.first > r.last) throw std::invalid_argument("bounds");
        return r;
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("invalid port range '{}' (expected A-B within 1-65535)", spec));
    }
}

PortRange PortRange::slice(int slot, int slots) const {
    if (slots < 1 || slot < 0 || slot >= slots) throw ConfigError("invalid port slice");
    const int width = count() / slots;
    if (width < 1) throw ConfigError(fmt::format("port range {}-{} too small for {} parallel cases", first, last, slots));
    return {first + slot * width, first + (slot + 1) * width - 1};
}

void SandboxConfig::validate() const {
    if (timeout_ms <= 0) throw ConfigError("timeout must be positive");
    if (grace_ms < 0) throw ConfigError("grace period must not be negative");
    if (log_cap < 64) throw ConfigError("log cap must be at least 64 characters");
    if (ports.first < 1 || ports.last > 65535 || ports.first > ports.last) throw ConfigError("invalid port range");
    for (const auto& [ext, argv] : launch) {
        if (argv.empty()) throw ConfigError(fmt::format("empty launch command for '{}'", ext));
    }
}

std::string_view to_string(RunStatus s) {
    switch (s) {
    case RunStatus::clean: return "clean";
    case RunStatus::process_error: return "process_error";
    case RunStatus::timeout: return "timeout";
    case RunStatus::launch_failure: return "launch_failure";
    }
    return "launch_failure";
}

bool ProcessRecord::ok() const {
    if (!launched || timed_out) return false;
    if (long_running && stopped_by_supervisor) return stopped_in_grace;
    return exit_code && *exit_code == 0;
}

std::string ProcessRecord::summary() const {
    if (!launched) return "not started";
    if (timed_out) return "killed after exceeding the timeout";
    if (stopped_by_supervisor) return stopped_in_grace ? "stopped at shutdown" : "killed: ignored the shutdown signal";
    if (exit_code) return fmt::format("exit {}", *exit_code);
    if (term_signal) return fmt::format("signal {} ({})", *term_signal, strsignal(*term_signal));
    return "unknown end";
}

nlohmann::json to_json(const ExecutionFeedback& fb) {
    auto procs = nlohmann::json::array();
    for (const auto& p : fb.processes) {
        procs.push_back({{"file", p.file},
                         {"role", p.role},
                         {"long_running", p.long_running},
                         {"launched", p.launched},
                         {"exit_code", p.exit_code ? nlohmann::json(*p.exit_code) : nlohmann::json()},
                         {"signal", p.term_signal ? nlohmann::json(*p.term_signal) : nlohmann::json()},
                         {"timed_out", p.timed_out},
                         {"stopped_by_supervisor", p.stopped_by_supervisor},
                         {"stopped_in_grace", p.stopped_in_grace},
                         {"stdout", p.stdout_text},
                         {"stderr", p.stderr_text},
                         {"start_ms", p.start_ms},
                         {"wall_time_ms", p.wall_time_ms}});
    }
    return {{"case_id", fb.case_id},
            {"status", to_string(fb.status)},
            {"error", fb.error},
            {"processes", procs},
            {"combined_log", fb.combined_log}};
}

ExecutionFeedback execution_feedback_from_json(const nlohmann::json& j) {
    ExecutionFeedback fb;
    fb.case_id = j.at("case_id").get<std::string>();
    const auto status = j.at("status").get<std::string>();
    for (auto s : {RunStatus::clean, RunStatus::process_error, RunStatus::timeout, RunStatus::launch_failure}) {
        if (to_string(s) == status) fb.status = s;
    }
    fb.error = j.value("error", "");
    fb.combined_log = j.value("combined_log", "");
    for (const auto& p : j.at("processes")) {
        ProcessRecord r;
        r.file = p.at("file").get<std::string>();
        r.role = p.value("role", "");
        r.long_running = p.value("long_running", false);
        r.launched = p.value("launched", false);
        if (p.contains("exit_code") && !p["exit_code"].is_null()) r.exit_code = p["exit_code"].get<int>();
        if (p.contains("signal") && !p["signal"].is_null()) r.term_signal = p["signal"].get<int>();
        r.timed_out = p.value("timed_out", false);
        r.stopped_by_supervisor = p.value("stopped_by_supervisor", false);
        r.stopped_in_grace = p.value("stopped_in_grace", true);
        r.stdout_text = p.value("stdout", "");
        r.stderr_text = p.value("stderr", "");
        r.start_ms = p.value("start_ms", 0LL);
        r.wall_time_ms = p.value("wall_time_ms", 0LL);
        fb.processes.push_back(std::move(r));
    }
    return fb;
}

ExecutionFeedback launch_failure(std::string case_id, std::string message) {
    ExecutionFeedback fb;
    fb.case_id = std::move(case_id);
    fb.status = RunStatus::launch_failure;
    fb.combined_log = "launch failure: " + message + "\n";
    fb.error = std::move(message);
    return fb;
}

ExecutionFeedback execute(const Blueprint& bp, const fs::path& workspace, const SandboxConfig& sandbox) {
    sandbox.validate();
    become_subreaper();
    ExecutionFeedback fb;
    fb.case_id = bp.case_id;
    for (const auto& e : bp.entries) {
        ProcessRecord r;
        r.file = e.file;
        r.role = e.role;
        r.long_running = e.long_running;
        fb.processes.push_back(std::move(r));
    }
    if (bp.entries.empty()) {
        auto out = launch_failure(bp.case_id, "blueprint has no entries");
        return out;
    }

    // Resolve everything before starting anything.
    std::vector<std::vector<std::string>> commands;
    for (const auto& e : bp.entries) {
        const auto path = workspace / e.file;
        std::error_code ec;
        if (!safe_file_name(e.file) || !fs::is_regular_file(path, ec)) {
            fb.status = RunStatus::launch_failure;
            fb.error = fmt::format("unresolved subprogram: {}", e.file);
            fb.combined_log = build_combined_log(fb.processes, sandbox.log_cap) + "launch failure: " + fb.error + "\n";
            return fb;
        }
        try {
            commands.push_back(command_for(workspace, e.file, sandbox));
        } catch (const Error& err) {
            fb.status = RunStatus::launch_failure;
            fb.error = err.what();
            fb.combined_log = "launch failure: " + fb.error + "\n";
            return fb;
        }
    }

    const auto env = build_env(sandbox, bp.case_id);
    const bool all_long_running =
        std::all_of(bp.entries.begin(), bp.entries.end(), [](const BlueprintEntry& e) { return e.long_running; });
    const auto timeout = std::chrono::milliseconds(sandbox.timeout_ms);
    const auto grace = std::chrono::milliseconds(sandbox.grace_ms);

    std::vector<Child> children(bp.entries.size());
    const auto t0 = Clock::now();
    std::size_t next = 0;
    auto next_launch_at = t0 + std::chrono::milliseconds(bp.entries[0].start_delay_ms);
    bool aborted = false;

    auto finish = [&](std::size_t i, int status, Clock::time_point now) {
        auto& c = children[i];
        auto& r = fb.processes[i];
        c.running = false;
        drain(c.out_fd, c.out);
        drain(c.err_fd, c.err);
        close_fd(c.out_fd);
        close_fd(c.err_fd);
        if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
        if (WIFSIGNALED(status)) r.term_signal = WTERMSIG(status);
        r.wall_time_ms = ms_between(c.start, now);
    };

    while (true) {
        auto now = Clock::now();

        if (!aborted && next < bp.entries.size() && now >= next_launch_at) {
            auto& c = children[next];
            auto& r = fb.processes[next];
            c.start = Clock::now();
            r.start_ms = ms_between(t0, c.start);
            if (auto err = spawn(c, commands[next], env, workspace)) {
                fb.error = *err;
                aborted = true;
            } else {
                r.launched = true;
                spdlog::debug("{}: started {} (pid {})", bp.case_id, r.file, c.pid);
                ++next;
                if (next < bp.entries.size()) {
                    next_launch_at = Clock::now() + std::chrono::milliseconds(bp.entries[next].start_delay_ms);
                }
            }
        }

        for (std::size_t i = 0; i < children.size(); ++i) {
            auto& c = children[i];
            if (!c.running) continue;
            int status = 0;
            const pid_t rc = ::waitpid(c.pid, &status, WNOHANG);
            if (rc == c.pid) finish(i, status, Clock::now());
        }

        now = Clock::now();
        const bool all_started = next == bp.entries.size();
        bool foreground_running = false;
        for (std::size_t i = 0; i < children.size(); ++i) {
            if (children[i].running && !fb.processes[i].long_running) foreground_running = true;
        }
        for (std::size_t i = 0; i < children.size(); ++i) {
            auto& c = children[i];
            auto& r = fb.processes[i];
            if (!c.running) continue;
            const bool timed = !r.long_running || all_long_running;
            if (timed && !c.kill_at && now - c.start >= timeout) {
                r.timed_out = true;
                signal_group(c.pid, SIGTERM);
                c.kill_at = now + grace;
            } else if (r.long_running && !c.kill_at && (aborted || (all_started && !foreground_running && !all_long_running))) {
                r.stopped_by_supervisor = true;
                signal_group(c.pid, SIGTERM);
                c.kill_at = now + grace;
            } else if (!r.long_running && !c.kill_at && aborted) {
                signal_group(c.pid, SIGTERM);
                c.kill_at = now + grace;
            }
            if (c.kill_at && now >= *c.kill_at) {
                if (r.stopped_by_supervisor) r.stopped_in_grace = false;
                signal_group(c.pid, SIGKILL);
                c.kill_at = now + std::chrono::hours(1);
            }
        }

        const bool any_running = std::any_of(children.begin(), children.end(), [](const Child& c) { return c.running; });
        if (!any_running && (all_started || aborted)) break;

        std::vector<pollfd> fds;
        std::vector<std::pair<std::size_t, bool>> owners;
        for (std::size_t i = 0; i < children.size(); ++i) {
            if (children[i].out_fd >= 0) {
                fds.push_back({children[i].out_fd, POLLIN, 0});
                owners.emplace_back(i, true);
            }
            if (children[i].err_fd >= 0) {
                fds.push_back({children[i].err_fd, POLLIN, 0});
                owners.emplace_back(i, false);
            }
        }
        int wait_ms = 20;
        if (!aborted && next < bp.entries.size()) {
            wait_ms = static_cast<int>(std::clamp<long long>(ms_between(Clock::now(), next_launch_at), 0, 20));
        }
        if (fds.empty()) {
            std::this_thread::sleep_for(std::chrono::milliseconds(wait_ms));
            continue;
        }
        if (::poll(fds.data(), fds.size(), wait_ms) > 0) {
            for (std::size_t k = 0; k < fds.size(); ++k) {
                if (!(fds[k].revents & (POLLIN | POLLHUP | POLLERR))) continue;
                auto& c = children[owners[k].first];
                if (owners[k].second) drain(c.out_fd, c.out);
                else drain(c.err_fd, c.err);
            }
        }
    }

    // Sweep: nothing started here outlives the call, including grandchildren,
    // which this process inherits as subreaper.
    for (auto& c : children) {
        if (c.pid <= 0) continue;
        signal_group(c.pid, SIGKILL);
        if (c.running) {
            int status = 0;
            ::waitpid(c.pid, &status, 0);
            c.running = false;
        }
        reap_group(c.pid);
        close_fd(c.out_fd);
        close_fd(c.err_fd);
    }

    for (std::size_t i = 0; i < children.size(); ++i) {
        fb.processes[i].stdout_text = children[i].out.str();
        fb.processes[i].stderr_text = children[i].err.str();
    }
    fb.status = aborted ? RunStatus::launch_failure : overall_status(fb.processes);
    fb.combined_log = build_combined_log(fb.processes, sandbox.log_cap);
    if (aborted) fb.combined_log = text::tail_truncate(fb.combined_log + "launch failure: " + fb.error + "\n", sandbox.log_cap);
    return fb;
}

ExecutionFeedback execute_blueprint_text(std::string_view blueprint_json, const fs::path& workspace,
                                         const SandboxConfig& sandbox) {
    Blueprint bp;
    try {
        bp = parse_blueprint(blueprint_json);
    } catch (const SchemaError& e) {
        std::string case_id;
        auto j = nlohmann::json::parse(blueprint_json, nullptr, false);
        if (j.is_object() && j.contains("case_id") && j["case_id"].is_string()) case_id = j["case_id"].get<std::string>();
        return launch_failure(case_id, std::string("invalid blueprint: ") + e.what());
    }
    return execute(bp, workspace, sandbox);
}

Classification classify_feedback(const ExecutionFeedback& fb) {
    return fb.status == RunStatus::clean ? Classification::success : Classification::retryable_failure;
}

std::string feedback_text(const ExecutionFeedback& fb, std::size_t log_tail) {
    std::string out = fmt::format("Execution status: {}\n", to_string(fb.status));
    if (!fb.error.empty()) out += "Error: " + fb.error + "\n";
    for (const auto& p : fb.processes) out += fmt::format("- {} ({}): {}\n", p.file, p.role, p.summary());
    if (!fb.combined_log.empty()) out += "Log:\n" + text::tail_truncate(fb.combined_log, log_tail);
    if (!out.empty() && out.back() != '\n') out += '\n';
    return out;
}

fs::path write_feedback(const ExecutionFeedback& fb, const fs::path& dir, int attempt) {
    const auto path = dir / fmt::format("feedback_{}.json", attempt);
    text::write_json(path, to_json(fb));
    return path;
}

} // namespace rfcprobe
