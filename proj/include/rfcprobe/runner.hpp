#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rfcprobe/synthesis.hpp"

namespace rfcprobe {

struct PortRange {
    int first = 20000;
    int last = 20015;

    int count() const noexcept { return last - first + 1; }

    /// "A-B" with 1 <= A <= B <= 65535.
    static PortRange parse(std::string_view spec);

    /// The slot-th of `slots` equal disjoint sub-ranges.
    PortRange slice(int slot, int slots) const;
};

struct SandboxConfig {
    // Launch command per file extension; "{file}" is replaced by the file path.
    std::map<std::string, std::vector<std::string>> launch = {
        {".py", {"python3", "{file}"}},
        {".sh", {"/bin/sh", "{file}"}},
    };
    // Variables copied from the caller's environment when set.
    std::vector<std::string> env_allowlist = {"PATH",   "HOME",       "LANG",        "LC_ALL",       "LC_CTYPE",
                                              "TMPDIR", "TZ",         "PYTHONPATH",  "VIRTUAL_ENV",  "TARGET_BUILD"};
    std::map<std::string, std::string> extra_env;
    int timeout_ms = 30000;
    int grace_ms = 3000;
    std::size_t log_cap = 16000;
    PortRange ports;

    void validate() const;
};

enum class RunStatus { clean, process_error, timeout, launch_failure };

std::string_view to_string(RunStatus s);

struct ProcessRecord {
    std::string file;
    std::string role;
    bool long_running = false;
    bool launched = false;
    std::optional<int> exit_code;    // set on a normal exit
    std::optional<int> term_signal;  // set when killed by a signal
    bool timed_out = false;
    bool stopped_by_supervisor = false;  // long-running entry sent SIGTERM at shutdown
    bool stopped_in_grace = true;        // false when SIGKILL was needed
    std::string stdout_text;
    std::string stderr_text;
    long long start_ms = 0;  // since execute() began
    long long wall_time_ms = 0;

    bool ok() const;
    // Outcome only; timings stay out so feedback text is reproducible.
    std::string summary() const;
};

struct ExecutionFeedback {
    std::string case_id;
    RunStatus status = RunStatus::clean;
    std::vector<ProcessRecord> processes;
    std::string combined_log;
    std::string error;  // launch or schema problem, empty otherwise
};

nlohmann::json to_json(const ExecutionFeedback& fb);
ExecutionFeedback execution_feedback_from_json(const nlohmann::json& j);

ExecutionFeedback launch_failure(std::string case_id, std::string message);

/// Runs the blueprint's entries from workspace in order. Every entry gets
/// exactly one record; no child process group outlives the call.
ExecutionFeedback execute(const Blueprint& bp, const std::filesystem::path& workspace, const SandboxConfig& sandbox);

/// Parses and runs blueprint text; schema problems and unresolved files come
/// back as launch_failure feedback.
ExecutionFeedback execute_blueprint_text(std::string_view blueprint_json, const std::filesystem::path& workspace,
                                         const SandboxConfig& sandbox);

enum class Classification { success, retryable_failure };

Classification classify_feedback(const ExecutionFeedback& fb);

/// Status line, one summary line per process, then the tail of the combined
/// log, bounded by log_tail characters.
std::string feedback_text(const ExecutionFeedback& fb, std::size_t log_tail = 4000);

/// Writes <dir>/feedback_<attempt>.json.
std::filesystem::path write_feedback(const ExecutionFeedback& fb, const std::filesystem::path& dir, int attempt);

} // namespace rfcprobe
