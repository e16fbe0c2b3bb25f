#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfcprobe/case_gen.hpp"
#include "rfcprobe/llm_gateway.hpp"
#include "rfcprobe/memory.hpp"
#include "rfcprobe/runner.hpp"
#include "rfcprobe/synthesis.hpp"

namespace rfcprobe {

struct RefineConfig {
    int max_steps = 6;  // generation rounds, initial synthesis included
    int window = 10;    // past iterations shown in a debug prompt
    std::string initial_prompt =
        "Generate executable test programs for the protocol test case below. Each participant role runs as its "
        "own program, and the programs are started in the order given by the blueprint.";
    std::string debug_prompt =
        "The programs above did not run cleanly. Find the cause in the execution feedback and fix the programs. "
        "Reply with the complete corrected bundle: for every file a line \"### file: <name>\" followed by one "
        "fenced code block, including blueprint.json. Files you leave out stay unchanged.";
    std::size_t feedback_log_tail = 4000;

    void validate() const;
};

struct IterationRecord {
    int index = 0;
    std::string retrieved;  // rendered context used to produce this output
    std::string output;     // artifact bundle text, or the raw reply when unusable
    std::string feedback;   // feedback_text() of the test run
    RunStatus status = RunStatus::launch_failure;
};

enum class RefineStatus { executable, exhausted };

std::string_view to_string(RefineStatus s);

struct RefineOutcome {
    std::string case_id;
    RefineStatus status = RefineStatus::exhausted;
    int iterations_used = 0;  // generation rounds sampled
    std::optional<Artifact> final_artifact;
    std::string final_output;
    std::vector<IterationRecord> history;
    std::string error;  // backend failure that ended the loop early
};

nlohmann::json to_json(const RefineOutcome& outcome);
RefineOutcome refine_outcome_from_json(const nlohmann::json& j);

/// Executes one candidate artifact. attempt counts from 0.
class TestPlatform {
public:
    virtual ~TestPlatform() = default;
    virtual ExecutionFeedback test(const Artifact& artifact, int attempt) = 0;
};

/// Writes the artifact into the case workspace, runs its blueprint and keeps
/// feedback_<attempt>.json next to it.
class RunnerPlatform : public TestPlatform {
public:
    RunnerPlatform(std::filesystem::path workspace, SandboxConfig sandbox);

    ExecutionFeedback test(const Artifact& artifact, int attempt) override;

private:
    std::filesystem::path workspace_;
    SandboxConfig sandbox_;
    std::vector<std::string> written_;
};

/// Delegates to a function; for tests and dry runs.
class ScriptedPlatform : public TestPlatform {
public:
    using Script = std::function<ExecutionFeedback(const Artifact&, int)>;

    explicit ScriptedPlatform(Script script) : script_(std::move(script)) {}

    ExecutionFeedback test(const Artifact& artifact, int attempt) override { return script_(artifact, attempt); }

private:
    Script script_;
};

/// Initial prompt, the case, then the last min(window, history) iterations,
/// each as "[iteration i]" + retrieved context + output + feedback + debug
/// prompt, then the context retrieved for the next round.
std::string build_debug_prompt(const std::vector<IterationRecord>& history, int window, const std::string& initial_prompt,
                               const std::string& case_text, const std::string& debug_prompt,
                               const std::string& next_context);

/// Generate, test and debug until a clean run or max_steps generation rounds.
/// Synthesis and reply-format failures become launch_failure feedback; a
/// backend error ends the loop as exhausted with the error recorded.
RefineOutcome refine_loop(const TestCase& tc, const Retriever& retriever, llm::ChatBackend& backend,
                          TestPlatform& platform, const RefineConfig& cfg, const SynthesisConfig& synth);

} // namespace rfcprobe
