#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rfcprobe/case_gen.hpp"
#include "rfcprobe/llm_gateway.hpp"
#include "rfcprobe/memory.hpp"

namespace rfcprobe {

struct RoleInstance {
    std::string role;
    int index = 0;
    std::vector<std::string> operations;
    bool long_running = false;
};

struct RolePlan {
    std::vector<RoleInstance> instances;
};

nlohmann::json to_json(const RolePlan& plan);

struct Subprogram {
    std::string role;
    int instance_index = 0;
    std::string file_name;
    std::string source_text;
    bool long_running = false;
};

struct BlueprintEntry {
    std::string file;
    std::string role;
    int start_delay_ms = 0;
    bool long_running = false;

    bool operator==(const BlueprintEntry&) const = default;
};

struct Blueprint {
    int version = 1;
    std::string case_id;
    std::vector<BlueprintEntry> entries;

    bool operator==(const Blueprint&) const = default;
};

inline constexpr int kLongRunningGapMs = 500;

nlohmann::json to_json(const Blueprint& bp);

/// Canonical JSON: sorted keys, two-space indent, trailing newline.
std::string serialize_blueprint(const Blueprint& bp);

/// Strict reader: unknown fields, a version other than 1, missing or empty
/// entries, bad types, negative delays, unsafe or repeated file names all
/// throw SchemaError.
Blueprint parse_blueprint(std::string_view json_text);

/// A file name usable inside a case workspace: no separators, no "..", no
/// leading dot.
bool safe_file_name(std::string_view name);

struct SynthesisConfig {
    std::string language = "Python";
    std::string extension = ".py";
    std::string target_library;  // named in prompts; may be empty
    std::vector<std::string> long_running_roles = {"server", "broker", "listener", "responder", "proxy"};
    bool parallel_subprograms = false;
    int long_running_gap_ms = kLongRunningGapMs;  // start delay after a long-running entry
};

std::string synthesis_system_prompt(const SynthesisConfig& cfg);

/// Operations that read as compound: they contain the word "and" or "then".
std::vector<std::string> conjunction_lint(const RolePlan& plan);

/// Reads {"instances":[{role, index?, operations, long_running?}]} (or the bare
/// array). Missing indices count up per role; a missing long_running flag is
/// taken from the role lexicon. Throws ReplyError.
RolePlan parse_role_plan(std::string_view reply, const SynthesisConfig& cfg);

std::string file_name_for(std::size_t ordinal, const RoleInstance& instance, const SynthesisConfig& cfg);

/// Extracts fenced code blocks in order, without their fences.
std::vector<std::string> fenced_blocks(std::string_view reply);

// Each stage runs in a fresh transcript. Warnings are appended to *warnings.
RolePlan decompose_case(const TestCase& tc, llm::ChatBackend& backend, const SynthesisConfig& cfg,
                        std::vector<std::string>* warnings = nullptr);

std::string build_subprogram_prompt(const RoleInstance& instance, const TestCase& tc, const RetrievalResult& context,
                                    const SynthesisConfig& cfg);

Subprogram generate_subprogram(const RoleInstance& instance, std::size_t ordinal, const TestCase& tc,
                               const RetrievalResult& context, llm::ChatBackend& backend, const SynthesisConfig& cfg,
                               std::vector<std::string>* warnings = nullptr);

bool is_permutation_of(const std::vector<std::string>& order, const std::vector<std::string>& names);

/// Long-running subprograms first, then the rest, each group in plan order.
std::vector<std::string> fallback_order(const std::vector<Subprogram>& subprograms);

struct Ordering {
    std::vector<std::string> files;
    bool fallback_used = false;
};

Ordering order_subprograms(const RolePlan& plan, const std::vector<Subprogram>& subprograms, const TestCase& tc,
                           llm::ChatBackend& backend);

/// Entries in the given order; an entry right after a long-running one waits
/// gap_ms, others start at once.
Blueprint integrate_blueprint(const std::string& case_id, const std::vector<std::string>& order,
                              const std::vector<Subprogram>& subprograms, int gap_ms = kLongRunningGapMs);

/// A complete model output: the subprograms plus their blueprint.
struct Artifact {
    std::vector<Subprogram> subprograms;
    std::string blueprint_json;  // written verbatim; a debug reply may leave it invalid
    std::vector<std::string> warnings;
    bool order_fallback = false;
};

/// Full pipeline: decompose, generate each subprogram, order, integrate.
Artifact synthesize(const TestCase& tc, const RetrievalResult& context, llm::ChatBackend& backend,
                    const SynthesisConfig& cfg);

/// "### file: <name>" followed by a fenced block, per subprogram and then
/// blueprint.json.
std::string render_artifact(const Artifact& artifact);

/// Reads a bundle in the render_artifact format. Files the reply leaves out
/// are taken from previous, and so is the blueprint when the reply has none.
/// Throws ReplyError when nothing usable remains.
Artifact parse_artifact_bundle(std::string_view reply, const Artifact* previous, const std::string& case_id);

/// Writes every subprogram and blueprint.json into dir.
void write_artifact(const Artifact& artifact, const std::filesystem::path& dir);

} // namespace rfcprobe
