#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rfcprobe/case_gen.hpp"
#include "rfcprobe/doc_ingest.hpp"
#include "rfcprobe/llm_gateway.hpp"
#include "rfcprobe/memory.hpp"
#include "rfcprobe/refine.hpp"
#include "rfcprobe/runner.hpp"
#include "rfcprobe/synthesis.hpp"
#include "rfcprobe/verdict.hpp"

namespace rfcprobe {

struct BackendSettings {
    std::string kind = "replay";  // live, record or replay
    std::filesystem::path cache_dir;
    llm::LiveConfig live;
    llm::SamplingParams sampling;
};

struct PipelineConfig {
    std::filesystem::path workspace = "workspace";
    std::vector<std::filesystem::path> documents;
    std::optional<std::filesystem::path> keywords_file;
    std::optional<bool> force_rfc2119;
    std::optional<std::filesystem::path> exemplars;
    std::optional<std::filesystem::path> cases_file;  // imported cases replace generation
    BackendSettings backend;
    std::optional<BackendSettings> judge_backend;     // defaults to backend
    std::filesystem::path store_dir;  // empty: <workspace>/store
    std::optional<std::filesystem::path> library;
    std::string embedder = "local";
    std::size_t top_k = 4;
    SandboxConfig sandbox;
    SynthesisConfig synthesis;
    RefineConfig refine;
    std::vector<std::string> filter_terms = default_filter_terms();
    std::vector<int> s_max_grid = {1, 2, 3, 4, 5, 6};
    std::vector<int> k_grid = {1, 2, 3, 4, 5, 6};
    int trials = 1;
    int jobs = 1;
    bool learn_experience = false;  // store a summary of each finished case

    /// Relative paths resolve against base_dir. Secrets come from the
    /// environment (see LiveConfig::from_env), never from the file.
    static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static PipelineConfig load(const std::filesystem::path& file);

    std::filesystem::path store_path() const { return store_dir.empty() ? workspace / "store" : store_dir; }

    /// Paths that must exist do, the store path is usable, grids and budgets
    /// are at least 1. Throws ConfigError.
    void validate() const;
};

/// How an experiment arm differs from the full system.
struct ArmSettings {
    std::string name = "full";
    int max_steps = 6;
    bool frozen_store = false;
};

/// full, no_rag (store frozen), no_refine (one step), baseline (both).
ArmSettings arm_settings(const std::string& arm, const RefineConfig& base);

struct CaseRun {
    TestCase test_case;
    std::string doc_id;
    int trial = 0;
    std::optional<RefineOutcome> outcome;
    std::optional<ConformanceReport> report;
    std::string failure;  // set when the case could not be processed
    bool cached = false;
};

/// Document id encoded in a generated case's source point; "user-imported"
/// for imported cases. An imported entry may name its document in "doc_id".
std::string doc_id_of(const TestCase& tc);

class Pipeline {
public:
    using BackendFactory = std::function<std::shared_ptr<llm::ChatBackend>(int trial)>;

    explicit Pipeline(PipelineConfig config);

    /// Replaces the configured backends; the judge uses the same instance.
    void set_backend_factory(BackendFactory factory);

    const PipelineConfig& config() const noexcept { return config_; }

    // Stages. Each persists its output under the workspace.
    std::vector<ingest::FunctionalPoint> ingest();
    std::vector<TestCase> generate_cases();
    IndexStats build_index();

    /// One-shot synthesis of a case into out_dir, without running it.
    Artifact synthesize_case(const TestCase& tc, const std::filesystem::path& out_dir);

    /// Imported or previously generated cases.
    std::vector<TestCase> load_cases() const;

    /// Refine, judge and report one case. A finished case directory is reused
    /// unless force is set.
    CaseRun test_case(const TestCase& tc, const ArmSettings& arm, int trial, bool force = false, int slot = 0);

    /// Every case over every trial, then the aggregate report. Returns the
    /// process exit status: 0, or 2 when some case failed.
    int run_arm(const ArmSettings& arm, bool force = false);

    /// Full arm plus the requested arms; writes ablation.json / ablation.csv.
    int run_ablation(const std::vector<std::string>& arms, bool force = false);

    /// One full arm with the largest step budget and trial count of the grid;
    /// writes the experiment tables.
    int run_experiment(bool force = false);

    /// ingest (when documents are configured), index (when a library is
    /// configured), gen-cases (unless cases were imported), then the full arm.
    int run_all(bool force = false);

    std::filesystem::path arm_dir(const std::string& arm) const;
    std::filesystem::path case_dir(const std::string& arm, int trial, const std::string& case_id) const;

    /// Backend completions spent by this object so far.
    std::size_t backend_calls() const;

private:
    std::shared_ptr<llm::ChatBackend> backend_for(int trial);
    std::shared_ptr<llm::ChatBackend> judge_for(int trial);
    Retriever retriever(bool frozen);

    PipelineConfig config_;
    BackendFactory factory_;
    std::vector<std::shared_ptr<llm::ChatBackend>> backends_;
    std::vector<std::shared_ptr<llm::ChatBackend>> judges_;
    std::shared_ptr<MemoryStore> store_;
    std::shared_ptr<const Embedder> embedder_;
    mutable std::map<std::string, std::string> imported_docs_;  // case_id -> doc_id from the case file
    mutable std::mutex mu_;
};

/// Aggregate of the per-case reports under an arm directory: reports sorted
/// by (case_id, trial), Pass@k for every k up to the trial count, class and
/// filter tallies, failed cases. Contains no timings or absolute paths.
nlohmann::json aggregate_report(const std::filesystem::path& arm_dir, const std::vector<std::string>& filter_terms);

/// Writes report.json, reports.csv and review_queue.json for an arm.
nlohmann::json write_aggregate(const std::filesystem::path& arm_dir, const std::vector<std::string>& filter_terms);

} // namespace rfcprobe
