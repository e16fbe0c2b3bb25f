#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rfcprobe/case_gen.hpp"
#include "rfcprobe/llm_gateway.hpp"
#include "rfcprobe/memory.hpp"
#include "rfcprobe/refine.hpp"

namespace rfcprobe {

enum class Judgment { pass, fail, undecidable };

std::string_view to_string(Judgment j);

struct JudgeResult {
    Judgment verdict = Judgment::undecidable;
    std::string rationale;
    int calls = 0;  // backend completions spent
};

std::string build_judge_prompt(const TestCase& tc, const RefineOutcome& outcome);

/// Reads the last "VERDICT: PASS|FAIL|UNDECIDABLE" line; nullopt when absent.
std::optional<Judgment> parse_verdict(std::string_view reply);

/// An exhausted outcome is a fail without any backend call. Otherwise the
/// model compares the assertions with the final programs and their logs; a
/// reply without a verdict line gets one re-prompt, then counts as undecidable.
JudgeResult judge_assertions(const TestCase& tc, const RefineOutcome& outcome, llm::ChatBackend& backend);

struct ExperienceSummary {
    std::string case_id;
    std::string text;
    std::string derived_from;  // sha256 over the history's outputs and feedback
};

/// Initial prompt, the case, then one "[attempt i]" output/feedback pair per record.
std::string build_summary_prompt(const TestCase& tc, const std::vector<IterationRecord>& history,
                                 const std::string& initial_prompt);

ExperienceSummary summarize_experience(const TestCase& tc, const std::vector<IterationRecord>& history,
                                       llm::ChatBackend& backend, const std::string& initial_prompt);

/// Stores the summary as an experience item and returns its item id.
std::string remember_experience(MemoryStore& store, const Embedder& embedder, const ExperienceSummary& summary);

enum class SampleClass { positive, negative };
enum class ReportFilter { kept, auto_filtered, needs_manual_review, excluded };

std::string_view to_string(SampleClass c);
std::string_view to_string(ReportFilter f);

struct ConformanceReport {
    std::string case_id;
    std::string doc_id;
    int trial = 0;
    SampleClass sample_class = SampleClass::negative;
    RefineStatus execution_status = RefineStatus::exhausted;
    int iterations_used = 0;
    Judgment judgment = Judgment::fail;
    std::string judge_rationale;
    ReportFilter filter_status = ReportFilter::needs_manual_review;
    std::vector<std::string> matched_filter_terms;
    std::string review_note;
};

nlohmann::json to_json(const ConformanceReport& r);
ConformanceReport conformance_report_from_json(const nlohmann::json& j);

/// Positive only for an executable outcome judged pass.
ConformanceReport make_report(const TestCase& tc, std::string doc_id, int trial, const RefineOutcome& outcome,
                              const JudgeResult& judgment);

std::vector<std::string> default_filter_terms();

struct FilterPartition {
    std::vector<ConformanceReport> auto_filtered;
    std::vector<ConformanceReport> needs_review;
};

/// Reports whose rationale contains a filter term (case-insensitive) are
/// auto_filtered with the terms recorded; the rest go to manual review.
FilterPartition filter_reports(std::vector<ConformanceReport> reports, const std::vector<std::string>& terms);

/// {"reports": [...]} with the reports awaiting review.
void write_review_queue(const std::vector<ConformanceReport>& pending, const std::filesystem::path& file);

/// Applies {"decisions":[{case_id, trial?, decision: kept|excluded, note?}]}
/// to reports under review. Decisions for unknown or not-pending reports and
/// unknown decision words throw SchemaError. Returns how many were applied.
std::size_t merge_review_decisions(std::vector<ConformanceReport>& reports, const nlohmann::json& decisions);

struct EvalMatrix {
    std::vector<std::string> case_ids;
    int trials = 0;
    std::vector<std::vector<bool>> success;  // [case][trial]
    int s_max = 0;
    std::string backend_id;

    std::size_t cases() const noexcept { return case_ids.size(); }
    void validate() const;
};

/// Fraction of cases with at least one success among their first k trials.
double pass_at_k(const EvalMatrix& m, int k);

/// Per (case, trial) outcome of a run with the largest step budget.
struct TrialResult {
    std::string case_id;
    std::string doc_id;
    int trial = 0;
    bool executable = false;
    int iterations_used = 0;
    Judgment judgment = Judgment::fail;

    bool positive_within(int s_max) const {
        return executable && iterations_used <= s_max && judgment == Judgment::pass;
    }
};

/// Success matrix as if every run had stopped after s_max rounds. Exact
/// because the loop is prefix stable.
EvalMatrix matrix_at(const std::vector<TrialResult>& results, int s_max, const std::string& backend_id = "");

struct ExperimentTables {
    std::vector<int> s_values;
    std::vector<int> k_values;
    std::vector<std::vector<int>> success_count;  // [s][k]: cases passing within first k trials
    std::vector<std::vector<double>> pass_rate;   // [s][k]
    std::map<int, int> rounds_histogram;          // generation rounds -> positive samples, at the largest s
    std::map<std::string, int> negatives_by_doc;  // at the largest s
    int samples = 0;
    int positives = 0;
};

ExperimentTables experiment_tables(const std::vector<TrialResult>& results, std::vector<int> s_values,
                                   std::vector<int> k_values);

nlohmann::json to_json(const ExperimentTables& t);

/// Writes success_matrix.csv, histogram.json and negatives_by_doc.json.
void write_experiment_tables(const ExperimentTables& t, const std::filesystem::path& dir);

} // namespace rfcprobe
