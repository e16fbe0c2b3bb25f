// rfcprobe command-line driver.
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/pipeline.hpp"
#include "rfcprobe/text.hpp"

namespace fs = std::filesystem;
using namespace rfcprobe;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kCasesFailed = 2;

struct Options {
    std::string config = "rfcprobe.json";
    std::string workspace;
    int jobs = 0;
    bool force = false;
    bool verbose = false;
};

PipelineConfig load_config(const Options& o) {
    auto cfg = PipelineConfig::load(o.config);
    if (o.jobs > 0) cfg.jobs = o.jobs;
    if (!o.workspace.empty()) cfg.workspace = fs::absolute(o.workspace);
    return cfg;
}

std::vector<TestCase> read_case_file(const fs::path& file) {
    const auto j = text::read_json(file);
    std::vector<TestCase> out;
    if (j.is_array())
        for (const auto& e : j) out.push_back(test_case_from_json(e));
    else
        out.push_back(test_case_from_json(j));
    return out;
}

TestCase pick_case(const std::vector<TestCase>& cases, const std::string& id) {
    if (id.empty()) {
        if (cases.size() != 1) throw ConfigError("several cases available; pick one with --case-id");
        return cases.front();
    }
    for (const auto& tc : cases)
        if (tc.case_id == id) return tc;
    throw ConfigError("no case with id " + id);
}

void print_pass_rates(const json& agg, int k_limit) {
    fmt::print("{}: {} case(s), {} trial(s), {} positive, {} negative, {} failed\n", agg["arm"].get<std::string>(),
               agg["cases"].get<int>(), agg["trials"].get<int>(), agg["positives"].get<int>(),
               agg["negatives"].get<int>(), agg["failed"].size());
    for (const auto& [k, v] : agg["pass_at_k"].items())
        if (k_limit <= 0 || std::stoi(k) <= k_limit) fmt::print("  Pass@{} = {:.4f}\n", k, v.get<double>());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Specification-driven protocol conformance testing"};
    app.require_subcommand(1);
    Options o;
    app.add_option("-c,--config", o.config, "Pipeline config (JSON)");
    app.add_option("-w,--workspace", o.workspace, "Workspace directory (overrides the config)");
    app.add_option("-j,--jobs", o.jobs, "Cases run in parallel (overrides the config)");
    app.add_flag("-v,--verbose", o.verbose, "Debug logging");

    auto* ingest = app.add_subcommand("ingest", "Extract functional points from the configured documents");
    std::vector<std::string> docs;
    ingest->add_option("--doc", docs, "Documents (replace the configured list)")->check(CLI::ExistingFile);

    auto* gen = app.add_subcommand("gen-cases", "Generate and filter test cases from the inventory");
    auto* index = app.add_subcommand("index", "Index the implementation library into the store");
    std::string library;
    index->add_option("--library", library, "Library directory (overrides the config)");

    auto* synth = app.add_subcommand("synthesize", "Synthesize programs for one case without running them");
    std::string case_file, case_id, out_dir;
    synth->add_option("--case", case_file, "Case file (one case or an array)");
    synth->add_option("--case-id", case_id, "Case to pick");
    synth->add_option("--out", out_dir, "Output directory")->required();

    auto* run = app.add_subcommand("run", "Run the blueprint in a directory once");
    std::string run_dir;
    int timeout_ms = 0;
    run->add_option("dir", run_dir, "Directory holding blueprint.json")->required()->check(CLI::ExistingDirectory);
    run->add_option("--timeout-ms", timeout_ms, "Per-run timeout");

    auto* test = app.add_subcommand("test-case", "Generate, run and debug one case, then judge it");
    std::string arm = "full";
    int max_steps = 0, window = 0, trial = 0;
    test->add_option("--case", case_file, "Case file (one case or an array)");
    test->add_option("--case-id", case_id, "Case to pick");
    test->add_option("--max-steps", max_steps, "Generation round budget");
    test->add_option("--window", window, "Debug prompt window");
    test->add_option("--arm", arm, "full, no_rag, no_refine or baseline");
    test->add_option("--trial", trial, "Trial index");
    test->add_flag("--force", o.force, "Ignore a finished case directory");

    auto* report = app.add_subcommand("report", "Rebuild the aggregate report of an arm");
    int k_limit = 0;
    report->add_option("--arm", arm, "Arm directory under runs/");
    report->add_option("--k", k_limit, "Largest k to print");

    auto* ablate = app.add_subcommand("ablate", "Run the full system and the given ablation arms");
    std::vector<std::string> arms = {"no_rag", "no_refine", "baseline"};
    ablate->add_option("--arms", arms, "Arms besides full")->delimiter(',');
    ablate->add_flag("--force", o.force, "Rerun finished cases");

    auto* review = app.add_subcommand("review", "Manual review of reports that passed the keyword filter");
    review->require_subcommand(1);
    auto* queue = review->add_subcommand("queue", "List reports awaiting review");
    queue->add_option("--arm", arm, "Arm directory under runs/");
    auto* merge = review->add_subcommand("merge", "Merge a decision file into an arm");
    std::string decisions;
    merge->add_option("--decisions", decisions, "Decision file")->required()->check(CLI::ExistingFile);
    merge->add_option("--arm", arm, "Arm directory under runs/");

    auto* pipe = app.add_subcommand("pipeline", "ingest, index, gen-cases and the full arm");
    pipe->add_flag("--force", o.force, "Rerun finished cases");
    auto* experiment = app.add_subcommand("experiment", "S_max x k grid from one run at the largest budget");
    experiment->add_flag("--force", o.force, "Rerun finished cases");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }
    spdlog::set_level(o.verbose ? spdlog::level::debug : spdlog::level::info);

    try {
        if (run->parsed()) {
            SandboxConfig sb;
            if (fs::exists(o.config)) sb = load_config(o).sandbox;
            if (timeout_ms > 0) sb.timeout_ms = timeout_ms;
            const auto fb = execute_blueprint_text(text::read_file(fs::path(run_dir) / "blueprint.json"), run_dir, sb);
            write_feedback(fb, run_dir, 0);
            std::cout << feedback_text(fb);
            return fb.status == RunStatus::clean ? kOk : kCasesFailed;
        }

        auto cfg = load_config(o);
        if (ingest->parsed() && !docs.empty()) cfg.documents.assign(docs.begin(), docs.end());
        if (index->parsed() && !library.empty()) cfg.library = fs::path(library);
        if (test->parsed()) {
            if (max_steps > 0) cfg.refine.max_steps = max_steps;
            if (window > 0) cfg.refine.window = window;
        }
        Pipeline p(cfg);

        if (ingest->parsed()) {
            fmt::print("{} functional point(s)\n", p.ingest().size());
            return kOk;
        }
        if (gen->parsed()) {
            fmt::print("{} accepted case(s)\n", p.generate_cases().size());
            return kOk;
        }
        if (index->parsed()) {
            const auto st = p.build_index();
            fmt::print("{} file(s) indexed, {} skipped, {} item(s)\n", st.files_indexed, st.files_skipped, st.items);
            return kOk;
        }
        if (synth->parsed()) {
            const auto tc = pick_case(case_file.empty() ? p.load_cases() : read_case_file(case_file), case_id);
            const auto art = p.synthesize_case(tc, out_dir);
            for (const auto& w : art.warnings) spdlog::warn("{}", w);
            fmt::print("{} program(s) written to {}\n", art.subprograms.size(), out_dir);
            return kOk;
        }
        if (test->parsed()) {
            const auto tc = pick_case(case_file.empty() ? p.load_cases() : read_case_file(case_file), case_id);
            auto settings = arm_settings(arm, cfg.refine);
            const auto res = p.test_case(tc, settings, trial, o.force);
            if (!res.failure.empty()) {
                fmt::print("{}: failed: {}\n", tc.case_id, res.failure);
                return kCasesFailed;
            }
            fmt::print("{}: {} after {} round(s), judged {}, {} sample\n", tc.case_id,
                       to_string(res.outcome->status), res.outcome->iterations_used, to_string(res.report->judgment),
                       to_string(res.report->sample_class));
            return kOk;
        }
        if (report->parsed()) {
            if (!fs::is_directory(p.arm_dir(arm))) throw ConfigError("no runs for arm " + arm);
            print_pass_rates(write_aggregate(p.arm_dir(arm), cfg.filter_terms), k_limit);
            return kOk;
        }
        if (ablate->parsed()) {
            const int status = p.run_ablation(arms, o.force);
            for (const auto& row : text::read_json(cfg.workspace / "runs" / "ablation.json")["arms"])
                fmt::print("{:<10} Pass@1 = {:.4f}  rounds = {}\n", row["arm"].get<std::string>(),
                           row["pass_at_1"].get<double>(), row["generation_rounds"].get<int>());
            return status;
        }
        if (queue->parsed()) {
            const auto agg = write_aggregate(p.arm_dir(arm), cfg.filter_terms);
            for (const auto& r : agg["reports"])
                if (r["filter_status"] == "needs_manual_review")
                    fmt::print("{} trial {}: {} / {}\n", r["case_id"].get<std::string>(), r["trial"].get<int>(),
                               r["sample_class"].get<std::string>(), r["judgment"].get<std::string>());
            fmt::print("queue written to {}\n", (p.arm_dir(arm) / "review_queue.json").string());
            return kOk;
        }
        if (merge->parsed()) {
            const auto dir = p.arm_dir(arm);
            const auto file = dir / "review_decisions.json";
            json all = fs::is_regular_file(file) ? text::read_json(file) : json{{"decisions", json::array()}};
            const auto incoming = text::read_json(decisions);
            if (!incoming.contains("decisions") || !incoming["decisions"].is_array())
                throw SchemaError("decision file must hold {\"decisions\": [...]}");
            auto agg = aggregate_report(dir, cfg.filter_terms);
            std::vector<ConformanceReport> pending;
            for (const auto& r : agg["reports"]) pending.push_back(conformance_report_from_json(r));
            const auto applied = merge_review_decisions(pending, incoming);
            for (const auto& d : incoming["decisions"]) all["decisions"].push_back(d);
            text::write_json(file, all);
            write_aggregate(dir, cfg.filter_terms);
            fmt::print("{} decision(s) applied\n", applied);
            return kOk;
        }
        if (pipe->parsed()) {
            const int status = p.run_all(o.force);
            print_pass_rates(text::read_json(p.arm_dir("full") / "report.json"), 0);
            return status;
        }
        if (experiment->parsed()) {
            const int status = p.run_experiment(o.force);
            std::cout << text::read_file(p.arm_dir("experiment") / "tables" / "success_matrix.csv");
            return status;
        }
    } catch (const ConfigError& e) {
        spdlog::error("{}", e.what());
        return kConfigError;
    } catch (const SchemaError& e) {
        spdlog::error("{}", e.what());
        return kConfigError;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kCasesFailed;
    }
    return kOk;
}
