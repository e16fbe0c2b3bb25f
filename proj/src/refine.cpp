#include "rfcprobe/refine.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe {

namespace {

std::string query_text(const std::string& prompt, const std::string& body) { return prompt + "\n\n" + body; }

std::string or_none(const std::string& s) { return s.empty() ? std::string("(none)\n") : s; }

std::string ensure_newline(std::string s) {
    if (s.empty() || s.back() != '\n') s += '\n';
    return s;
}

RunStatus run_status_from(std::string_view s) {
    for (auto st : {RunStatus::clean, RunStatus::process_error, RunStatus::timeout, RunStatus::launch_failure})
        if (to_string(st) == s) return st;
    throw SchemaError("unknown run status: " + std::string(s));
}

} // namespace

void RefineConfig::validate() const {
    if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
    if (window < 1) throw ConfigError("window must be at least 1");
}

std::string_view to_string(RefineStatus s) {
    return s == RefineStatus::executable ? "executable" : "exhausted";
}

nlohmann::json to_json(const RefineOutcome& outcome) {
    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : outcome.history)
        history.push_back({{"index", r.index},
                           {"retrieved", r.retrieved},
                           {"output", r.output},
                           {"feedback", r.feedback},
                           {"status", std::string(to_string(r.status))}});
    nlohmann::json j = {{"case_id", outcome.case_id},
                        {"status", std::string(to_string(outcome.status))},
                        {"iterations_used", outcome.iterations_used},
                        {"final_output", outcome.final_output},
                        {"history", std::move(history)},
                        {"error", outcome.error}};
    j["final_artifact"] = outcome.final_artifact ? nlohmann::json(render_artifact(*outcome.final_artifact))
                                                 : nlohmann::json(nullptr);
    return j;
}

RefineOutcome refine_outcome_from_json(const nlohmann::json& j) {
    try {
        RefineOutcome out;
        out.case_id = j.at("case_id").get<std::string>();
        const auto status = j.at("status").get<std::string>();
        if (status == "executable") out.status = RefineStatus::executable;
        else if (status == "exhausted") out.status = RefineStatus::exhausted;
        else throw SchemaError("unknown refine status: " + status);
        out.iterations_used = j.at("iterations_used").get<int>();
        out.final_output = j.value("final_output", "");
        out.error = j.value("error", "");
        for (const auto& r : j.at("history")) {
            IterationRecord rec;
            rec.index = r.at("index").get<int>();
            rec.retrieved = r.at("retrieved").get<std::string>();
            rec.output = r.at("output").get<std::string>();
            rec.feedback = r.at("feedback").get<std::string>();
            rec.status = run_status_from(r.at("status").get<std::string>());
            out.history.push_back(std::move(rec));
        }
        if (j.contains("final_artifact") && j["final_artifact"].is_string())
            out.final_artifact = parse_artifact_bundle(j["final_artifact"].get<std::string>(), nullptr, out.case_id);
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("malformed refine outcome: ") + e.what());
    }
}

RunnerPlatform::RunnerPlatform(std::filesystem::path workspace, SandboxConfig sandbox)
    : workspace_(std::move(workspace)), sandbox_(std::move(sandbox)) {
    sandbox_.validate();
}

ExecutionFeedback RunnerPlatform::test(const Artifact& artifact, int attempt) {
    std::string case_id;
    try {
        case_id = parse_blueprint(artifact.blueprint_json).case_id;
    } catch (const SchemaError&) {
    }
    ExecutionFeedback fb;
    try {
        std::filesystem::create_directories(workspace_);
        // Files from an earlier attempt would let a stale program satisfy the blueprint.
        for (const auto& name : written_) {
            const bool kept = std::any_of(artifact.subprograms.begin(), artifact.subprograms.end(),
                                          [&](const Subprogram& sp) { return sp.file_name == name; });
            if (!kept) std::filesystem::remove(workspace_ / name);
        }
        write_artifact(artifact, workspace_);
        written_.clear();
        for (const auto& sp : artifact.subprograms) written_.push_back(sp.file_name);
        fb = execute_blueprint_text(artifact.blueprint_json, workspace_, sandbox_);
    } catch (const Error& e) {
        fb = launch_failure(case_id, e.what());
    }
    if (fb.case_id.empty()) fb.case_id = case_id;
    write_feedback(fb, workspace_, attempt);
    return fb;
}

std::string build_debug_prompt(const std::vector<IterationRecord>& history, int window, const std::string& initial_prompt,
                               const std::string& case_text, const std::string& debug_prompt,
                               const std::string& next_context) {
    std::string out = ensure_newline(initial_prompt) + "\n" + ensure_newline(case_text) + "\n";
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(std::max(window, 0)), history.size());
    for (std::size_t k = history.size() - keep; k < history.size(); ++k) {
        const auto& r = history[k];
        out += "[iteration " + std::to_string(r.index) + "]\n";
        out += "Retrieved context:\n" + ensure_newline(or_none(r.retrieved));
        out += "Output:\n" + ensure_newline(or_none(r.output));
        out += "Execution feedback:\n" + ensure_newline(or_none(r.feedback));
        out += ensure_newline(debug_prompt) + "\n";
    }
    out += "Retrieved context for this round:\n" + ensure_newline(or_none(next_context));
    return out;
}

RefineOutcome refine_loop(const TestCase& tc, const Retriever& retriever, llm::ChatBackend& backend,
                          TestPlatform& platform, const RefineConfig& cfg, const SynthesisConfig& synth) {
    cfg.validate();
    const auto problems = case_problems(tc);
    if (!problems.empty()) throw ConfigError("invalid test case " + tc.case_id + ": " + problems.front());

    RefineOutcome outcome;
    outcome.case_id = tc.case_id;
    const std::string case_text = render_case(tc);
    std::optional<Artifact> last_valid;

    std::string retrieved;
    std::optional<Artifact> candidate;
    std::string output;
    std::string failure;

    try {
        const auto r0 = retriever.retrieve(query_text(cfg.initial_prompt, case_text));
        retrieved = render_context(r0);
        try {
            candidate = synthesize(tc, r0, backend, synth);
            output = render_artifact(*candidate);
        } catch (const ReplyError& e) {
            failure = std::string("synthesis failed: ") + e.what();
            output = e.raw_reply();
        }
    } catch (const BackendError& e) {
        outcome.error = e.what();
        spdlog::warn("{}: backend failure before the first test run: {}", tc.case_id, e.what());
        return outcome;
    }

    for (int i = 0;; ++i) {
        ExecutionFeedback fb = candidate ? platform.test(*candidate, i) : launch_failure(tc.case_id, failure);
        if (candidate) last_valid = candidate;

        IterationRecord rec;
        rec.index = i;
        rec.retrieved = retrieved;
        rec.output = output;
        rec.feedback = feedback_text(fb, cfg.feedback_log_tail);
        rec.status = fb.status;
        outcome.history.push_back(rec);
        outcome.iterations_used = i + 1;
        outcome.final_output = output;
        outcome.final_artifact = last_valid;

        if (candidate && classify_feedback(fb) == Classification::success) {
            outcome.status = RefineStatus::executable;
            return outcome;
        }
        if (i + 1 >= cfg.max_steps) return outcome;

        candidate.reset();
        failure.clear();
        try {
            retrieved = render_context(retriever.retrieve(query_text(cfg.debug_prompt, rec.feedback)));
            const auto prompt =
                build_debug_prompt(outcome.history, cfg.window, cfg.initial_prompt, case_text, cfg.debug_prompt, retrieved);
            llm::Transcript t;
            t.system(synthesis_system_prompt(synth)).user(prompt);
            output = backend.complete(t);
        } catch (const BackendError& e) {
            outcome.error = e.what();
            spdlog::warn("{}: backend failure in round {}: {}", tc.case_id, i + 1, e.what());
            return outcome;
        }
        try {
            candidate = parse_artifact_bundle(output, last_valid ? &*last_valid : nullptr, tc.case_id);
            output = render_artifact(*candidate);
        } catch (const ReplyError& e) {
            failure = std::string("unusable debug reply: ") + e.what();
        }
    }
}

} // namespace rfcprobe
