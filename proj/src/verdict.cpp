#include "rfcprobe/verdict.hpp"

#include <algorithm>
#include <regex>
#include <set>

#include <fmt/format.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe {

namespace {

using nlohmann::json;

constexpr const char* kVerdictInstruction =
    "End your reply with exactly one line: VERDICT: PASS, VERDICT: FAIL or VERDICT: UNDECIDABLE.";

const std::regex& verdict_re() {
    static const std::regex re(R"(VERDICT\s*:\s*\**\s*(PASS|FAIL|UNDECIDABLE)\b)", std::regex::icase);
    return re;
}

std::string strip_verdict(const std::string& reply) {
    std::string out;
    for (const auto& line : text::split_lines(reply)) {
        if (std::regex_search(line, verdict_re())) continue;
        out += line + "\n";
    }
    out = text::trim(out);
    return out.empty() ? std::string("(no rationale given)") : out;
}

Judgment judgment_from(std::string_view s) {
    for (auto j : {Judgment::pass, Judgment::fail, Judgment::undecidable})
        if (to_string(j) == s) return j;
    throw SchemaError("unknown judgment: " + std::string(s));
}

ReportFilter filter_from(std::string_view s) {
    for (auto f : {ReportFilter::kept, ReportFilter::auto_filtered, ReportFilter::needs_manual_review,
                   ReportFilter::excluded})
        if (to_string(f) == s) return f;
    throw SchemaError("unknown filter status: " + std::string(s));
}

} // namespace

std::string_view to_string(Judgment j) {
    switch (j) {
    case Judgment::pass: return "pass";
    case Judgment::fail: return "fail";
    case Judgment::undecidable: return "undecidable";
    }
    return "undecidable";
}

std::string_view to_string(SampleClass c) { return c == SampleClass::positive ? "positive" : "negative"; }

std::string_view to_string(ReportFilter f) {
    switch (f) {
    case ReportFilter::kept: return "kept";
    case ReportFilter::auto_filtered: return "auto_filtered";
    case ReportFilter::needs_manual_review: return "needs_manual_review";
    case ReportFilter::excluded: return "excluded";
    }
    return "needs_manual_review";
}

std::string build_judge_prompt(const TestCase& tc, const RefineOutcome& outcome) {
    const std::string programs = outcome.final_artifact ? render_artifact(*outcome.final_artifact) : outcome.final_output;
    const std::string feedback = outcome.history.empty() ? std::string("(none)\n") : outcome.history.back().feedback;
    return fmt::format("Test case {}:\n{}\nFinal programs:\n{}\nExecution feedback of the final run:\n{}\n"
                       "Compare every test assertion with what the programs did and what the logs show, and decide "
                       "whether the implementation under test behaved as the assertions require. Explain your "
                       "reasoning briefly. {}\n",
                       tc.case_id, render_case(tc), programs, feedback, kVerdictInstruction);
}

std::optional<Judgment> parse_verdict(std::string_view reply) {
    std::string s(reply);
    std::optional<Judgment> found;
    for (auto it = std::sregex_iterator(s.begin(), s.end(), verdict_re()); it != std::sregex_iterator(); ++it) {
        const auto word = text::to_lower((*it)[1].str());
        found = judgment_from(word);
    }
    return found;
}

JudgeResult judge_assertions(const TestCase& tc, const RefineOutcome& outcome, llm::ChatBackend& backend) {
    JudgeResult res;
    if (outcome.status != RefineStatus::executable) {
        res.verdict = Judgment::fail;
        res.rationale = fmt::format("not executable within {} generation round(s)", outcome.iterations_used);
        if (!outcome.error.empty()) res.rationale += "; backend error: " + outcome.error;
        if (!outcome.history.empty())
            res.rationale += "\nlast feedback:\n" + text::tail_truncate(outcome.history.back().feedback, 1500);
        return res;
    }
    llm::Transcript t;
    t.system("You judge the results of protocol conformance tests.").user(build_judge_prompt(tc, outcome));
    for (int attempt = 0; attempt < 2; ++attempt) {
        const auto reply = backend.complete(t);
        ++res.calls;
        if (auto v = parse_verdict(reply)) {
            res.verdict = *v;
            res.rationale = strip_verdict(reply);
            return res;
        }
        res.rationale = text::trim(reply);
        t.assistant(reply).user(std::string("Your reply had no verdict line. ") + kVerdictInstruction);
    }
    res.verdict = Judgment::undecidable;
    if (res.rationale.empty()) res.rationale = "(no rationale given)";
    return res;
}

std::string build_summary_prompt(const TestCase& tc, const std::vector<IterationRecord>& history,
                                 const std::string& initial_prompt) {
    std::string out = initial_prompt + "\n\n" + render_case(tc) + "\n";
    for (const auto& r : history) {
        out += fmt::format("[attempt {}]\nOutput:\n{}\nExecution feedback:\n{}\n", r.index, r.output, r.feedback);
    }
    out += "Summarize the lesson of this testing process in a few sentences: which mistakes occurred, how they were "
           "fixed, and what to do from the start next time. Reply with the summary only.\n";
    return out;
}

ExperienceSummary summarize_experience(const TestCase& tc, const std::vector<IterationRecord>& history,
                                       llm::ChatBackend& backend, const std::string& initial_prompt) {
    if (history.empty()) throw ConfigError("cannot summarize an empty history for " + tc.case_id);
    llm::Transcript t;
    t.system("You distill lessons from protocol test program development.")
        .user(build_summary_prompt(tc, history, initial_prompt));
    const auto reply = backend.complete(t);
    ExperienceSummary s;
    s.case_id = tc.case_id;
    s.text = text::trim(reply);
    if (s.text.empty()) throw ReplyError("empty experience summary for " + tc.case_id, reply);
    std::string digest;
    for (const auto& r : history) digest += r.output + '\0' + r.feedback + '\0';
    s.derived_from = text::sha256_hex(digest);
    return s;
}

std::string remember_experience(MemoryStore& store, const Embedder& embedder, const ExperienceSummary& summary) {
    return store.store_experience(summary.case_id, summary.text, embedder);
}

json to_json(const ConformanceReport& r) {
    return {{"case_id", r.case_id},
            {"doc_id", r.doc_id},
            {"trial", r.trial},
            {"sample_class", std::string(to_string(r.sample_class))},
            {"execution_status", std::string(to_string(r.execution_status))},
            {"iterations_used", r.iterations_used},
            {"judgment", std::string(to_string(r.judgment))},
            {"judge_rationale", r.judge_rationale},
            {"filter_status", std::string(to_string(r.filter_status))},
            {"matched_filter_terms", r.matched_filter_terms},
            {"review_note", r.review_note}};
}

ConformanceReport conformance_report_from_json(const json& j) {
    try {
        ConformanceReport r;
        r.case_id = j.at("case_id").get<std::string>();
        r.doc_id = j.value("doc_id", "");
        r.trial = j.value("trial", 0);
        const auto cls = j.at("sample_class").get<std::string>();
        if (cls != "positive" && cls != "negative") throw SchemaError("unknown sample class: " + cls);
        r.sample_class = cls == "positive" ? SampleClass::positive : SampleClass::negative;
        const auto st = j.at("execution_status").get<std::string>();
        if (st != "executable" && st != "exhausted") throw SchemaError("unknown execution status: " + st);
        r.execution_status = st == "executable" ? RefineStatus::executable : RefineStatus::exhausted;
        r.iterations_used = j.value("iterations_used", 0);
        r.judgment = judgment_from(j.at("judgment").get<std::string>());
        r.judge_rationale = j.value("judge_rationale", "");
        r.filter_status = filter_from(j.at("filter_status").get<std::string>());
        r.matched_filter_terms = j.value("matched_filter_terms", std::vector<std::string>{});
        r.review_note = j.value("review_note", "");
        return r;
    } catch (const json::exception& e) {
        throw SchemaError(std::string("malformed report: ") + e.what());
    }
}

ConformanceReport make_report(const TestCase& tc, std::string doc_id, int trial, const RefineOutcome& outcome,
                              const JudgeResult& judgment) {
    ConformanceReport r;
    r.case_id = tc.case_id;
    r.doc_id = std::move(doc_id);
    r.trial = trial;
    r.execution_status = outcome.status;
    r.iterations_used = outcome.iterations_used;
    r.judgment = judgment.verdict;
    r.judge_rationale = judgment.rationale;
    r.sample_class = outcome.status == RefineStatus::executable && judgment.verdict == Judgment::pass
                         ? SampleClass::positive
                         : SampleClass::negative;
    return r;
}

std::vector<std::string> default_filter_terms() {
    return {"incorrectly binding", "does not exist", "incorrect parameter"};
}

FilterPartition filter_reports(std::vector<ConformanceReport> reports, const std::vector<std::string>& terms) {
    FilterPartition out;
    for (auto& r : reports) {
        r.matched_filter_terms.clear();
        for (const auto& term : terms)
            if (!term.empty() && text::contains_icase(r.judge_rationale, term)) r.matched_filter_terms.push_back(term);
        if (!r.matched_filter_terms.empty()) {
            r.filter_status = ReportFilter::auto_filtered;
            out.auto_filtered.push_back(std::move(r));
        } else {
            r.filter_status = ReportFilter::needs_manual_review;
            out.needs_review.push_back(std::move(r));
        }
    }
    return out;
}

void write_review_queue(const std::vector<ConformanceReport>& pending, const std::filesystem::path& file) {
    json arr = json::array();
    for (const auto& r : pending) arr.push_back(to_json(r));
    text::write_json(file, json{{"reports", arr}});
}

std::size_t merge_review_decisions(std::vector<ConformanceReport>& reports, const json& decisions) {
    if (!decisions.is_object() || !decisions.contains("decisions") || !decisions["decisions"].is_array())
        throw SchemaError("decision file must hold {\"decisions\": [...]}");
    std::size_t applied = 0;
    for (const auto& d : decisions["decisions"]) {
        if (!d.is_object() || !d.contains("case_id") || !d["case_id"].is_string() || !d.contains("decision") ||
            !d["decision"].is_string())
            throw SchemaError("each decision needs string case_id and decision");
        const auto case_id = d["case_id"].get<std::string>();
        const auto word = d["decision"].get<std::string>();
        ReportFilter target;
        if (word == "kept") target = ReportFilter::kept;
        else if (word == "excluded") target = ReportFilter::excluded;
        else throw SchemaError("unknown decision \"" + word + "\" for " + case_id);
        std::optional<int> trial;
        if (d.contains("trial")) {
            if (!d["trial"].is_number_integer()) throw SchemaError("trial must be an integer for " + case_id);
            trial = d["trial"].get<int>();
        }
        std::size_t hits = 0;
        for (auto& r : reports) {
            if (r.case_id != case_id || (trial && r.trial != *trial)) continue;
            if (r.filter_status != ReportFilter::needs_manual_review) continue;
            r.filter_status = target;
            r.review_note = d.value("note", "");
            ++hits;
        }
        if (hits == 0) throw SchemaError("no report under review for " + case_id);
        applied += hits;
    }
    return applied;
}

void EvalMatrix::validate() const {
    if (trials < 0) throw ConfigError("negative trial count");
    if (success.size() != case_ids.size()) throw ConfigError("matrix rows do not match the case count");
    for (const auto& row : success)
        if (row.size() != static_cast<std::size_t>(trials)) throw ConfigError("matrix row does not match the trial count");
}

namespace {

std::size_t cases_passing(const EvalMatrix& m, int k) {
    m.validate();
    if (m.cases() == 0) throw DegenerateInput("pass@k over zero cases");
    if (k < 1 || k > m.trials) throw ConfigError(fmt::format("k={} outside 1..{}", k, m.trials));
    std::size_t hit = 0;
    for (const auto& row : m.success)
        if (std::any_of(row.begin(), row.begin() + k, [](bool b) { return b; })) ++hit;
    return hit;
}

} // namespace

double pass_at_k(const EvalMatrix& m, int k) {
    return static_cast<double>(cases_passing(m, k)) / static_cast<double>(m.cases());
}

EvalMatrix matrix_at(const std::vector<TrialResult>& results, int s_max, const std::string& backend_id) {
    if (s_max < 1) throw ConfigError("s_max must be at least 1");
    EvalMatrix m;
    m.s_max = s_max;
    m.backend_id = backend_id;
    std::map<std::string, std::size_t> row_of;
    for (const auto& r : results) {
        if (r.trial < 0) throw ConfigError("negative trial index for " + r.case_id);
        if (row_of.emplace(r.case_id, m.case_ids.size()).second) m.case_ids.push_back(r.case_id);
        m.trials = std::max(m.trials, r.trial + 1);
    }
    std::vector<std::vector<int>> seen(m.case_ids.size(), std::vector<int>(m.trials, 0));
    m.success.assign(m.case_ids.size(), std::vector<bool>(m.trials, false));
    for (const auto& r : results) {
        const auto row = row_of[r.case_id];
        if (seen[row][r.trial]++) throw ConfigError(fmt::format("duplicate result for {} trial {}", r.case_id, r.trial));
        m.success[row][r.trial] = r.positive_within(s_max);
    }
    for (std::size_t i = 0; i < seen.size(); ++i)
        for (int j = 0; j < m.trials; ++j)
            if (!seen[i][j]) throw ConfigError(fmt::format("missing result for {} trial {}", m.case_ids[i], j));
    return m;
}

ExperimentTables experiment_tables(const std::vector<TrialResult>& results, std::vector<int> s_values,
                                   std::vector<int> k_values) {
    if (results.empty()) throw DegenerateInput("no trial results");
    if (s_values.empty() || k_values.empty()) throw ConfigError("experiment grid needs S_max and k values");
    std::sort(s_values.begin(), s_values.end());
    s_values.erase(std::unique(s_values.begin(), s_values.end()), s_values.end());
    std::sort(k_values.begin(), k_values.end());
    k_values.erase(std::unique(k_values.begin(), k_values.end()), k_values.end());

    ExperimentTables t;
    t.s_values = s_values;
    t.k_values = k_values;
    for (int s : s_values) {
        const auto m = matrix_at(results, s);
        std::vector<int> counts;
        std::vector<double> rates;
        for (int k : k_values) {
            counts.push_back(static_cast<int>(cases_passing(m, k)));
            rates.push_back(pass_at_k(m, k));
        }
        t.success_count.push_back(std::move(counts));
        t.pass_rate.push_back(std::move(rates));
    }
    const int s_top = s_values.back();
    for (const auto& r : results) {
        ++t.samples;
        t.negatives_by_doc.try_emplace(r.doc_id, 0);
        if (r.positive_within(s_top)) {
            ++t.positives;
            ++t.rounds_histogram[r.iterations_used];
        } else {
            ++t.negatives_by_doc[r.doc_id];
        }
    }
    return t;
}

json to_json(const ExperimentTables& t) {
    json grid = json::array();
    for (std::size_t i = 0; i < t.s_values.size(); ++i)
        for (std::size_t j = 0; j < t.k_values.size(); ++j)
            grid.push_back({{"s_max", t.s_values[i]},
                            {"k", t.k_values[j]},
                            {"success_count", t.success_count[i][j]},
                            {"pass_at_k", t.pass_rate[i][j]}});
    json hist = json::object();
    for (const auto& [rounds, n] : t.rounds_histogram) hist[std::to_string(rounds)] = n;
    return {{"grid", grid},
            {"rounds_histogram", hist},
            {"negatives_by_doc", t.negatives_by_doc},
            {"samples", t.samples},
            {"positives", t.positives}};
}

void write_experiment_tables(const ExperimentTables& t, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string csv = "s_max,k,success_count,pass_at_k\n";
    for (std::size_t i = 0; i < t.s_values.size(); ++i)
        for (std::size_t j = 0; j < t.k_values.size(); ++j)
            csv += fmt::format("{},{},{},{:.4f}\n", t.s_values[i], t.k_values[j], t.success_count[i][j], t.pass_rate[i][j]);
    text::write_file(dir / "success_matrix.csv", csv);
    const auto j = to_json(t);
    text::write_json(dir / "histogram.json", json{{"rounds_histogram", j["rounds_histogram"]}, {"positives", t.positives}});
    text::write_json(dir / "negatives_by_doc.json",
                     json{{"negatives_by_doc", j["negatives_by_doc"]}, {"negatives", t.samples - t.positives}});
}

} // namespace rfcprobe
