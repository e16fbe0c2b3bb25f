// One line per acceptance criterion; exit status 1 when any line fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>

#include <fmt/format.h>

#include "rfcprobe/doc_ingest.hpp"
#include "rfcprobe/error.hpp"
#include "rfcprobe/memory.hpp"
#include "rfcprobe/pipeline.hpp"
#include "rfcprobe/refine.hpp"
#include "rfcprobe/runner.hpp"
#include "rfcprobe/text.hpp"
#include "rfcprobe/verdict.hpp"
#include "scripted_agent.hpp"
#include "synthetic_docs.hpp"

using namespace rfcprobe;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Check {
    bool ok = true;
    std::string detail;

    void expect(bool cond, const std::string& what) {
        if (!cond && ok) detail = what;
        ok = ok && cond;
    }
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / ("rfcprobe_accept_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Check coverage_oracle() {
    Check c;
    std::mt19937_64 rng(50);
    const auto t0 = Clock::now();
    const auto kw = ingest::KeywordSet::rfc2119_default();
    for (int trial = 0; trial < 50; ++trial) {
        const bool markdown = trial % 2 == 0;
        const bool cs = (trial / 2) % 2 == 0;
        auto synth = testing::generate_doc(rng, {50, markdown, true}, "doc" + std::to_string(trial));
        auto doc = markdown ? ingest::parse_markdown(synth.text, synth.doc_id)
                            : ingest::parse_plain_text(synth.text, synth.doc_id);
        doc.rfc2119 = cs;
        const auto tag = fmt::format("document {}", trial);
        auto fps = ingest::extract_functional_points(doc, kw);
        auto want = testing::oracle_points(synth, kw.keywords(), cs);
        c.expect(fps.size() == want.size(), tag + ": point count differs");
        for (std::size_t i = 0; i < std::min(fps.size(), want.size()); ++i) {
            c.expect(fps[i].section_id == want[i].section_id && fps[i].paragraph_text == want[i].text &&
                         fps[i].matched_keywords == want[i].keywords &&
                         fps[i].fp_id == ingest::make_fp_id(synth.doc_id, want[i].section_id, want[i].ordinal),
                     tag + ": point " + std::to_string(i) + " differs");
        }
        const double oracle = testing::oracle_coverage(synth, kw.keywords(), cs);
        c.expect(oracle >= 0.0 && ingest::section_coverage(doc, kw) == oracle, tag + ": coverage differs");
    }
    const double s = seconds_since(t0);
    c.expect(s < 5.0, fmt::format("took {:.2f} s", s));
    if (c.ok) c.detail = fmt::format("50 documents, {:.2f} s", s);
    return c;
}

std::string filler(std::size_t n, const std::string& tail = "") {
    std::string s;
    while (s.size() + tail.size() < n) s += s.empty() ? "data" : " data";
    s = s.substr(0, n - tail.size());
    if (!s.empty() && s.back() == ' ') s.back() = 'x';
    return s + tail;
}

Check coverage_hand_case() {
    Check c;
    const std::string md = "## 1. A\n\n" + filler(100) + "\n\n## 2. B\n\n" + filler(300) + "\n\n## 3. C\n\n" +
                           filler(600, " The server MUST echo.") + "\n";
    auto doc = ingest::parse_markdown(md, "hand");
    doc.rfc2119 = true;
    const double cov = ingest::section_coverage(doc, ingest::KeywordSet::rfc2119_default());
    c.expect(cov == 0.6, fmt::format("coverage {}", cov));
    if (c.ok) c.detail = "coverage 0.6";
    return c;
}

std::string random_text(std::mt19937_64& rng) {
    static const std::vector<std::string> vocab = {"socket", "bind",   "send",   "recv", "token", "option", "observe",
                                                   "block",  "etag",   "ack",    "con",  "reset", "payload", "uri",
                                                   "server", "client", "coap",   "get",  "put",   "delete"};
    std::uniform_int_distribution<std::size_t> w(0, vocab.size() - 1);
    std::uniform_int_distribution<int> len(1, 12);
    std::string s;
    for (int i = len(rng); i > 0; --i) s += vocab[w(rng)] + " ";
    return s;
}

Check retrieval_oracle() {
    Check c;
    std::mt19937_64 rng(100);
    LocalEmbedder e(96);
    double worst_self = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto tag = fmt::format("instance {}", trial);
        auto root = scratch("rlib");
        std::uniform_int_distribution<int> count(1, 32);
        const int n = count(rng);
        std::vector<std::pair<std::string, std::string>> files;
        for (int i = 0; i < n; ++i) {
            files.emplace_back(fmt::format("f{:02}.py", i), random_text(rng));
            text::write_file(root / files.back().first, files.back().second);
        }
        MemoryStore store(scratch("rstore"));
        store.index_library(root, e);
        const auto query = random_text(rng);
        const auto top_k = std::uniform_int_distribution<std::size_t>(1, n + 2)(rng);

        std::vector<std::pair<double, std::string>> brute;
        const auto qv = e.embed(query);
        for (const auto& [name, body] : files) brute.emplace_back(cosine(qv, e.embed(body)), name);
        std::sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) {
            if (std::abs(a.first - b.first) > 1e-12) return a.first > b.first;
            return a.second < b.second;
        });
        const auto got = store.retrieve(query, top_k, e);
        c.expect(got.size() == std::min<std::size_t>(top_k, files.size()), tag + ": result size");
        for (std::size_t i = 0; i < std::min(got.size(), brute.size()); ++i)
            c.expect(got[i].item_id == brute[i].second && std::abs(got[i].score - brute[i].first) < 1e-9,
                     fmt::format("{}: ranking differs at {} ({} {:.17g} vs {} {:.17g})", tag, i, got[i].item_id, got[i].score, brute[i].second, brute[i].first));

        const auto& [self_name, self_text] = files[std::uniform_int_distribution<int>(0, n - 1)(rng)];
        const auto self = store.retrieve(self_text, 1, e);
        c.expect(!self.empty(), tag + ": self retrieval empty");
        if (!self.empty()) worst_self = std::max(worst_self, std::abs(self[0].score - 1.0));
    }
    c.expect(worst_self <= 1e-6, fmt::format("self score off by {}", worst_self));
    if (c.ok) c.detail = fmt::format("100 instances, worst self-score error {:.1e}", worst_self);
    return c;
}

TestCase scripted_case() {
    TestCase tc;
    tc.case_id = "tc_accept";
    tc.name = "Echo a record";
    tc.steps = {"The client sends a record", "The server echoes it"};
    tc.assertions = {"The echoed record equals the sent one"};
    return tc;
}

ScriptedPlatform platform_passing_at(int pass) {
    return ScriptedPlatform([pass](const Artifact& a, int attempt) {
        ExecutionFeedback fb;
        fb.case_id = parse_blueprint(a.blueprint_json).case_id;
        fb.status = (pass != 0 && attempt + 1 >= pass) ? RunStatus::clean : RunStatus::process_error;
        return fb;
    });
}

std::size_t debug_prompts(const llm::MockBackend& m) {
    std::size_t n = 0;
    for (const auto& t : m.received())
        if (testing::newest_iteration(t.messages().back().content) >= 0) ++n;
    return n;
}

std::size_t occurrences(const std::string& hay, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + needle.size())) ++n;
    return n;
}

Check refine_contract() {
    Check c;
    const auto t0 = Clock::now();
    testing::AgentScript script;
    script.default_pass_round = 0;
    for (int j = 1; j <= 6; ++j) {
        llm::MockBackend m(testing::scripted_agent(script));
        auto plat = platform_passing_at(j);
        auto out = refine_loop(scripted_case(), Retriever{}, m, plat, RefineConfig{}, testing::shell_synthesis());
        c.expect(out.status == RefineStatus::executable && out.iterations_used == j &&
                     debug_prompts(m) == static_cast<std::size_t>(j - 1),
                 fmt::format("success on round {} gave {} rounds", j, out.iterations_used));
    }
    {
        llm::MockBackend m(testing::scripted_agent(script));
        auto plat = platform_passing_at(0);
        auto out = refine_loop(scripted_case(), Retriever{}, m, plat, RefineConfig{}, testing::shell_synthesis());
        c.expect(out.status == RefineStatus::exhausted && out.history.size() == 6,
                 fmt::format("never passing gave {} records", out.history.size()));
    }
    std::vector<IterationRecord> records(12);
    for (int i = 0; i < 12; ++i) records[i].index = i;
    const auto prompt = build_debug_prompt(records, 10, "INITIAL", "CASE", "DEBUG", "NEXT");
    const auto blocks = occurrences(prompt, "[iteration ");
    c.expect(blocks == 10, fmt::format("window shows {} blocks", blocks));
    const double s = seconds_since(t0);
    c.expect(s < 10.0, fmt::format("took {:.2f} s", s));
    if (c.ok) c.detail = fmt::format("rounds 1..6, exhaustion at 6, window 10 of 12, {:.2f} s", s);
    return c;
}

Check pass_at_k_properties() {
    Check c;
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        EvalMatrix m;
        m.trials = std::uniform_int_distribution<int>(1, 8)(rng);
        const int n = std::uniform_int_distribution<int>(1, 20)(rng);
        std::bernoulli_distribution coin(std::uniform_real_distribution<double>(0, 1)(rng));
        for (int i = 0; i < n; ++i) {
            m.case_ids.push_back(std::to_string(i));
            std::vector<bool> row;
            for (int t = 0; t < m.trials; ++t) row.push_back(coin(rng));
            m.success.push_back(row);
        }
        for (int k = 2; k <= m.trials; ++k)
            c.expect(pass_at_k(m, k) >= pass_at_k(m, k - 1), fmt::format("not monotone at k = {}", k));
        auto all = m;
        for (auto& row : all.success) std::fill(row.begin(), row.end(), true);
        auto none = m;
        for (auto& row : none.success) std::fill(row.begin(), row.end(), false);
        for (int k = 1; k <= m.trials; ++k) {
            c.expect(pass_at_k(all, k) == 1.0, "all-true matrix is not 1");
            c.expect(pass_at_k(none, k) == 0.0, "all-false matrix is not 0");
        }
    }
    EvalMatrix base;
    base.trials = 1;
    for (int i = 0; i < 231; ++i) {
        base.case_ids.push_back(std::to_string(i));
        base.success.push_back({i < 40});
    }
    const double p = pass_at_k(base, 1);
    c.expect(fmt::format("{:.4f}", p * 100) == "17.3160" && std::round(p * 10000) == 1732,
             fmt::format("40 of 231 gives {:.6f}", p));
    if (c.ok) c.detail = fmt::format("200 random matrices; 40/231 = {:.2f}%", p * 100);
    return c;
}

PipelineConfig scripted_config(const fs::path& ws, int trials) {
    json cases = json::array();
    const std::vector<std::string> names = {"First round", "Third round", "Never"};
    for (std::size_t i = 0; i < names.size(); ++i)
        cases.push_back({{"case_id", "tc_s" + std::to_string(i)},
                         {"name", names[i]},
                         {"steps", {"The client sends a frame"}},
                         {"assertions", {"The server echoes it"}},
                         {"doc_id", i < 2 ? "doc_a" : "doc_b"}});
    text::write_json(ws / "cases.json", cases);
    json j = {{"cases", "cases.json"},
              {"backend", {{"kind", "live"}}},
              {"sandbox", {{"timeout_ms", 5000}, {"grace_ms", 500}, {"ports", "20600-20615"}}},
              {"synthesis", {{"language", "POSIX shell"}, {"extension", ".sh"}, {"long_running_gap_ms", 50}}},
              {"experiment", {{"s_max", {1, 2, 3, 4, 5, 6}}, {"k", {1, 2}}}},
              {"trials", trials}};
    auto cfg = PipelineConfig::from_json(j, ws);
    cfg.workspace = ws / "ws";
    cfg.store_dir = ws / "ws" / "store";
    return cfg;
}

Check ablation_degeneracies() {
    Check c;
    auto ws = scratch("ablation");
    auto cfg = scripted_config(ws, 2);
    testing::AgentScript script;
    script.pass_round = {{"First round", 1}, {"Third round", 3}, {"Never", 0}};
    Pipeline p(cfg);
    p.set_backend_factory([script](int) { return std::make_shared<llm::MockBackend>(testing::scripted_agent(script)); });

    c.expect(p.run_arm(arm_settings("no_refine", cfg.refine)) == 0, "no_refine arm failed");
    const auto no_refine = text::read_json(p.arm_dir("no_refine") / "report.json");
    for (const auto& r : no_refine["reports"])
        c.expect(r["iterations_used"] == 1, "no_refine case used more than one round");
    c.expect(no_refine["generation_rounds"] == 6, "no_refine total rounds != cases x trials");

    c.expect(p.run_arm(arm_settings("baseline", cfg.refine)) == 0, "baseline arm failed");
    c.expect(p.run_experiment() == 0, "experiment failed");
    const auto base = text::read_json(p.arm_dir("baseline") / "report.json");
    const auto grid = text::read_json(p.arm_dir("experiment") / "tables" / "experiment.json");
    int rows = 0;
    for (const auto& cell : grid["grid"]) {
        if (cell["s_max"] != 1) continue;
        const auto k = std::to_string(cell["k"].get<int>());
        c.expect(cell["pass_at_k"].get<double>() == base["pass_at_k"][k].get<double>(),
                 "S_max = 1 differs from the baseline at k = " + k);
        ++rows;
    }
    c.expect(rows == 2, "S_max = 1 row incomplete");
    if (c.ok) c.detail = "1 round per case without refinement; S_max = 1 row equals baseline for k = 1, 2";
    return c;
}

Check replay_determinism() {
    Check c;
    const auto golden = text::read_file(testing::mini_corpus_dir() / "golden_report.json");
    for (int run = 0; run < 2; ++run) {
        auto ws = scratch("replay" + std::to_string(run));
        auto cfg = PipelineConfig::load(testing::mini_corpus_dir() / "config.json");
        cfg.workspace = ws;
        cfg.store_dir = ws / "store";
        Pipeline p(cfg);
        p.build_index();
        c.expect(p.run_arm(arm_settings("full", cfg.refine)) == 0, fmt::format("run {} failed", run));
        c.expect(text::read_file(p.arm_dir("full") / "report.json") == golden,
                 fmt::format("run {} differs from the golden report", run));
    }
    if (c.ok) c.detail = "two replayed runs byte-identical to the golden report";
    return c;
}

bool process_gone(pid_t pid) {
    std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
    if (!stat) return true;
    std::string line;
    std::getline(stat, line);
    const auto close = line.rfind(')');
    return close != std::string::npos && close + 2 < line.size() && (line[close + 2] == 'Z' || line[close + 2] == 'X');
}

Check runner_supervision() {
    Check c;
    SandboxConfig sb;
    sb.timeout_ms = 1500;
    sb.grace_ms = 500;

    auto ws = scratch("order");
    Blueprint bp;
    bp.case_id = "tc_order";
    text::write_file(ws / "server.sh", "#!/bin/sh\nsleep 60 &\necho $! > bg_server.pid\ntrap 'exit 0' TERM\n"
                                       "while :; do sleep 0.05; done\n");
    bp.entries.push_back({"server.sh", "server", 0, true});
    for (int i = 0; i < 3; ++i) {
        const auto name = fmt::format("client{}.sh", i);
        text::write_file(ws / name, fmt::format("#!/bin/sh\nsleep 60 &\necho $! > bg_{}.pid\nsleep 0.1\n", i));
        bp.entries.push_back({name, "client", 50 * i, false});
    }
    const auto fb = execute(bp, ws, sb);
    c.expect(fb.status == RunStatus::clean, "ordered run not clean: " + std::string(to_string(fb.status)));
    for (std::size_t i = 1; i < fb.processes.size(); ++i)
        c.expect(fb.processes[i].start_ms >= fb.processes[i - 1].start_ms, "start times decrease");
    for (const auto* tag : {"server", "0", "1", "2"}) {
        const auto pid_file = ws / fmt::format("bg_{}.pid", tag);
        c.expect(fs::exists(pid_file) && process_gone(std::stoi(text::trim(text::read_file(pid_file)))),
                 fmt::format("background child of {} survived", tag));
    }

    auto tws = scratch("timeout");
    text::write_file(tws / "stuck.sh", "#!/bin/sh\ntrap '' TERM\nwhile :; do sleep 0.05; done\n");
    Blueprint slow;
    slow.case_id = "tc_timeout";
    slow.entries.push_back({"stuck.sh", "client", 0, false});
    const auto t0 = Clock::now();
    const auto tfb = execute(slow, tws, sb);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
    c.expect(tfb.status == RunStatus::timeout, "stuck client not reported as timeout");
    c.expect(ms <= sb.timeout_ms + sb.grace_ms + 1000, fmt::format("kill took {} ms", ms));
    if (c.ok) c.detail = fmt::format("order kept, no orphans, SIGTERM-immune client gone after {} ms (bound {})", ms,
                                     sb.timeout_ms + sb.grace_ms + 1000);
    return c;
}

} // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Check()>>> criteria = {
        {"coverage oracle", coverage_oracle},
        {"coverage hand case", coverage_hand_case},
        {"retrieval oracle", retrieval_oracle},
        {"refinement loop contract", refine_contract},
        {"pass@k properties", pass_at_k_properties},
        {"ablation degeneracies", ablation_degeneracies},
        {"replay determinism", replay_determinism},
        {"runner supervision", runner_supervision},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        Check c;
        try {
            c = run();
        } catch (const std::exception& e) {
            c.ok = false;
            c.detail = std::string("exception: ") + e.what();
        }
        if (!c.ok) ++failed;
        std::cout << fmt::format("{} {:<26} {}\n", c.ok ? "PASS" : "FAIL", name, c.detail) << std::flush;
    }
    return failed == 0 ? 0 : 1;
}
