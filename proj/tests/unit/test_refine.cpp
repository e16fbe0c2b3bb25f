#include "doctest.h"

#include <mutex>

#include "rfcprobe/error.hpp"
#include "rfcprobe/refine.hpp"
#include "rfcprobe/text.hpp"
#include "scripted_agent.hpp"

using namespace rfcprobe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / ("rfcprobe_refine_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

TestCase observe_case() {
    TestCase tc;
    tc.case_id = "tc_observe";
    tc.name = "Observe registration";
    tc.preconditions = {"A server hosts /obs"};
    tc.steps = {"The client sends GET /obs with Observe 0", "The server answers with an Observe option"};
    tc.assertions = {"The response carries the Observe option"};
    return tc;
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + needle.size())) ++n;
    return n;
}

std::vector<IterationRecord> records(int n) {
    std::vector<IterationRecord> out;
    for (int i = 0; i < n; ++i) {
        IterationRecord r;
        r.index = i;
        r.retrieved = "ctx-" + std::to_string(i);
        r.output = "out-" + std::to_string(i);
        r.feedback = "fb-" + std::to_string(i);
        r.status = RunStatus::process_error;
        out.push_back(r);
    }
    return out;
}

// Passes on attempt pass-1 (0-based), never when pass is 0.
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

class CapturingEmbedder : public Embedder {
public:
    std::string id() const override { return inner_.id(); }
    std::size_t dimension() const override { return inner_.dimension(); }
    std::vector<double> embed(std::string_view text) const override {
        std::lock_guard lock(mu_);
        seen_.emplace_back(text);
        return inner_.embed(text);
    }
    std::vector<std::string> seen() const {
        std::lock_guard lock(mu_);
        return seen_;
    }
    void clear() {
        std::lock_guard lock(mu_);
        seen_.clear();
    }

private:
    LocalEmbedder inner_;
    mutable std::mutex mu_;
    mutable std::vector<std::string> seen_;
};

Retriever small_store(const std::string& name, std::shared_ptr<CapturingEmbedder> emb) {
    auto lib = scratch(name + "_lib");
    text::write_file(lib / "observe.py", "def register_observer(port):\n    return send_get('/obs', observe=0)\n");
    text::write_file(lib / "examples" / "client.py", "import socket\nPORT = int(os.environ['PORT'])\n");
    auto store = std::make_shared<MemoryStore>(scratch(name + "_store"));
    store->index_library(lib, *emb);
    emb->clear();
    return Retriever(store, emb, 2);
}

} // namespace

TEST_CASE("debug prompt window") {
    const std::string p = "INITIAL", pd = "DEBUG-TEMPLATE";
    SUBCASE("12 records, window 10") {
        auto prompt = build_debug_prompt(records(12), 10, p, "CASE", pd, "NEXT");
        CHECK(count_of(prompt, "[iteration ") == 10);
        CHECK(prompt.find("[iteration 0]") == std::string::npos);
        CHECK(prompt.find("[iteration 1]") == std::string::npos);
        for (int i = 2; i < 12; ++i) CHECK(prompt.find("[iteration " + std::to_string(i) + "]") != std::string::npos);
        CHECK(prompt.find("out-1\n") == std::string::npos);
        CHECK(count_of(prompt, pd) == 10);
    }
    SUBCASE("window at least the history keeps every record") {
        for (int len = 1; len <= 8; ++len) {
            auto prompt = build_debug_prompt(records(len), 8, p, "CASE", pd, "NEXT");
            CHECK(count_of(prompt, "[iteration ") == static_cast<std::size_t>(len));
            CHECK(count_of(prompt, pd) == static_cast<std::size_t>(len));
        }
    }
    SUBCASE("template count is min(m, len) over a grid") {
        for (int m = 1; m <= 12; ++m)
            for (int len = 1; len <= 12; ++len) {
                auto prompt = build_debug_prompt(records(len), m, p, "CASE", pd, "NEXT");
                CHECK(count_of(prompt, pd) == static_cast<std::size_t>(std::min(m, len)));
            }
    }
    SUBCASE("layout") {
        auto prompt = build_debug_prompt(records(2), 10, p, "CASE", pd, "NEXT");
        CHECK(prompt.rfind("INITIAL\n\nCASE\n", 0) == 0);
        auto a = prompt.find("ctx-1"), b = prompt.find("out-1"), c = prompt.find("fb-1");
        CHECK(a < b);
        CHECK(b < c);
        CHECK(prompt.find(pd, c) != std::string::npos);
        CHECK(prompt.find("[iteration 0]") < prompt.find("[iteration 1]"));
        CHECK(prompt.substr(prompt.size() - 5) == "NEXT\n");
    }
}

TEST_CASE("generation rounds follow the first clean run") {
    for (int j = 1; j <= 6; ++j) {
        CAPTURE(j);
        testing::AgentScript script;
        script.default_pass_round = 0;
        llm::MockBackend m(testing::scripted_agent(script));
        auto plat = platform_passing_at(j);
        auto out = refine_loop(observe_case(), Retriever{}, m, plat, RefineConfig{}, testing::shell_synthesis());
        CHECK(out.status == RefineStatus::executable);
        CHECK(out.iterations_used == j);
        CHECK(out.history.size() == static_cast<std::size_t>(j));
        CHECK(debug_prompts(m) == static_cast<std::size_t>(j - 1));
        // decomposition, two programs and ordering, then one call per debug round
        CHECK(m.call_count() == static_cast<std::size_t>(4 + j - 1));
        CHECK(out.history.back().status == RunStatus::clean);
        REQUIRE(out.final_artifact);
    }
}

TEST_CASE("never passing exhausts the budget") {
    testing::AgentScript script;
    script.default_pass_round = 0;
    llm::MockBackend m(testing::scripted_agent(script));
    auto plat = platform_passing_at(0);
    RefineConfig cfg;
    cfg.window = 3;
    auto out = refine_loop(observe_case(), Retriever{}, m, plat, cfg, testing::shell_synthesis());
    CHECK(out.status == RefineStatus::exhausted);
    CHECK(out.iterations_used == 6);
    CHECK(out.history.size() == 6);
    CHECK(out.error.empty());
    CHECK(debug_prompts(m) == 5);
    for (std::size_t i = 0; i < out.history.size(); ++i) CHECK(out.history[i].index == static_cast<int>(i));
    for (const auto& t : m.received()) {
        const auto& last = t.messages().back().content;
        if (testing::newest_iteration(last) < 0) continue;
        CHECK(count_of(last, "[iteration ") <= 3);
        CHECK(count_of(last, cfg.debug_prompt) <= 3);
    }
}

TEST_CASE("a single step is the one-shot baseline") {
    testing::AgentScript script;
    script.default_pass_round = 0;
    llm::MockBackend m(testing::scripted_agent(script));
    auto plat = platform_passing_at(0);
    RefineConfig cfg;
    cfg.max_steps = 1;
    auto out = refine_loop(observe_case(), Retriever{}, m, plat, cfg, testing::shell_synthesis());
    CHECK(out.status == RefineStatus::exhausted);
    CHECK(out.iterations_used == 1);
    CHECK(debug_prompts(m) == 0);
    CHECK(m.call_count() == 4);
}

TEST_CASE("loop is prefix stable across budgets") {
    auto run = [](int n) {
        testing::AgentScript script;
        script.default_pass_round = 0;
        llm::MockBackend m(testing::scripted_agent(script));
        auto plat = platform_passing_at(0);
        RefineConfig cfg;
        cfg.max_steps = n;
        return refine_loop(observe_case(), Retriever{}, m, plat, cfg, testing::shell_synthesis());
    };
    auto a = run(3), b = run(6);
    REQUIRE(a.history.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.history[i].output == b.history[i].output);
        CHECK(a.history[i].feedback == b.history[i].feedback);
        CHECK(a.history[i].retrieved == b.history[i].retrieved);
    }
}

TEST_CASE("retrieval queries") {
    auto emb = std::make_shared<CapturingEmbedder>();
    auto retriever = small_store("queries", emb);
    testing::AgentScript script;
    script.default_pass_round = 2;
    llm::MockBackend m(testing::scripted_agent(script));
    auto plat = platform_passing_at(2);
    RefineConfig cfg;
    auto tc = observe_case();
    auto out = refine_loop(tc, retriever, m, plat, cfg, testing::shell_synthesis());
    REQUIRE(out.status == RefineStatus::executable);
    auto seen = emb->seen();
    REQUIRE(seen.size() == 2);
    CHECK(seen[0] == cfg.initial_prompt + "\n\n" + render_case(tc));
    CHECK(seen[1] == cfg.debug_prompt + "\n\n" + out.history[0].feedback);
    CHECK_FALSE(out.history[0].retrieved.empty());
    CHECK(out.history[0].retrieved == render_context(retriever.retrieve(seen[0])));
    // the round-1 context reaches the subprogram prompts
    bool in_prompt = false;
    for (const auto& t : m.received())
        if (t.messages().back().content.find(out.history[0].retrieved) != std::string::npos) in_prompt = true;
    CHECK(in_prompt);
}

TEST_CASE("frozen store retrieves nothing and synthesis still runs") {
    auto emb = std::make_shared<CapturingEmbedder>();
    auto retriever = small_store("frozen", emb).frozen_copy();
    testing::AgentScript script;
    llm::MockBackend m(testing::scripted_agent(script));
    auto plat = platform_passing_at(1);
    auto out = refine_loop(observe_case(), retriever, m, plat, RefineConfig{}, testing::shell_synthesis());
    CHECK(out.status == RefineStatus::executable);
    CHECK(out.history[0].retrieved.empty());
    CHECK(emb->seen().empty());
}

TEST_CASE("unusable synthesis becomes launch-failure feedback") {
    int calls = 0;
    llm::MockBackend m([&](const llm::Transcript& t) -> std::string {
        ++calls;
        if (testing::newest_iteration(t.messages().back().content) >= 0)
            return "### file: sub_0_client.sh\n```sh\nexit 0\n```\n";
        return "no idea";
    });
    auto plat = platform_passing_at(1);
    RefineConfig cfg;
    cfg.max_steps = 3;
    auto out = refine_loop(observe_case(), Retriever{}, m, plat, cfg, testing::shell_synthesis());
    REQUIRE(out.history.size() >= 1);
    CHECK(out.history[0].status == RunStatus::launch_failure);
    CHECK(out.history[0].feedback.find("synthesis failed") != std::string::npos);
    CHECK(out.history[0].output == "no idea");
    CHECK(out.iterations_used <= 3);
}

TEST_CASE("backend failure ends the loop without extending the budget") {
    testing::AgentScript script;
    script.default_pass_round = 0;
    auto agent = testing::scripted_agent(script);
    llm::MockBackend m([&](const llm::Transcript& t) -> std::string {
        if (testing::newest_iteration(t.messages().back().content) >= 1) throw BackendError("HTTP 503", 503);
        return agent(t);
    });
    auto plat = platform_passing_at(0);
    auto out = refine_loop(observe_case(), Retriever{}, m, plat, RefineConfig{}, testing::shell_synthesis());
    CHECK(out.status == RefineStatus::exhausted);
    CHECK(out.history.size() == 2);
    CHECK(out.iterations_used == 2);
    CHECK(out.error.find("503") != std::string::npos);

    llm::MockBackend dead([](const llm::Transcript&) -> std::string { throw BackendError("refused"); });
    auto out2 = refine_loop(observe_case(), Retriever{}, dead, plat, RefineConfig{}, testing::shell_synthesis());
    CHECK(out2.status == RefineStatus::exhausted);
    CHECK(out2.history.empty());
    CHECK(out2.iterations_used == 0);
    CHECK(out2.error == "refused");
}

TEST_CASE("invalid configuration") {
    llm::MockBackend m(std::vector<std::string>{});
    auto plat = platform_passing_at(1);
    RefineConfig cfg;
    cfg.max_steps = 0;
    CHECK_THROWS_AS(refine_loop(observe_case(), Retriever{}, m, plat, cfg, testing::shell_synthesis()), ConfigError);
    cfg = RefineConfig{};
    cfg.window = 0;
    CHECK_THROWS_AS(refine_loop(observe_case(), Retriever{}, m, plat, cfg, testing::shell_synthesis()), ConfigError);
    auto bad = observe_case();
    bad.steps.clear();
    CHECK_THROWS_AS(refine_loop(bad, Retriever{}, m, plat, RefineConfig{}, testing::shell_synthesis()), ConfigError);
}

TEST_CASE("real runs through the sandbox") {
    auto ws = scratch("sandbox");
    testing::AgentScript script;
    script.default_pass_round = 3;
    llm::MockBackend m(testing::scripted_agent(script));
    SandboxConfig sb;
    sb.timeout_ms = 5000;
    sb.grace_ms = 500;
    RunnerPlatform plat(ws, sb);
    auto out = refine_loop(observe_case(), Retriever{}, m, plat, RefineConfig{}, testing::shell_synthesis());
    CHECK(out.status == RefineStatus::executable);
    CHECK(out.iterations_used == 3);
    CHECK(out.history[0].status == RunStatus::process_error);
    CHECK(out.history[0].feedback.find("assertion failed") != std::string::npos);
    CHECK(fs::exists(ws / "feedback_0.json"));
    CHECK(fs::exists(ws / "feedback_2.json"));
    CHECK(fs::exists(ws / "sub_0_server.sh"));
    CHECK(text::read_file(ws / "sub_1_client.sh").find("exit 0") != std::string::npos);

    auto back = refine_outcome_from_json(to_json(out));
    CHECK(to_json(back) == to_json(out));
    CHECK(back.final_artifact->subprograms.size() == 2);
}

TEST_CASE("runner platform removes files the new artifact dropped") {
    auto ws = scratch("stale");
    RunnerPlatform plat(ws, SandboxConfig{});
    Artifact a;
    a.subprograms = {{"client", 0, "old.sh", "exit 0\n", false}};
    a.blueprint_json = serialize_blueprint(Blueprint{1, "tc", {{"old.sh", "client", 0, false}}});
    CHECK(plat.test(a, 0).status == RunStatus::clean);
    Artifact b;
    b.subprograms = {{"client", 0, "new.sh", "exit 0\n", false}};
    b.blueprint_json = serialize_blueprint(Blueprint{1, "tc", {{"old.sh", "client", 0, false}}});
    auto fb = plat.test(b, 1);
    CHECK(fb.status == RunStatus::launch_failure);
    CHECK_FALSE(fs::exists(ws / "old.sh"));
    Artifact c = b;
    c.blueprint_json = "{not json";
    CHECK(plat.test(c, 2).status == RunStatus::launch_failure);
    CHECK(fs::exists(ws / "feedback_2.json"));
}

TEST_CASE("replayed loop is byte identical") {
    auto cache = scratch("replay_cache");
    testing::AgentScript script;
    script.default_pass_round = 4;
    auto inner = std::make_shared<llm::MockBackend>(testing::scripted_agent(script));
    llm::RecordBackend rec(inner, cache);
    auto plat = platform_passing_at(4);
    auto first = refine_loop(observe_case(), Retriever{}, rec, plat, RefineConfig{}, testing::shell_synthesis());
    llm::ReplayBackend replay(cache);
    auto second = refine_loop(observe_case(), Retriever{}, replay, plat, RefineConfig{}, testing::shell_synthesis());
    CHECK(to_json(first).dump() == to_json(second).dump());
    CHECK(second.iterations_used == 4);
}
