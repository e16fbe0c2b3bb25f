#include "doctest.h"

#include <atomic>
#include <random>
#include <thread>

#include "httplib.h"
#include "rfcprobe/error.hpp"
#include "rfcprobe/llm_gateway.hpp"
#include "rfcprobe/text.hpp"

using namespace rfcprobe;
using namespace rfcprobe::llm;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("rfcprobe_llm_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

Transcript ask(const std::string& q) {
    Transcript t;
    t.system("You are terse.").user(q);
    return t;
}

// Local OpenAI-compatible endpoint on an ephemeral port.
struct FakeEndpoint {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::atomic<int> hits{0};
    std::atomic<int> concurrent{0};
    std::atomic<int> peak{0};
    nlohmann::json last_request;
    std::mutex mu;

    explicit FakeEndpoint(int status = 200) {
        server.Post("/v1/chat/completions", [this, status](const httplib::Request& req, httplib::Response& res) {
            int now = ++concurrent;
            int prev = peak.load();
            while (now > prev && !peak.compare_exchange_weak(prev, now)) {
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(30));
            ++hits;
            {
                std::lock_guard lock(mu);
                last_request = nlohmann::json::parse(req.body);
                last_request["auth"] = req.get_header_value("Authorization");
            }
            --concurrent;
            if (status != 200) {
                res.status = status;
                res.set_header("Retry-After", "7");
                res.set_content("{\"error\":\"slow down\"}", "application/json");
                return;
            }
            nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "pong"}}}}}}};
            res.set_content(reply.dump(), "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~FakeEndpoint() {
        server.stop();
        thread.join();
    }
    std::string base() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1"; }
};

}  // namespace

TEST_CASE("estimate_tokens") {
    CHECK(estimate_tokens("") == 0);
    CHECK(estimate_tokens("12345678") == 2);
    CHECK(estimate_tokens("123456789") == 3);
    CHECK(estimate_tokens("\xc3\xa9\xc3\xa9\xc3\xa9\xc3\xa9") == 1);  // four code points

    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> len(0, 300);
    std::uniform_int_distribution<int> ch(32, 126);
    for (int i = 0; i < 500; ++i) {
        std::string a(static_cast<std::size_t>(len(rng)), ' ');
        std::string b(static_cast<std::size_t>(len(rng)), ' ');
        for (auto& c : a) c = static_cast<char>(ch(rng));
        for (auto& c : b) c = static_cast<char>(ch(rng));
        CHECK(estimate_tokens(a + b) >= std::max(estimate_tokens(a), estimate_tokens(b)));
    }
}

TEST_CASE("transcript role alternation") {
    Transcript t;
    t.system("s").user("u").assistant("a").user("u2");
    CHECK(t.ends_with_user());
    CHECK_THROWS_AS(Transcript().assistant("a"), ConfigError);
    CHECK_THROWS_AS(Transcript().user("u").user("u"), ConfigError);
    CHECK_THROWS_AS(Transcript().user("u").system("s"), ConfigError);
    auto round = Transcript::from_json(t.to_json());
    CHECK(round.hash() == t.hash());
}

TEST_CASE("transcript hash ignores edge whitespace only") {
    CHECK(ask("hello").hash() == ask("  hello\n").hash());
    CHECK(ask("hello").hash() != ask("hel lo").hash());
    CHECK(ask("hello").hash() != Transcript().user("hello").hash());
}

TEST_CASE("sampling defaults and validation") {
    SamplingParams p;
    CHECK(p.temperature == 0.0);
    CHECK(p.top_p == 0.1);
    MockBackend m(std::vector<std::string>{});
    CHECK_THROWS_AS(m.set_sampling({-1.0, 0.5, 10}), ConfigError);
    CHECK_THROWS_AS(m.set_sampling({0.0, 0.0, 10}), ConfigError);
    CHECK_THROWS_AS(m.set_sampling({0.0, 1.5, 10}), ConfigError);
    CHECK_THROWS_AS(m.set_sampling({0.0, 0.5, 0}), ConfigError);
}

TEST_CASE("mock backend returns its script in order") {
    MockBackend m({"A", "B"});
    CHECK(m.complete(ask("1")) == "A");
    CHECK(m.complete(ask("2")) == "B");
    CHECK_THROWS_AS(m.complete(ask("3")), BackendError);
    CHECK(m.call_count() == 3);
    CHECK(m.received().size() == 3);
}

TEST_CASE("complete requires a trailing user message") {
    MockBackend m({"A"});
    Transcript t;
    t.user("q").assistant("a");
    CHECK_THROWS_AS(m.complete(t), Error);
}

TEST_CASE("record then replay") {
    auto dir = fresh_dir("cache");
    auto inner = std::make_shared<MockBackend>(std::vector<std::string>{"recorded reply"});
    RecordBackend rec(inner, dir);
    CHECK(rec.complete(ask("ping")) == "recorded reply");

    ReplayBackend replay(dir);
    SUBCASE("same transcript replays the reply") {
        CHECK(replay.complete(ask("ping")) == "recorded reply");
        auto entry = replay.lookup(ask("ping"));
        REQUIRE(entry);
        CHECK(entry->request["temperature"] == 0.0);
        CHECK(entry->request["top_p"] == 0.1);
        CHECK(entry->request["messages"].size() == 2);
    }
    SUBCASE("altered prompt is an unrecorded exchange") {
        CHECK_THROWS_AS(replay.complete(ask("ping!")), UnrecordedExchange);
    }
    SUBCASE("replay is deterministic") {
        for (int i = 0; i < 5; ++i) CHECK(replay.complete(ask("ping")) == "recorded reply");
    }
    CHECK_THROWS_AS(ReplayBackend(dir / "missing"), ConfigError);
}

TEST_CASE("exchange log captures every call") {
    auto dir = fresh_dir("log");
    MockBackend m({"x", "y"});
    m.set_exchange_log(dir / "exchanges.jsonl");
    m.complete(ask("a"));
    m.complete(ask("b"));
    auto lines = text::split_lines(text::read_file(dir / "exchanges.jsonl"));
    REQUIRE(lines.size() == 2);
    CHECK(nlohmann::json::parse(lines[1])["reply"] == "y");
}

TEST_CASE("live backend speaks OpenAI chat completions") {
    FakeEndpoint ep;
    LiveConfig cfg;
    cfg.endpoint = ep.base();
    cfg.api_key = "sk-test";
    cfg.model = "test-model";
    LiveBackend live(cfg);
    CHECK(live.complete(ask("ping")) == "pong");
    std::lock_guard lock(ep.mu);
    CHECK(ep.last_request["model"] == "test-model");
    CHECK(ep.last_request["temperature"] == 0.0);
    CHECK(ep.last_request["top_p"] == 0.1);
    CHECK(ep.last_request["messages"][1]["content"] == "ping");
    CHECK(ep.last_request["auth"] == "Bearer sk-test");
}

TEST_CASE("live backend surfaces HTTP errors with retry-after") {
    FakeEndpoint ep(429);
    LiveConfig cfg;
    cfg.endpoint = ep.base();
    LiveBackend live(cfg);
    try {
        live.complete(ask("ping"));
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(e.http_status() == 429);
        REQUIRE(e.retry_after_seconds());
        CHECK(*e.retry_after_seconds() == 7.0);
    }
}

TEST_CASE("live backend transport failure") {
    LiveConfig cfg;
    cfg.endpoint = "http://127.0.0.1:1/v1";
    cfg.timeout_seconds = 2;
    LiveBackend live(cfg);
    CHECK_THROWS_AS(live.complete(ask("ping")), BackendError);
    cfg.endpoint = "not a url";
    LiveBackend bad(cfg);
    CHECK_THROWS_AS(bad.complete(ask("ping")), ConfigError);
}

TEST_CASE("live backend caps requests in flight") {
    FakeEndpoint ep;
    LiveConfig cfg;
    cfg.endpoint = ep.base();
    cfg.max_in_flight = 2;
    LiveBackend live(cfg);
    std::vector<std::thread> workers;
    for (int i = 0; i < 6; ++i) workers.emplace_back([&] { live.complete(ask("ping")); });
    for (auto& w : workers) w.join();
    CHECK(ep.hits == 6);
    CHECK(ep.peak <= 2);
}

TEST_CASE("record wrapping live persists the exchange") {
    FakeEndpoint ep;
    LiveConfig cfg;
    cfg.endpoint = ep.base();
    auto dir = fresh_dir("live_record");
    RecordBackend rec(std::make_shared<LiveBackend>(cfg), dir);
    CHECK(rec.complete(ask("ping")) == "pong");
    ReplayBackend replay(dir);
    CHECK(replay.complete(ask("ping")) == "pong");
    CHECK(ep.hits == 1);
}

TEST_CASE("live config from environment") {
    setenv("RFCPROBE_LLM_ENDPOINT", "http://localhost:9/v1", 1);
    setenv("RFCPROBE_LLM_MODEL", "qwen", 1);
    setenv("RFCPROBE_LLM_API_KEY", "k", 1);
    auto cfg = LiveConfig::from_env(LiveConfig{});
    CHECK(cfg.endpoint == "http://localhost:9/v1");
    CHECK(cfg.model == "qwen");
    CHECK(cfg.api_key == "k");
    unsetenv("RFCPROBE_LLM_ENDPOINT");
    unsetenv("RFCPROBE_LLM_MODEL");
    unsetenv("RFCPROBE_LLM_API_KEY");
}
