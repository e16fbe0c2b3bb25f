#include "rfcprobe/llm_gateway.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "http.hpp"
#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe::llm {

std::string_view to_string(Role role) {
    switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    }
    return "user";
}

Role role_from_string(std::string_view s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    throw ConfigError(fmt::format("unknown role '{}'", s));
}

std::string_view to_string(BackendKind kind) {
    switch (kind) {
    case BackendKind::live: return "live";
    case BackendKind::mock: return "mock";
    case BackendKind::replay: return "replay";
    case BackendKind::record: return "record";
    }
    return "mock";
}

std::size_t estimate_tokens(std::string_view s) {
    std::size_t code_points = 0;
    for (unsigned char c : s) {
        if ((c & 0xC0) != 0x80) ++code_points;
    }
    return (code_points + 3) / 4;
}

Transcript& Transcript::system(std::string content) {
    push(Role::system, std::move(content));
    return *this;
}

Transcript& Transcript::user(std::string content) {
    push(Role::user, std::move(content));
    return *this;
}

Transcript& Transcript::assistant(std::string content) {
    push(Role::assistant, std::move(content));
    return *this;
}

void Transcript::push(Role role, std::string content) {
    if (role == Role::system) {
        if (!messages_.empty()) throw ConfigError("system message must lead the transcript");
    } else {
        const bool after_system = messages_.empty() || messages_.back().role == Role::system;
        const Role expected = after_system ? Role::user
                              : messages_.back().role == Role::user ? Role::assistant
                                                                    : Role::user;
        if (role != expected) {
            throw ConfigError(fmt::format("transcript out of turn: expected {} message", to_string(expected)));
        }
    }
    messages_.push_back({role, std::move(content)});
}

bool Transcript::ends_with_user() const noexcept {
    return !messages_.empty() && messages_.back().role == Role::user;
}

std::size_t Transcript::token_estimate() const {
    std::size_t total = 0;
    for (const auto& m : messages_) total += estimate_tokens(m.content);
    return total;
}

std::string Transcript::hash() const {
    std::string canonical;
    for (const auto& m : messages_) {
        canonical += to_string(m.role);
        canonical += '\x1f';
        canonical += text::trim(m.content);
        canonical += '\x1e';
    }
    return text::sha256_hex(canonical);
}

nlohmann::json Transcript::to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& m : messages_) arr.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    return arr;
}

Transcript Transcript::from_json(const nlohmann::json& j) {
    Transcript t;
    for (const auto& m : j) t.push(role_from_string(m.at("role").get<std::string>()), m.at("content").get<std::string>());
    return t;
}

void SamplingParams::validate() const {
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
    if (max_output_tokens <= 0) throw ConfigError("max_output_tokens must be positive");
}

std::string ChatBackend::complete(const Transcript& transcript) {
    if (!transcript.ends_with_user()) throw Error("transcript must end with a user message");
    const auto estimate = transcript.token_estimate();
    if (estimate > context_limit_) {
        spdlog::warn("transcript estimate {} tokens exceeds context limit {} for {}", estimate, context_limit_, id());
    }
    {
        std::lock_guard lock(mu_);
        ++calls_;
    }
    auto reply = do_complete(transcript);

    std::lock_guard lock(mu_);
    if (exchange_log_) {
        nlohmann::json line = {{"transcript_hash", transcript.hash()},
                               {"messages", transcript.to_json()},
                               {"reply", reply}};
        std::ofstream out(*exchange_log_, std::ios::app);
        out << line.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
    }
    return reply;
}

void ChatBackend::set_sampling(const SamplingParams& params) {
    params.validate();
    sampling_ = params;
}

std::size_t ChatBackend::call_count() const {
    std::lock_guard lock(mu_);
    return calls_;
}

void ChatBackend::set_exchange_log(std::filesystem::path path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::lock_guard lock(mu_);
    exchange_log_ = std::move(path);
}

MockBackend::MockBackend(std::vector<std::string> script) : script_(std::move(script)) {}

MockBackend::MockBackend(Responder responder, std::string name)
    : responder_(std::move(responder)), name_(std::move(name)) {}

std::vector<Transcript> MockBackend::received() const {
    std::lock_guard lock(mu_);
    return received_;
}

std::string MockBackend::do_complete(const Transcript& transcript) {
    std::lock_guard lock(mu_);
    received_.push_back(transcript);
    if (responder_) return responder_(transcript);
    if (next_ >= script_.size()) throw BackendError("mock script exhausted");
    return script_[next_++];
}

nlohmann::json build_request(const Transcript& transcript, const SamplingParams& sampling, std::string_view model) {
    return {{"model", model},
            {"messages", transcript.to_json()},
            {"temperature", sampling.temperature},
            {"top_p", sampling.top_p},
            {"max_tokens", sampling.max_output_tokens}};
}

ReplayBackend::ReplayBackend(std::filesystem::path cache_dir) : dir_(std::move(cache_dir)) {
    if (!std::filesystem::is_directory(dir_)) throw ConfigError("replay cache directory not found: " + dir_.string());
}

std::optional<CacheEntry> ReplayBackend::lookup(const Transcript& transcript) const {
    const auto h = transcript.hash();
    const auto path = dir_ / (h + ".json");
    if (!std::filesystem::exists(path)) return std::nullopt;
    auto j = text::read_json(path);
    return CacheEntry{j.at("transcript_hash").get<std::string>(), j.at("request"), j.at("reply").get<std::string>()};
}

std::string ReplayBackend::do_complete(const Transcript& transcript) {
    auto entry = lookup(transcript);
    if (!entry) throw UnrecordedExchange(transcript.hash());
    return entry->reply;
}

RecordBackend::RecordBackend(std::shared_ptr<ChatBackend> inner, std::filesystem::path cache_dir)
    : inner_(std::move(inner)), dir_(std::move(cache_dir)) {
    if (!inner_) throw ConfigError("record backend needs an inner backend");
    std::filesystem::create_directories(dir_);
    set_sampling(inner_->sampling());
}

std::string RecordBackend::do_complete(const Transcript& transcript) {
    auto reply = inner_->complete(transcript);
    const auto h = transcript.hash();
    nlohmann::json entry = {{"transcript_hash", h},
                            {"request", build_request(transcript, sampling(), inner_->id())},
                            {"reply", reply}};
    std::lock_guard lock(write_mu_);
    text::write_json(dir_ / (h + ".json"), entry);
    return reply;
}

LiveConfig LiveConfig::from_env(LiveConfig base) {
    auto env = [](const char* name) -> std::optional<std::string> {
        const char* v = std::getenv(name);
        if (v == nullptr || *v == '\0') return std::nullopt;
        return std::string(v);
    };
    if (auto v = env("RFCPROBE_LLM_ENDPOINT")) base.endpoint = *v;
    else if (auto v2 = env("OPENAI_BASE_URL")) base.endpoint = *v2;
    if (auto v = env("RFCPROBE_LLM_API_KEY")) base.api_key = *v;
    else if (auto v2 = env("OPENAI_API_KEY")) base.api_key = *v2;
    if (auto v = env("RFCPROBE_LLM_MODEL")) base.model = *v;
    return base;
}

LiveBackend::LiveBackend(LiveConfig config)
    : config_(std::move(config)), in_flight_(std::clamp(config_.max_in_flight, 1, 1024)) {
    if (config_.max_in_flight < 1 || config_.max_in_flight > 1024) {
        throw ConfigError("max_in_flight must be in [1, 1024]");
    }
}

std::string LiveBackend::do_complete(const Transcript& transcript) {
    const auto body = build_request(transcript, sampling(), config_.model).dump();
    std::map<std::string, std::string> headers;
    if (!config_.api_key.empty()) headers["Authorization"] = "Bearer " + config_.api_key;

    http::Response res;
    {
        in_flight_.acquire();
        struct Release {
            std::counting_semaphore<1024>& sem;
            ~Release() { sem.release(); }
        } release{in_flight_};
        res = http::post_json(config_.endpoint, "/chat/completions", headers, body, config_.timeout_seconds);
    }

    if (res.status < 200 || res.status >= 300) {
        throw BackendError(fmt::format("chat endpoint returned HTTP {}: {}", res.status, text::tail_truncate(res.body, 500)),
                           res.status, res.retry_after_seconds);
    }
    try {
        auto j = nlohmann::json::parse(res.body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(fmt::format("malformed chat response: {}", e.what()), res.status);
    }
}

} // namespace rfcprobe::llm
