#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace rfcprobe::llm {

enum class Role { system, user, assistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view s);

struct Message {
    Role role;
    std::string content;
};

/// Ceil of UTF-8 code points / 4. Only used for context-limit warnings.
std::size_t estimate_tokens(std::string_view text);

/// Chat history. Roles alternate user/assistant after an optional leading
/// system message; appending out of turn throws ConfigError.
class Transcript {
public:
    Transcript& system(std::string content);
    Transcript& user(std::string content);
    Transcript& assistant(std::string content);

    const std::vector<Message>& messages() const noexcept { return messages_; }
    bool ends_with_user() const noexcept;
    std::size_t token_estimate() const;

    /// SHA-256 over the role/content sequence; whitespace at message edges
    /// does not affect it.
    std::string hash() const;

    nlohmann::json to_json() const;
    static Transcript from_json(const nlohmann::json& j);

private:
    void push(Role role, std::string content);

    std::vector<Message> messages_;
};

struct SamplingParams {
    double temperature = 0.0;
    double top_p = 0.1;
    int max_output_tokens = 4096;

    void validate() const;
};

enum class BackendKind { live, mock, replay, record };

std::string_view to_string(BackendKind kind);

/// One chat-completion endpoint. complete() checks the transcript, counts the
/// call, appends to the exchange log when one is set, and forwards to
/// do_complete(). Implementations are safe to share across threads.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;

    std::string complete(const Transcript& transcript);

    virtual BackendKind kind() const = 0;
    virtual std::string id() const = 0;

    const SamplingParams& sampling() const noexcept { return sampling_; }
    void set_sampling(const SamplingParams& params);

    std::size_t context_limit_tokens() const noexcept { return context_limit_; }
    void set_context_limit_tokens(std::size_t limit) noexcept { context_limit_ = limit; }

    std::size_t call_count() const;

    /// Appends {transcript_hash, messages, reply} lines to a JSONL file.
    void set_exchange_log(std::filesystem::path path);

protected:
    virtual std::string do_complete(const Transcript& transcript) = 0;

private:
    SamplingParams sampling_;
    std::size_t context_limit_ = 128000;
    mutable std::mutex mu_;
    std::size_t calls_ = 0;
    std::optional<std::filesystem::path> exchange_log_;
};

/// Scripted backend for tests. Either replays a fixed list of replies in
/// order or delegates to a responder function. Every transcript it receives is
/// kept for inspection.
class MockBackend : public ChatBackend {
public:
    using Responder = std::function<std::string(const Transcript&)>;

    explicit MockBackend(std::vector<std::string> script);
    explicit MockBackend(Responder responder, std::string name = "mock");

    BackendKind kind() const override { return BackendKind::mock; }
    std::string id() const override { return name_; }

    std::vector<Transcript> received() const;

protected:
    std::string do_complete(const Transcript& transcript) override;

private:
    std::vector<std::string> script_;
    std::size_t next_ = 0;
    Responder responder_;
    std::string name_ = "mock";
    mutable std::mutex mu_;
    std::vector<Transcript> received_;
};

/// One cache file per exchange: <dir>/<transcript_hash>.json holding
/// {transcript_hash, request, reply}.
struct CacheEntry {
    std::string transcript_hash;
    nlohmann::json request;
    std::string reply;
};

nlohmann::json build_request(const Transcript& transcript, const SamplingParams& sampling, std::string_view model);

/// Answers from a record cache. A miss raises UnrecordedExchange.
class ReplayBackend : public ChatBackend {
public:
    explicit ReplayBackend(std::filesystem::path cache_dir);

    BackendKind kind() const override { return BackendKind::replay; }
    std::string id() const override { return "replay"; }

    std::optional<CacheEntry> lookup(const Transcript& transcript) const;

protected:
    std::string do_complete(const Transcript& transcript) override;

private:
    std::filesystem::path dir_;
};

/// Wraps another backend and persists every exchange to the cache directory.
class RecordBackend : public ChatBackend {
public:
    RecordBackend(std::shared_ptr<ChatBackend> inner, std::filesystem::path cache_dir);

    BackendKind kind() const override { return BackendKind::record; }
    std::string id() const override { return inner_->id(); }

protected:
    std::string do_complete(const Transcript& transcript) override;

private:
    std::shared_ptr<ChatBackend> inner_;
    std::filesystem::path dir_;
    std::mutex write_mu_;
};

struct LiveConfig {
    std::string endpoint = "https://api.openai.com/v1";  // base URL; /chat/completions is appended
    std::string api_key;
    std::string model = "gpt-4o";
    int timeout_seconds = 120;
    int max_in_flight = 4;

    /// RFCPROBE_LLM_ENDPOINT, RFCPROBE_LLM_API_KEY, RFCPROBE_LLM_MODEL, with
    /// OPENAI_BASE_URL / OPENAI_API_KEY as fallbacks.
    static LiveConfig from_env(LiveConfig base);
};

/// OpenAI-compatible chat-completions client.
class LiveBackend : public ChatBackend {
public:
    explicit LiveBackend(LiveConfig config);

    BackendKind kind() const override { return BackendKind::live; }
    std::string id() const override { return "live:" + config_.model; }

protected:
    std::string do_complete(const Transcript& transcript) override;

private:
    LiveConfig config_;
    std::counting_semaphore<1024> in_flight_;
};

} // namespace rfcprobe::llm
