#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace rfcprobe {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments supplied by the caller.
class ConfigError : public Error {
public:
    using Error::Error;
};

// The input cannot support the requested computation (e.g. zero-length corpus).
class DegenerateInput : public Error {
public:
    using Error::Error;
};

// A chat or embedding backend failed. retry_after_seconds is set when the
// server supplied a Retry-After header.
class BackendError : public Error {
public:
    BackendError(const std::string& what, int http_status = 0,
                 std::optional<double> retry_after_seconds = std::nullopt)
        : Error(what), http_status_(http_status), retry_after_(retry_after_seconds) {}

    int http_status() const noexcept { return http_status_; }
    std::optional<double> retry_after_seconds() const noexcept { return retry_after_; }

private:
    int http_status_;
    std::optional<double> retry_after_;
};

// Replay cache has no entry for the transcript.
class UnrecordedExchange : public BackendError {
public:
    explicit UnrecordedExchange(const std::string& transcript_hash)
        : BackendError("unrecorded exchange: " + transcript_hash), hash_(transcript_hash) {}

    const std::string& transcript_hash() const noexcept { return hash_; }

private:
    std::string hash_;
};

// A document (blueprint, config, case file) does not follow its schema.
class SchemaError : public Error {
public:
    using Error::Error;
};

// A model reply could not be turned into the expected artifact. The raw reply
// is kept so callers can persist or feed it back.
class ReplyError : public Error {
public:
    ReplyError(const std::string& what, std::string raw_reply)
        : Error(what), raw_reply_(std::move(raw_reply)) {}

    const std::string& raw_reply() const noexcept { return raw_reply_; }

private:
    std::string raw_reply_;
};

} // namespace rfcprobe
