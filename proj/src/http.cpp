#include "httplib.h"

#include "http.hpp"

#include <regex>

#include "rfcprobe/error.hpp"

namespace rfcprobe::http {

namespace {

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path;
};

ParsedUrl parse_url(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw ConfigError("invalid endpoint URL: " + url);
    ParsedUrl out{m[1].str(), m[2].matched ? m[2].str() : ""};
    while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
    return out;
}

std::optional<double> parse_retry_after(const httplib::Headers& headers) {
    auto it = headers.find("Retry-After");
    if (it == headers.end()) return std::nullopt;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace

Response post_json(const std::string& base_url, const std::string& path_suffix,
                   const std::map<std::string, std::string>& headers, const std::string& body,
                   int timeout_seconds) {
    const auto url = parse_url(base_url);
    httplib::Client client(url.scheme_host_port);
    client.set_connection_timeout(timeout_seconds, 0);
    client.set_read_timeout(timeout_seconds, 0);
    client.set_write_timeout(timeout_seconds, 0);

    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);

    auto res = client.Post(url.path + path_suffix, h, body, "application/json");
    if (!res) {
        throw BackendError("transport error contacting " + base_url + ": " + httplib::to_string(res.error()));
    }
    return {res->status, res->body, parse_retry_after(res->headers)};
}

}  // namespace rfcprobe::http
