#pragma once

#include <map>
#include <optional>
#include <string>

// Minimal JSON-over-HTTP POST shared by the chat and embedding clients.
namespace rfcprobe::http {

struct Response {
    int status = 0;
    std::string body;
    std::optional<double> retry_after_seconds;
};

// Throws BackendError on transport failure; HTTP errors are returned as-is.
Response post_json(const std::string& base_url, const std::string& path_suffix,
                   const std::map<std::string, std::string>& headers, const std::string& body,
                   int timeout_seconds);

}  // namespace rfcprobe::http
