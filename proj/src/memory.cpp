#include "rfcprobe/memory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "http.hpp"
#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe {

namespace fs = std::filesystem;

std::string_view to_string(ItemKind kind) {
    switch (kind) {
    case ItemKind::code_file: return "code_file";
    case ItemKind::example_file: return "example_file";
    case ItemKind::experience: return "experience";
    }
    return "code_file";
}

ItemKind item_kind_from_string(std::string_view s) {
    if (s == "code_file") return ItemKind::code_file;
    if (s == "example_file") return ItemKind::example_file;
    if (s == "experience") return ItemKind::experience;
    throw ConfigError(fmt::format("unknown item kind '{}'", s));
}

std::string render_context(const RetrievalResult& result) {
    std::string out;
    for (const auto& item : result) {
        out += fmt::format("--- {} (similarity {:.4f}) ---\n", item.item_id, item.score);
        out += item.text;
        if (!item.text.empty() && item.text.back() != '\n') out += '\n';
    }
    return out;
}

nlohmann::json to_json(const RetrievalResult& result) {
    auto arr = nlohmann::json::array();
    for (const auto& item : result) arr.push_back({{"item_id", item.item_id}, {"score", item.score}});
    return arr;
}

void normalize(std::vector<double>& v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    if (sq == 0.0) return;
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : v) x *= inv;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error("vector dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

LocalEmbedder::LocalEmbedder(std::size_t dimension) : dim_(dimension) {
    if (dim_ == 0) throw ConfigError("embedding dimension must be positive");
}

std::string LocalEmbedder::id() const {
    return fmt::format("local-{}", dim_);
}

std::vector<double> LocalEmbedder::embed(std::string_view text) const {
    std::vector<double> v(dim_, 0.0);
    for (const auto& tok : text::word_tokens(text)) {
        const auto h = text::fnv1a64(tok);
        v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
    }
    normalize(v);
    return v;
}

RemoteEmbedder::RemoteEmbedder(RemoteEmbedderConfig config) : config_(std::move(config)) {
    if (config_.dimension == 0) throw ConfigError("embedding dimension must be positive");
}

std::vector<double> RemoteEmbedder::embed(std::string_view text) const {
    nlohmann::json req = {{"model", config_.model}, {"input", std::string(text)}};
    std::map<std::string, std::string> headers;
    if (!config_.api_key.empty()) headers["Authorization"] = "Bearer " + config_.api_key;
    auto res = http::post_json(config_.endpoint, "/embeddings", headers, req.dump(), config_.timeout_seconds);
    if (res.status < 200 || res.status >= 300) {
        throw BackendError(fmt::format("embedding endpoint returned HTTP {}", res.status), res.status,
                           res.retry_after_seconds);
    }
    std::vector<double> v;
    try {
        v = nlohmann::json::parse(res.body).at("data").at(0).at("embedding").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw BackendError(fmt::format("malformed embedding response: {}", e.what()), res.status);
    }
    if (v.size() != config_.dimension) {
        throw BackendError(fmt::format("embedding has {} dimensions, expected {}", v.size(), config_.dimension));
    }
    normalize(v);
    return v;
}

std::unique_ptr<Embedder> make_embedder(std::string_view kind) {
    if (kind == "local") return std::make_unique<LocalEmbedder>();
    if (kind == "remote") {
        RemoteEmbedderConfig cfg;
        auto env = [](const char* name) -> const char* {
            const char* v = std::getenv(name);
            return (v && *v) ? v : nullptr;
        };
        if (auto v = env("RFCPROBE_EMBED_ENDPOINT")) cfg.endpoint = v;
        else if (auto v2 = env("RFCPROBE_LLM_ENDPOINT")) cfg.endpoint = v2;
        else if (auto v3 = env("OPENAI_BASE_URL")) cfg.endpoint = v3;
        if (auto v = env("RFCPROBE_EMBED_API_KEY")) cfg.api_key = v;
        else if (auto v2 = env("RFCPROBE_LLM_API_KEY")) cfg.api_key = v2;
        else if (auto v3 = env("OPENAI_API_KEY")) cfg.api_key = v3;
        if (auto v = env("RFCPROBE_EMBED_MODEL")) cfg.model = v;
        if (auto v = env("RFCPROBE_EMBED_DIM")) cfg.dimension = std::strtoull(v, nullptr, 10);
        return std::make_unique<RemoteEmbedder>(cfg);
    }
    throw ConfigError(fmt::format("unknown embedder '{}' (expected local or remote)", kind));
}

std::vector<std::string> chunk_text(std::string_view text, std::size_t cap) {
    if (cap < 4) throw ConfigError("chunk cap must be at least 4 bytes");
    std::vector<std::string> chunks;
    std::size_t pos = 0;
    do {
        std::size_t end = std::min(text.size(), pos + cap);
        while (end < text.size() && end > pos && (static_cast<unsigned char>(text[end]) & 0xC0) == 0x80) --end;
        chunks.emplace_back(text.substr(pos, end - pos));
        pos = end;
    } while (pos < text.size());
    return chunks;
}

namespace {

bool under_example_dir(const fs::path& rel) {
    for (const auto& part : rel) {
        if (text::to_lower(part.string()).find("example") != std::string::npos) return true;
    }
    return false;
}

bool hidden(const fs::path& rel) {
    for (const auto& part : rel) {
        auto s = part.string();
        if (s.size() > 1 && s[0] == '.') return true;
    }
    return false;
}

class FileLock {
public:
    explicit FileLock(const fs::path& path) {
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0) throw Error("cannot open lock file " + path.string());
        ::flock(fd_, LOCK_EX);
    }
    ~FileLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

private:
    int fd_ = -1;
};

} // namespace

MemoryStore::MemoryStore(fs::path dir) : dir_(std::move(dir)) {
    if (fs::exists(dir_ / "meta.json")) load();
}

void MemoryStore::load() {
    auto meta = text::read_json(dir_ / "meta.json");
    if (meta.value("format", 0) != 1) throw ConfigError("unsupported memory store format in " + dir_.string());
    embedder_id_ = meta.at("embedder").get<std::string>();
    dim_ = meta.at("dimension").get<std::size_t>();
    const auto count = meta.at("count").get<std::size_t>();

    items_.clear();
    for (const auto& line : text::split_lines(text::read_file(dir_ / "items.jsonl"))) {
        if (text::trim(line).empty()) continue;
        auto j = nlohmann::json::parse(line);
        items_.push_back({j.at("item_id").get<std::string>(), item_kind_from_string(j.at("kind").get<std::string>()),
                          j.at("source").get<std::string>(), j.at("text").get<std::string>(), {}});
    }
    const auto raw = text::read_file(dir_ / "vectors.f64");
    if (items_.size() != count || raw.size() != count * dim_ * sizeof(double)) {
        throw Error("memory store is inconsistent: " + dir_.string());
    }
    for (std::size_t i = 0; i < count; ++i) {
        items_[i].vector.resize(dim_);
        std::memcpy(items_[i].vector.data(), raw.data() + i * dim_ * sizeof(double), dim_ * sizeof(double));
    }
}

void MemoryStore::persist() const {
    fs::create_directories(dir_);
    FileLock lock(dir_ / ".lock");
    std::string lines;
    std::string raw;
    raw.reserve(items_.size() * dim_ * sizeof(double));
    for (const auto& item : items_) {
        nlohmann::json j = {{"item_id", item.item_id},
                            {"kind", to_string(item.kind)},
                            {"source", item.source},
                            {"text", item.text}};
        lines += j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        lines += '\n';
        raw.append(reinterpret_cast<const char*>(item.vector.data()), item.vector.size() * sizeof(double));
    }
    text::write_file(dir_ / "items.jsonl", lines);
    text::write_file(dir_ / "vectors.f64", raw);
    text::write_json(dir_ / "meta.json",
                     {{"format", 1}, {"embedder", embedder_id_}, {"dimension", dim_}, {"count", items_.size()}});
}

void MemoryStore::check_embedder(const Embedder& embedder) const {
    if (!embedder_id_.empty() && embedder_id_ != embedder.id()) {
        throw ConfigError(
            fmt::format("memory store was built with embedder {}, not {}", embedder_id_, embedder.id()));
    }
}

IndexStats MemoryStore::index_library(const fs::path& root, const Embedder& embedder, const IndexOptions& options) {
    if (!fs::is_directory(root)) throw ConfigError("library root not found: " + root.string());

    std::vector<fs::path> files;
    for (auto it = fs::recursive_directory_iterator(root, fs::directory_options::skip_permission_denied);
         it != fs::recursive_directory_iterator(); ++it) {
        const auto rel = fs::relative(it->path(), root);
        if (hidden(rel)) {
            if (it->is_directory()) it.disable_recursion_pending();
            continue;
        }
        if (!it->is_regular_file()) continue;
        const auto ext = it->path().extension().string();
        if (std::find(options.extensions.begin(), options.extensions.end(), ext) == options.extensions.end()) continue;
        files.push_back(rel);
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.generic_string() < b.generic_string(); });

    IndexStats stats;
    std::vector<KnowledgeItem> fresh;
    for (const auto& rel : files) {
        std::string content;
        try {
            content = text::read_file(root / rel);
        } catch (const Error& e) {
            spdlog::warn("skipping unreadable file {}: {}", rel.generic_string(), e.what());
            ++stats.files_skipped;
            continue;
        }
        const auto kind = under_example_dir(rel) ? ItemKind::example_file : ItemKind::code_file;
        const auto chunks = chunk_text(content, options.chunk_cap);
        const auto source = rel.generic_string();
        for (std::size_t c = 0; c < chunks.size(); ++c) {
            auto id = chunks.size() == 1 ? source : fmt::format("{}#{}", source, c);
            fresh.push_back({std::move(id), kind, source, chunks[c], embedder.embed(chunks[c])});
        }
        ++stats.files_indexed;
    }
    if (stats.files_indexed == 0) throw Error("no files indexed under " + root.string());

    std::unique_lock lock(mu_);
    const bool re_embed = embedder_id_ != embedder.id();
    for (auto& item : items_) {
        if (item.kind != ItemKind::experience) continue;
        if (re_embed) item.vector = embedder.embed(item.text);
        fresh.push_back(std::move(item));
        ++stats.experiences_kept;
    }
    items_ = std::move(fresh);
    embedder_id_ = embedder.id();
    dim_ = embedder.dimension();
    stats.items = items_.size();
    persist();
    return stats;
}

RetrievalResult MemoryStore::retrieve(std::string_view query, std::size_t top_k, const Embedder& embedder) const {
    if (top_k == 0) throw ConfigError("top_k must be at least 1");
    std::shared_lock lock(mu_);
    if (items_.empty()) throw Error("memory store is empty: " + dir_.string());
    check_embedder(embedder);

    const auto q = embedder.embed(query);
    std::vector<std::pair<double, const KnowledgeItem*>> scored;
    scored.reserve(items_.size());
    for (const auto& item : items_) scored.emplace_back(cosine(q, item.vector), &item);

    const auto n = std::min(top_k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                      [](const auto& a, const auto& b) {
                          // scores equal to 12 places count as ties
                          const auto qa = std::llround(a.first * 1e12), qb = std::llround(b.first * 1e12);
                          if (qa != qb) return qa > qb;
                          return a.second->item_id < b.second->item_id;
                      });
    RetrievalResult out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({scored[i].second->item_id, scored[i].first, scored[i].second->text});
    return out;
}

std::string MemoryStore::store_experience(std::string_view case_id, std::string_view summary, const Embedder& embedder) {
    if (text::trim(summary).empty()) throw ConfigError("experience summary must not be empty");
    auto vec = embedder.embed(summary);

    std::unique_lock lock(mu_);
    check_embedder(embedder);
    const auto prefix = fmt::format("experience/{}/", text::sanitize_id(case_id));
    std::size_t n = 0;
    for (const auto& item : items_) {
        if (item.item_id.rfind(prefix, 0) == 0) ++n;
    }
    auto id = fmt::format("{}{}", prefix, n);
    items_.push_back({id, ItemKind::experience, std::string(case_id), std::string(summary), std::move(vec)});
    embedder_id_ = embedder.id();
    dim_ = embedder.dimension();
    persist();
    return id;
}

std::size_t MemoryStore::size() const {
    std::shared_lock lock(mu_);
    return items_.size();
}

std::vector<KnowledgeItem> MemoryStore::items() const {
    std::shared_lock lock(mu_);
    return items_;
}

std::string MemoryStore::embedder_id() const {
    std::shared_lock lock(mu_);
    return embedder_id_;
}

Retriever::Retriever(std::shared_ptr<MemoryStore> store, std::shared_ptr<const Embedder> embedder, std::size_t top_k,
                     bool frozen)
    : store_(std::move(store)), embedder_(std::move(embedder)), top_k_(top_k), frozen_(frozen) {
    if (top_k_ == 0) throw ConfigError("top_k must be at least 1");
    if (store_ && !embedder_) throw ConfigError("retriever needs an embedder");
}

RetrievalResult Retriever::retrieve(std::string_view query) const {
    if (frozen()) return {};
    return store_->retrieve(query, top_k_, *embedder_);
}

Retriever Retriever::frozen_copy() const {
    Retriever r = *this;
    r.frozen_ = true;
    return r;
}

} // namespace rfcprobe
