#pragma once

#include <filesystem>
#include <memory>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace rfcprobe {

enum class ItemKind { code_file, example_file, experience };

std::string_view to_string(ItemKind kind);
ItemKind item_kind_from_string(std::string_view s);

struct KnowledgeItem {
    std::string item_id;
    ItemKind kind;
    std::string source;  // library-relative path, or the originating case id
    std::string text;
    std::vector<double> vector;  // unit length, or all zeros for token-free text
};

struct ScoredItem {
    std::string item_id;
    double score;
    std::string text;
};

using RetrievalResult = std::vector<ScoredItem>;

// Prompt-ready rendering; empty string for an empty result.
std::string render_context(const RetrievalResult& result);

nlohmann::json to_json(const RetrievalResult& result);

class Embedder {
public:
    virtual ~Embedder() = default;

    // Stable identity recorded in the store, e.g. "local-384".
    virtual std::string id() const = 0;
    virtual std::size_t dimension() const = 0;
    virtual std::vector<double> embed(std::string_view text) const = 0;
};

/// Offline hashed bag of words. Each lower-cased alphanumeric token adds ±1 to
/// bucket fnv1a64(token) % dim (sign from the hash's top bit); the sum is
/// L2-normalized.
class LocalEmbedder : public Embedder {
public:
    explicit LocalEmbedder(std::size_t dimension = 384);

    std::string id() const override;
    std::size_t dimension() const override { return dim_; }
    std::vector<double> embed(std::string_view text) const override;

private:
    std::size_t dim_;
};

struct RemoteEmbedderConfig {
    std::string endpoint = "https://api.openai.com/v1";  // /embeddings is appended
    std::string api_key;
    std::string model = "text-embedding-3-large";
    std::size_t dimension = 3072;
    int timeout_seconds = 60;
};

/// OpenAI-compatible embeddings client. Replies are re-normalized and checked
/// against the configured dimension.
class RemoteEmbedder : public Embedder {
public:
    explicit RemoteEmbedder(RemoteEmbedderConfig config);

    std::string id() const override { return "remote:" + config_.model; }
    std::size_t dimension() const override { return config_.dimension; }
    std::vector<double> embed(std::string_view text) const override;

private:
    RemoteEmbedderConfig config_;
};

std::unique_ptr<Embedder> make_embedder(std::string_view kind);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

void normalize(std::vector<double>& v);

struct IndexOptions {
    std::vector<std::string> extensions = {".py", ".pyi", ".c",  ".h",   ".cc", ".cpp", ".hpp", ".rs",
                                           ".go", ".java", ".js", ".ts", ".rb", ".sh",  ".lua"};
    std::size_t chunk_cap = 8000;
};

struct IndexStats {
    std::size_t files_indexed = 0;
    std::size_t files_skipped = 0;
    std::size_t items = 0;
    std::size_t experiences_kept = 0;
};

/// Splits into contiguous pieces of at most cap bytes without cutting a UTF-8
/// sequence. Empty input gives one empty chunk.
std::vector<std::string> chunk_text(std::string_view text, std::size_t cap);

/// Long-term memory: library files plus experience summaries, each with an
/// embedding. Backed by a directory holding meta.json, items.jsonl and
/// vectors.f64 (row-major little-endian doubles, one row per item in
/// items.jsonl order).
///
/// Reads share a lock; indexing and experience writes hold it exclusively and
/// take an advisory file lock on <dir>/.lock while persisting.
class MemoryStore {
public:
    /// Loads the store if the directory holds one, otherwise starts empty.
    explicit MemoryStore(std::filesystem::path dir);

    MemoryStore(const MemoryStore&) = delete;
    MemoryStore& operator=(const MemoryStore&) = delete;

    const std::filesystem::path& dir() const noexcept { return dir_; }

    /// Replaces every library item with the files under root; experiences are
    /// kept (re-embedded when the embedder changed).
    IndexStats index_library(const std::filesystem::path& root, const Embedder& embedder,
                             const IndexOptions& options = {});

    /// Top items by cosine similarity, ties (equal to 12 places) by item_id. Throws on an empty store.
    RetrievalResult retrieve(std::string_view query, std::size_t top_k, const Embedder& embedder) const;

    std::string store_experience(std::string_view case_id, std::string_view summary, const Embedder& embedder);

    std::size_t size() const;
    std::vector<KnowledgeItem> items() const;
    std::string embedder_id() const;

private:
    void check_embedder(const Embedder& embedder) const;
    void persist() const;
    void load();

    std::filesystem::path dir_;
    mutable std::shared_mutex mu_;
    std::string embedder_id_;
    std::size_t dim_ = 0;
    std::vector<KnowledgeItem> items_;
};

/// What the refinement loop asks for context. A frozen retriever, or one with
/// no store, always returns an empty result.
class Retriever {
public:
    Retriever() = default;
    Retriever(std::shared_ptr<MemoryStore> store, std::shared_ptr<const Embedder> embedder, std::size_t top_k = 4,
              bool frozen = false);

    RetrievalResult retrieve(std::string_view query) const;

    bool frozen() const noexcept { return frozen_ || !store_; }
    Retriever frozen_copy() const;

    std::size_t top_k() const noexcept { return top_k_; }
    const std::shared_ptr<MemoryStore>& store() const noexcept { return store_; }
    const std::shared_ptr<const Embedder>& embedder() const noexcept { return embedder_; }

private:
    std::shared_ptr<MemoryStore> store_;
    std::shared_ptr<const Embedder> embedder_;
    std::size_t top_k_ = 4;
    bool frozen_ = true;
};

} // namespace rfcprobe
