#pragma once

#include <filesystem>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rfcprobe/doc_ingest.hpp"
#include "rfcprobe/llm_gateway.hpp"

namespace rfcprobe {

inline constexpr std::string_view kUserImported = "user-imported";

struct TestCase {
    std::string case_id;
    std::string name;
    std::string source_fp;  // fp_id, or kUserImported
    std::vector<std::string> preconditions;
    std::vector<std::string> steps;
    std::vector<std::string> assertions;
    std::vector<std::string> precautions;

    bool operator==(const TestCase&) const = default;
};

/// Problems that make a case unusable: empty name, steps or assertions, or
/// blank entries. Empty means valid.
std::vector<std::string> case_problems(const TestCase& tc);

nlohmann::json to_json(const TestCase& tc);

/// Reads the five-part fields plus optional case_id/source_fp. A bare string
/// is accepted where a list is expected. Throws ConfigError on type errors;
/// does not check case_problems().
TestCase test_case_from_json(const nlohmann::json& j);

/// The five-part body alone, as canonical JSON. This is the exemplar output
/// format and the form compared for duplicates.
std::string canonical_case_text(const TestCase& tc);

/// Human-readable template used in prompts.
std::string render_case(const TestCase& tc);

struct FewShotExemplar {
    std::string input;  // functional point text
    TestCase output;
};

/// JSON array of {"input": str, "output": {five-part case}}. Every output must
/// be a valid case.
std::vector<FewShotExemplar> load_exemplars(const std::filesystem::path& path);

/// Guidance, then one "### Example i" block per exemplar in order, then the
/// functional point as the test input. Throws ConfigError without exemplars.
std::string build_tcg_prompt(const ingest::FunctionalPoint& fp, const std::vector<FewShotExemplar>& exemplars);

/// Accepts a JSON object (optionally fenced or surrounded by prose) or the
/// prose template. Throws ReplyError("malformed case") when neither yields a
/// valid case.
TestCase parse_case_reply(std::string_view reply);

std::string case_id_for(std::string_view fp_id);

/// One completion, plus one "output only the template" retry on a malformed
/// reply. Backend errors propagate.
TestCase generate_test_case(const ingest::FunctionalPoint& fp, const std::vector<FewShotExemplar>& exemplars,
                            llm::ChatBackend& backend);

enum class FilterStatus { accepted, rejected, needs_review };

std::string_view to_string(FilterStatus s);

struct CaseFilterVerdict {
    std::string case_id;
    FilterStatus status;
    std::vector<std::string> reasons;
};

nlohmann::json to_json(const CaseFilterVerdict& v);

/// Lower-cased words of the text minus stopwords and normative keywords.
std::set<std::string> content_words(std::string_view text);

/// Rule checks, in order: invalid case -> rejected; duplicate of an accepted
/// case -> rejected; assertion without a content word of the point, or steps
/// naming no protocol role -> needs_review. Accepted cases join the duplicate
/// index, so a filter instance is stateful and safe to share.
class CaseFilter {
public:
    explicit CaseFilter(std::vector<std::string> role_lexicon = {"client", "server", "sender", "receiver"});

    CaseFilterVerdict filter_case(const ingest::FunctionalPoint& fp, const TestCase& tc);

    std::size_t accepted_count() const;

private:
    std::vector<std::string> roles_;
    mutable std::mutex mu_;
    std::set<std::string> accepted_;
};

struct ImportError {
    std::size_t index;
    std::string message;
};

struct ImportResult {
    std::vector<TestCase> cases;
    std::vector<ImportError> errors;
};

/// JSON array of five-part cases. Bad entries are reported and skipped.
/// Entries without a case_id get "tc_user_<index>".
ImportResult import_cases(const std::filesystem::path& path);

} // namespace rfcprobe
