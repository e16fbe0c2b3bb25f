#pragma once

#include <filesystem>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace rfcprobe::ingest {

struct Section {
    std::string section_id;  // hierarchical label, e.g. "4.2.1"
    std::string heading;
    std::string text;        // raw body lines between this heading and the next one
    std::vector<std::string> paragraphs;  // whitespace-normalized, unwrapped
};

struct SpecDocument {
    std::string doc_id;
    std::string title;
    std::vector<Section> body;
    bool rfc2119 = false;
};

/// Parses a plain-text RFC. Front matter before the first top-level numbered
/// heading is dropped, as is everything from the references section onward.
/// Page headers, footers and form feeds are stripped before paragraphs are built.
SpecDocument parse_plain_text(std::string_view content, std::string doc_id);

/// Parses Markdown; `#` headings open sections. Headings that start with a
/// dotted number keep it as their id, others get a generated hierarchical id.
SpecDocument parse_markdown(std::string_view content, std::string doc_id);

/// Picks the parser from the file extension (.md/.markdown -> Markdown) and
/// uses the file stem as doc_id. rfc2119 is detected unless forced.
SpecDocument load_document(const std::filesystem::path& path,
                           std::optional<bool> force_rfc2119 = std::nullopt);

/// Splits raw section text into paragraphs: maximal runs of non-blank lines,
/// unwrapped and whitespace-normalized.
std::vector<std::string> split_paragraphs(std::string_view text);

/// True iff the body cites RFC 2119 or carries the key-words boilerplate.
bool detect_rfc2119(const SpecDocument& doc);

/// Sections with no numbered child section, in document order.
std::vector<const Section*> smallest_subsections(const SpecDocument& doc);

/// Character count of the whitespace-normalized section text (heading excluded).
std::size_t section_length(const Section& s);

class KeywordSet {
public:
    /// Validates and reorders so that any keyword precedes the keywords it
    /// extends ("MUST NOT" before "MUST"). Throws ConfigError when empty, on
    /// duplicates, or when an entry does not start and end with a word character.
    KeywordSet(std::vector<std::string> keywords, bool case_sensitive);

    /// MUST NOT, MUST, REQUIRED, SHALL NOT, SHALL, SHOULD NOT, SHOULD,
    /// NOT RECOMMENDED, RECOMMENDED, MAY, OPTIONAL.
    static KeywordSet rfc2119_default(bool case_sensitive = true);

    /// One keyword per line; blank lines and lines starting with '#' ignored.
    static KeywordSet from_file(const std::filesystem::path& path, bool case_sensitive = true);

    const std::vector<std::string>& keywords() const noexcept { return keywords_; }
    bool case_sensitive() const noexcept { return case_sensitive_; }

    KeywordSet with_case(bool case_sensitive) const;

private:
    std::vector<std::string> keywords_;
    bool case_sensitive_;
};

/// Finds keyword occurrences at word boundaries. At each position the first
/// keyword in set order wins, so multi-word keywords shadow their prefixes.
class KeywordMatcher {
public:
    explicit KeywordMatcher(const KeywordSet& kw);

    /// Distinct matched keywords (canonical spelling) in order of first occurrence.
    std::vector<std::string> matches(std::string_view text) const;

    bool any(std::string_view text) const;

private:
    std::vector<std::string> keywords_;
    std::regex pattern_;
};

struct FunctionalPoint {
    std::string fp_id;
    std::string doc_id;
    std::string section_id;
    std::string paragraph_text;
    std::vector<std::string> matched_keywords;
};

/// Every paragraph containing at least one keyword, in document order.
/// Matching is case-sensitive iff doc.rfc2119; the KeywordSet's own case flag
/// is overridden by the document.
std::vector<FunctionalPoint> extract_functional_points(const SpecDocument& doc,
                                                       const KeywordSet& kw);

/// Length-weighted share of smallest subsections containing a keyword, under
/// the document's case rule. Throws DegenerateInput when every smallest
/// subsection is empty.
double section_coverage(const SpecDocument& doc, const KeywordSet& kw);

std::string make_fp_id(std::string_view doc_id, std::string_view section_id, std::size_t ordinal);

nlohmann::json to_json(const FunctionalPoint& fp);
FunctionalPoint functional_point_from_json(const nlohmann::json& j);

/// {doc_id, title, rfc2119, coverage, functional_points[]}. coverage is null
/// when the document is degenerate.
nlohmann::json inventory_json(const SpecDocument& doc, const KeywordSet& kw);

} // namespace rfcprobe::ingest
