#include "rfcprobe/doc_ingest.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_set>

#include <fmt/format.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe::ingest {

namespace {

struct RawSection {
    std::string id;
    std::string heading;
    std::vector<std::string> lines;
};

bool is_blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(),
                       [](unsigned char c) { return std::isspace(c) != 0; });
}

const std::regex& page_footer_re() {
    static const std::regex re(R"(^\S.*\[Page [0-9]+\]\s*$)");
    return re;
}

const std::regex& page_header_re() {
    static const std::regex re(R"(^(RFC [0-9]+|Internet-Draft)\s{2,}.*\s{2,}\S.*[0-9]{4}\s*$)");
    return re;
}

const std::regex& numbered_heading_re() {
    // "1.  Introduction", "4.2.1.  Foo", "4.2.1  Foo"; a single-level number needs its dot.
    static const std::regex re(R"(^([0-9]+(?:\.[0-9]+)+\.?|[0-9]+\.)\s+([A-Za-z].*?)\s*$)");
    return re;
}

const std::regex& toc_leader_re() {
    static const std::regex re(R"((\.\s*){3,}[0-9]+\s*$)");
    return re;
}

const std::regex& stop_heading_re() {
    static const std::regex re(R"(^(?:(?:normative|informative)\s+)?references\b.*|^appendix\b.*|^authors?'?\s+address(?:es)?\b.*)",
                               std::regex::icase);
    return re;
}

bool looks_mid_sentence(const std::string& before, const std::string& after) {
    auto b = text::trim(before);
    auto a = text::trim(after);
    if (b.empty() || a.empty()) return false;
    char last = b.back();
    if (last == '.' || last == ':' || last == ';' || last == '!' || last == '?') return false;
    return std::islower(static_cast<unsigned char>(a.front())) != 0;
}

// Removes RFC pagination. A paragraph split across a page break is rejoined
// when the text around the break reads as one sentence.
std::vector<std::string> strip_pagination(const std::vector<std::string>& in) {
    std::vector<std::string> out;
    out.reserve(in.size());
    bool just_broke = false;
    for (std::string line : in) {
        line.erase(std::remove(line.begin(), line.end(), '\f'), line.end());
        if (std::regex_match(line, page_footer_re()) || std::regex_match(line, page_header_re())) {
            just_broke = true;
            continue;
        }
        if (just_broke && !is_blank(line)) {
            // Find the last non-blank line already emitted.
            auto it = std::find_if(out.rbegin(), out.rend(), [](const std::string& l) { return !is_blank(l); });
            if (it != out.rend() && looks_mid_sentence(*it, line)) {
                out.erase(it.base(), out.end());
            }
            just_broke = false;
        }
        out.push_back(std::move(line));
    }
    return out;
}

std::string extract_rfc_title(const std::vector<std::string>& lines) {
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (text::trim(lines[i]) != "Abstract" || lines[i].front() != 'A') continue;
        std::size_t j = i;
        while (j > 0 && is_blank(lines[j - 1])) --j;
        std::size_t end = j;
        while (j > 0 && !is_blank(lines[j - 1])) --j;
        std::vector<std::string> parts;
        for (std::size_t k = j; k < end; ++k) parts.push_back(text::trim(lines[k]));
        return text::join(parts, " ");
    }
    return {};
}

void trim_blank_edges(std::vector<std::string>& lines) {
    while (!lines.empty() && is_blank(lines.back())) lines.pop_back();
    auto first = std::find_if(lines.begin(), lines.end(), [](const std::string& l) { return !is_blank(l); });
    lines.erase(lines.begin(), first);
}

Section finish(RawSection raw) {
    trim_blank_edges(raw.lines);
    Section s;
    s.section_id = std::move(raw.id);
    s.heading = std::move(raw.heading);
    s.text = text::join(raw.lines, "\n");
    s.paragraphs = split_paragraphs(s.text);
    return s;
}

std::string strip_trailing_dot(std::string id) {
    if (!id.empty() && id.back() == '.') id.pop_back();
    return id;
}

std::string regex_escape(std::string_view s) {
    static const std::string special = R"(\^$.|?*+()[]{}/)";
    std::string out;
    for (char c : s) {
        if (special.find(c) != std::string::npos) out.push_back('\\');
        out.push_back(c);
    }
    return out;
}

// A keyword shadows another when the other is a whole-word prefix of it.
bool extends(std::string_view longer, std::string_view shorter) {
    if (longer.size() <= shorter.size()) return false;
    if (longer.substr(0, shorter.size()) != shorter) return false;
    return !text::is_word_char(longer[shorter.size()]);
}

} // namespace

std::vector<std::string> split_paragraphs(std::string_view body) {
    std::vector<std::string> paragraphs;
    std::vector<std::string> run;
    auto flush = [&] {
        if (run.empty()) return;
        auto p = text::normalize_whitespace(text::join(run, " "));
        if (!p.empty()) paragraphs.push_back(std::move(p));
        run.clear();
    };
    for (auto& line : text::split_lines(body)) {
        if (is_blank(line)) {
            flush();
        } else {
            run.push_back(line);
        }
    }
    flush();
    return paragraphs;
}

SpecDocument parse_plain_text(std::string_view content, std::string doc_id) {
    SpecDocument doc;
    doc.doc_id = std::move(doc_id);
    auto lines = strip_pagination(text::split_lines(content));
    doc.title = extract_rfc_title(lines);

    std::vector<RawSection> raw;
    bool in_body = false;
    bool stopped = false;
    std::smatch m;
    for (const auto& line : lines) {
        if (stopped) break;
        const bool at_column_zero = !line.empty() && !std::isspace(static_cast<unsigned char>(line.front()));
        if (at_column_zero && !std::regex_search(line, toc_leader_re())) {
            if (std::regex_match(line, m, numbered_heading_re())) {
                std::string id = strip_trailing_dot(m[1].str());
                std::string heading = text::trim(m[2].str());
                if (!in_body && id != "1") continue;
                if (std::regex_match(heading, stop_heading_re())) {
                    stopped = true;
                    continue;
                }
                in_body = true;
                raw.push_back({std::move(id), std::move(heading), {}});
                continue;
            }
            if (in_body && std::regex_match(text::trim(line), stop_heading_re())) {
                stopped = true;
                continue;
            }
        }
        if (in_body) raw.back().lines.push_back(line);
    }

    if (raw.empty()) {
        // Unstructured text: one section spanning the whole input.
        RawSection only{"1", doc.title, lines};
        raw.push_back(std::move(only));
    }
    for (auto& r : raw) doc.body.push_back(finish(std::move(r)));
    doc.rfc2119 = detect_rfc2119(doc);
    return doc;
}

SpecDocument parse_markdown(std::string_view content, std::string doc_id) {
    static const std::regex heading_re(R"(^(#{1,6})\s+(.*?)\s*#*\s*$)");
    static const std::regex numbered_re(R"(^([0-9]+(?:\.[0-9]+)*)\.?\s+(.*)$)");

    struct Heading {
        std::size_t line;
        int level;
        std::string text;
    };

    SpecDocument doc;
    doc.doc_id = std::move(doc_id);
    auto lines = text::split_lines(content);

    std::vector<Heading> headings;
    bool in_fence = false;
    std::smatch m;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        auto t = text::trim(lines[i]);
        if (t.rfind("```", 0) == 0 || t.rfind("~~~", 0) == 0) {
            in_fence = !in_fence;
            continue;
        }
        if (in_fence) continue;
        if (std::regex_match(lines[i], m, heading_re)) {
            headings.push_back({i, static_cast<int>(m[1].length()), m[2].str()});
        }
    }

    // A lone leading level-1 heading is the document title.
    std::size_t first = 0;
    const auto h1_count = std::count_if(headings.begin(), headings.end(), [](const Heading& h) { return h.level == 1; });
    if (!headings.empty() && headings.front().level == 1 && h1_count == 1) {
        doc.title = headings.front().text;
        first = 1;
    }

    int min_level = 7;
    for (std::size_t i = first; i < headings.size(); ++i) min_level = std::min(min_level, headings[i].level);

    std::vector<RawSection> raw;
    int counters[7] = {0, 0, 0, 0, 0, 0, 0};
    for (std::size_t i = first; i < headings.size(); ++i) {
        const auto& h = headings[i];
        std::string heading = h.text;
        std::string id;
        if (std::regex_match(heading, m, numbered_re)) {
            id = m[1].str();
            heading = text::trim(m[2].str());
        }
        if (std::regex_match(heading, stop_heading_re())) break;

        const int depth = h.level - min_level;
        ++counters[depth];
        for (int d = depth + 1; d < 7; ++d) counters[d] = 0;
        if (id.empty()) {
            std::vector<std::string> parts;
            for (int d = 0; d <= depth; ++d) parts.push_back(std::to_string(counters[d]));
            id = text::join(parts, ".");
        }

        const std::size_t end = i + 1 < headings.size() ? headings[i + 1].line : lines.size();
        RawSection r{std::move(id), std::move(heading), {}};
        for (std::size_t k = h.line + 1; k < end; ++k) r.lines.push_back(lines[k]);
        raw.push_back(std::move(r));
    }

    if (raw.empty()) {
        std::size_t start = first == 1 ? headings.front().line + 1 : 0;
        RawSection only{"1", doc.title, {}};
        for (std::size_t k = start; k < lines.size(); ++k) only.lines.push_back(lines[k]);
        raw.push_back(std::move(only));
    }
    for (auto& r : raw) doc.body.push_back(finish(std::move(r)));
    doc.rfc2119 = detect_rfc2119(doc);
    return doc;
}

SpecDocument load_document(const std::filesystem::path& path, std::optional<bool> force_rfc2119) {
    const auto content = text::read_file(path);
    const auto ext = text::to_lower(path.extension().string());
    auto doc_id = text::sanitize_id(path.stem().string());
    SpecDocument doc = (ext == ".md" || ext == ".markdown") ? parse_markdown(content, std::move(doc_id))
                                                            : parse_plain_text(content, std::move(doc_id));
    if (force_rfc2119) doc.rfc2119 = *force_rfc2119;
    return doc;
}

bool detect_rfc2119(const SpecDocument& doc) {
    for (const auto& s : doc.body) {
        const auto t = text::normalize_whitespace(s.text);
        if (text::contains_icase(t, "RFC 2119") || text::contains_icase(t, "RFC2119") ||
            text::contains_icase(t, "are to be interpreted as described in")) {
            return true;
        }
    }
    return false;
}

std::vector<const Section*> smallest_subsections(const SpecDocument& doc) {
    std::vector<const Section*> out;
    for (std::size_t i = 0; i < doc.body.size(); ++i) {
        const auto prefix = doc.body[i].section_id + ".";
        bool has_child = false;
        for (std::size_t j = 0; j < doc.body.size() && !has_child; ++j) {
            has_child = j != i && doc.body[j].section_id.rfind(prefix, 0) == 0;
        }
        if (!has_child) out.push_back(&doc.body[i]);
    }
    return out;
}

std::size_t section_length(const Section& s) {
    return text::normalize_whitespace(s.text).size();
}

KeywordSet::KeywordSet(std::vector<std::string> keywords, bool case_sensitive)
    : case_sensitive_(case_sensitive) {
    if (keywords.empty()) throw ConfigError("keyword set must not be empty");
    std::unordered_set<std::string> seen;
    for (auto& raw : keywords) {
        auto k = text::normalize_whitespace(raw);
        if (k.empty() || !text::is_word_char(k.front()) || !text::is_word_char(k.back())) {
            throw ConfigError(fmt::format("invalid keyword '{}'", raw));
        }
        if (!seen.insert(k).second) throw ConfigError(fmt::format("duplicate keyword '{}'", k));
        // Place before the first entry this keyword extends.
        auto pos = std::find_if(keywords_.begin(), keywords_.end(),
                                [&](const std::string& existing) { return extends(k, existing); });
        keywords_.insert(pos, std::move(k));
    }
}

KeywordSet KeywordSet::rfc2119_default(bool case_sensitive) {
    return KeywordSet({"MUST NOT", "MUST", "REQUIRED", "SHALL NOT", "SHALL", "SHOULD NOT", "SHOULD",
                       "NOT RECOMMENDED", "RECOMMENDED", "MAY", "OPTIONAL"},
                      case_sensitive);
}

KeywordSet KeywordSet::from_file(const std::filesystem::path& path, bool case_sensitive) {
    std::vector<std::string> keywords;
    for (auto& line : text::split_lines(text::read_file(path))) {
        auto t = text::trim(line);
        if (t.empty() || t.front() == '#') continue;
        keywords.push_back(std::move(t));
    }
    return KeywordSet(std::move(keywords), case_sensitive);
}

KeywordSet KeywordSet::with_case(bool case_sensitive) const {
    KeywordSet copy = *this;
    copy.case_sensitive_ = case_sensitive;
    return copy;
}

KeywordMatcher::KeywordMatcher(const KeywordSet& kw) : keywords_(kw.keywords()) {
    std::string alternation;
    for (std::size_t i = 0; i < keywords_.size(); ++i) {
        if (i) alternation += '|';
        // Keywords are whitespace-normalized, so single spaces separate words.
        std::string group;
        std::size_t start = 0;
        const auto& k = keywords_[i];
        while (true) {
            auto sp = k.find(' ', start);
            group += regex_escape(k.substr(start, sp == std::string::npos ? std::string::npos : sp - start));
            if (sp == std::string::npos) break;
            group += R"(\s+)";
            start = sp + 1;
        }
        alternation += "(" + group + ")";
    }
    auto flags = std::regex::ECMAScript | std::regex::optimize;
    if (!kw.case_sensitive()) flags |= std::regex::icase;
    pattern_ = std::regex(R"(\b(?:)" + alternation + R"()\b)", flags);
}

std::vector<std::string> KeywordMatcher::matches(std::string_view text_view) const {
    std::vector<std::string> found;
    const std::string s(text_view);
    for (auto it = std::sregex_iterator(s.begin(), s.end(), pattern_); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        for (std::size_t g = 1; g < m.size(); ++g) {
            if (!m[g].matched) continue;
            const auto& kw = keywords_[g - 1];
            if (std::find(found.begin(), found.end(), kw) == found.end()) found.push_back(kw);
            break;
        }
    }
    return found;
}

bool KeywordMatcher::any(std::string_view text_view) const {
    const std::string s(text_view);
    return std::regex_search(s, pattern_);
}

std::string make_fp_id(std::string_view doc_id, std::string_view section_id, std::size_t ordinal) {
    return fmt::format("{}-s{}-p{}", text::sanitize_id(doc_id), text::sanitize_id(section_id), ordinal);
}

std::vector<FunctionalPoint> extract_functional_points(const SpecDocument& doc, const KeywordSet& kw) {
    const KeywordMatcher matcher(kw.with_case(doc.rfc2119));
    std::vector<FunctionalPoint> out;
    for (const auto& section : doc.body) {
        for (std::size_t p = 0; p < section.paragraphs.size(); ++p) {
            auto matched = matcher.matches(section.paragraphs[p]);
            if (matched.empty()) continue;
            out.push_back({make_fp_id(doc.doc_id, section.section_id, p), doc.doc_id, section.section_id,
                           section.paragraphs[p], std::move(matched)});
        }
    }
    return out;
}

double section_coverage(const SpecDocument& doc, const KeywordSet& kw) {
    const KeywordMatcher matcher(kw.with_case(doc.rfc2119));
    std::size_t total = 0;
    std::size_t covered = 0;
    for (const Section* s : smallest_subsections(doc)) {
        const auto normalized = text::normalize_whitespace(s->text);
        total += normalized.size();
        if (!normalized.empty() && matcher.any(normalized)) covered += normalized.size();
    }
    if (total == 0) throw DegenerateInput("degenerate document: no smallest subsection has any text");
    return static_cast<double>(covered) / static_cast<double>(total);
}

nlohmann::json to_json(const FunctionalPoint& fp) {
    return {{"fp_id", fp.fp_id},
            {"doc_id", fp.doc_id},
            {"section_id", fp.section_id},
            {"paragraph_text", fp.paragraph_text},
            {"matched_keywords", fp.matched_keywords}};
}

FunctionalPoint functional_point_from_json(const nlohmann::json& j) {
    FunctionalPoint fp;
    fp.fp_id = j.at("fp_id").get<std::string>();
    fp.doc_id = j.at("doc_id").get<std::string>();
    fp.section_id = j.at("section_id").get<std::string>();
    fp.paragraph_text = j.at("paragraph_text").get<std::string>();
    fp.matched_keywords = j.at("matched_keywords").get<std::vector<std::string>>();
    return fp;
}

nlohmann::json inventory_json(const SpecDocument& doc, const KeywordSet& kw) {
    nlohmann::json j;
    j["doc_id"] = doc.doc_id;
    j["title"] = doc.title;
    j["rfc2119"] = doc.rfc2119;
    try {
        j["coverage"] = section_coverage(doc, kw);
    } catch (const DegenerateInput&) {
        j["coverage"] = nullptr;
    }
    j["sections"] = doc.body.size();
    j["smallest_subsections"] = smallest_subsections(doc).size();
    auto fps = nlohmann::json::array();
    for (const auto& fp : extract_functional_points(doc, kw)) fps.push_back(to_json(fp));
    j["functional_points"] = std::move(fps);
    return j;
}

} // namespace rfcprobe::ingest
