#include "rfcprobe/case_gen.hpp"

#include <algorithm>
#include <array>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe {

namespace {

using nlohmann::json;

const std::array<std::string_view, 5> kFields = {"name", "preconditions", "steps", "assertions", "precautions"};

std::vector<std::string> string_list(const json& j, std::string_view field) {
    if (j.is_null()) return {};
    if (j.is_string()) {
        auto s = j.get<std::string>();
        if (text::trim(s).empty()) return {};
        return {s};
    }
    if (!j.is_array()) throw ConfigError(fmt::format("field '{}' must be a list of strings", field));
    std::vector<std::string> out;
    for (const auto& e : j) {
        if (!e.is_string()) throw ConfigError(fmt::format("field '{}' must be a list of strings", field));
        out.push_back(e.get<std::string>());
    }
    return out;
}

json five_part(const TestCase& tc) {
    return {{"name", tc.name},
            {"preconditions", tc.preconditions},
            {"steps", tc.steps},
            {"assertions", tc.assertions},
            {"precautions", tc.precautions}};
}

std::string list_block(const std::vector<std::string>& items, bool numbered) {
    if (items.empty()) return "- (none)\n";
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        out += numbered ? fmt::format("{}. {}\n", i + 1, items[i]) : fmt::format("- {}\n", items[i]);
    }
    return out;
}

// Header labels of the prose template, mapped to field names.
std::optional<std::string_view> field_for_label(std::string_view label) {
    auto l = text::normalize_whitespace(text::to_lower(label));
    if (l.rfind("test ", 0) == 0) l = l.substr(5);
    for (auto f : kFields) {
        if (l == f) return f;
    }
    if (l == "case name" || l == "title") return kFields[0];
    if (l == "precaution") return kFields[4];
    if (l == "assertion") return kFields[3];
    if (l == "step") return kFields[2];
    if (l == "precondition") return kFields[1];
    return std::nullopt;
}

std::string strip_decoration(std::string_view s) {
    std::size_t b = 0, e = s.size();
    auto deco = [](char c) { return c == '#' || c == '*' || c == '_' || c == ' ' || c == '\t'; };
    while (b < e && deco(s[b])) ++b;
    while (e > b && deco(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

std::string strip_bullet(std::string_view line) {
    auto s = text::trim(line);
    if (s.rfind("- ", 0) == 0 || s.rfind("* ", 0) == 0 || s.rfind("+ ", 0) == 0) return text::trim(s.substr(2));
    if (s.rfind("\xe2\x80\xa2", 0) == 0) return text::trim(s.substr(3));
    std::size_t i = 0;
    if (i < s.size() && s[i] == '(') ++i;
    std::size_t digits = i;
    while (digits < s.size() && std::isdigit(static_cast<unsigned char>(s[digits]))) ++digits;
    if (digits > i && digits < s.size() && (s[digits] == '.' || s[digits] == ')')) {
        return text::trim(s.substr(digits + 1));
    }
    return s;
}

std::optional<TestCase> parse_prose(std::string_view reply) {
    TestCase tc;
    std::optional<std::string_view> current;
    std::vector<std::string> name_lines;
    int headers = 0;
    auto add = [&](std::string_view field, std::string_view line) {
        if (field == "name") {
            name_lines.emplace_back(line);
            return;
        }
        auto item = strip_bullet(line);
        if (item.empty() || item == "(none)" || text::to_lower(item) == "none") return;
        if (field == "preconditions") tc.preconditions.push_back(item);
        else if (field == "steps") tc.steps.push_back(item);
        else if (field == "assertions") tc.assertions.push_back(item);
        else tc.precautions.push_back(item);
    };
    for (const auto& raw : text::split_lines(reply)) {
        const auto line = text::trim(raw);
        if (line.empty() || line.rfind("```", 0) == 0) continue;
        std::optional<std::string_view> header;
        std::string inline_rest;
        if (auto colon = line.find(':'); colon != std::string::npos) {
            if ((header = field_for_label(strip_decoration(line.substr(0, colon))))) {
                inline_rest = strip_decoration(line.substr(colon + 1));
            }
        }
        if (!header && line[0] == '#') header = field_for_label(strip_decoration(line));
        if (header) {
            ++headers;
            current = header;
            if (!inline_rest.empty()) add(*current, inline_rest);
            continue;
        }
        if (current) add(*current, line);
    }
    if (headers < 2) return std::nullopt;
    tc.name = text::join(name_lines, " ");
    return tc;
}

std::optional<TestCase> try_json_case(std::string_view candidate) {
    auto j = json::parse(candidate, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    if (!j.contains("steps") && !j.contains("assertions")) return std::nullopt;
    try {
        return test_case_from_json(j);
    } catch (const ConfigError&) {
        return std::nullopt;
    }
}

std::optional<TestCase> parse_json_reply(std::string_view reply) {
    // Fenced blocks first, then the whole reply, then the outermost braces.
    std::size_t pos = 0;
    while ((pos = reply.find("```", pos)) != std::string_view::npos) {
        auto body_start = reply.find('\n', pos);
        if (body_start == std::string_view::npos) break;
        auto end = reply.find("```", body_start);
        if (end == std::string_view::npos) break;
        if (auto tc = try_json_case(reply.substr(body_start + 1, end - body_start - 1))) return tc;
        pos = end + 3;
    }
    if (auto tc = try_json_case(reply)) return tc;
    auto open = reply.find('{');
    auto close = reply.rfind('}');
    if (open != std::string_view::npos && close != std::string_view::npos && close > open) {
        return try_json_case(reply.substr(open, close - open + 1));
    }
    return std::nullopt;
}

const std::set<std::string>& stopwords() {
    static const std::set<std::string> words = {
        "a",      "about",  "after",   "all",   "also",  "an",    "and",    "any",   "are",   "as",    "at",
        "be",     "been",   "before",  "being", "both",  "but",   "by",     "can",   "could", "do",    "does",
        "each",   "either", "else",    "for",   "from",  "has",   "have",   "if",    "in",    "into",  "is",
        "it",     "its",    "itself",  "more",  "most",  "no",    "nor",    "of",    "on",    "once",  "only",
        "or",     "other",  "our",     "out",   "over",  "same",  "so",     "some",  "such",  "than",  "that",
        "the",    "their",  "them",    "then",  "there", "these", "they",   "this",  "those", "through", "to",
        "under",  "until",  "up",      "upon",  "very",  "was",   "we",     "were",  "what",  "when",  "where",
        "which",  "while",  "who",     "whom",  "why",   "will",  "with",   "would", "you",   "your",
        // normative keywords carry no topic
        "must",   "shall",  "should",  "may",   "not",   "required", "recommended", "optional"};
    return words;
}

std::string dedup_key(const TestCase& tc) {
    return text::normalize_whitespace(canonical_case_text(tc));
}

} // namespace

std::vector<std::string> case_problems(const TestCase& tc) {
    std::vector<std::string> problems;
    if (text::trim(tc.name).empty()) problems.emplace_back("name is empty");
    if (tc.steps.empty()) problems.emplace_back("steps are empty");
    if (tc.assertions.empty()) problems.emplace_back("assertions are empty");
    auto blanks = [&](const std::vector<std::string>& list, std::string_view field) {
        for (const auto& s : list) {
            if (text::trim(s).empty()) {
                problems.push_back(fmt::format("{} contain a blank entry", field));
                return;
            }
        }
    };
    blanks(tc.preconditions, "preconditions");
    blanks(tc.steps, "steps");
    blanks(tc.assertions, "assertions");
    blanks(tc.precautions, "precautions");
    return problems;
}

nlohmann::json to_json(const TestCase& tc) {
    auto j = five_part(tc);
    j["case_id"] = tc.case_id;
    j["source_fp"] = tc.source_fp;
    return j;
}

TestCase test_case_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("test case must be a JSON object");
    TestCase tc;
    if (j.contains("name")) {
        if (!j["name"].is_string()) throw ConfigError("field 'name' must be a string");
        tc.name = j["name"].get<std::string>();
    }
    auto field = [&](const char* key) { return j.contains(key) ? string_list(j[key], key) : std::vector<std::string>{}; };
    tc.preconditions = field("preconditions");
    tc.steps = field("steps");
    tc.assertions = field("assertions");
    tc.precautions = field("precautions");
    if (j.contains("case_id") && j["case_id"].is_string()) tc.case_id = j["case_id"].get<std::string>();
    if (j.contains("source_fp") && j["source_fp"].is_string()) tc.source_fp = j["source_fp"].get<std::string>();
    return tc;
}

std::string canonical_case_text(const TestCase& tc) {
    return text::canonical_json(five_part(tc));
}

std::string render_case(const TestCase& tc) {
    return fmt::format("Test name: {}\nTest preconditions:\n{}Test steps:\n{}Test assertions:\n{}Precautions:\n{}",
                       tc.name, list_block(tc.preconditions, false), list_block(tc.steps, true),
                       list_block(tc.assertions, false), list_block(tc.precautions, false));
}

std::vector<FewShotExemplar> load_exemplars(const std::filesystem::path& path) {
    auto j = text::read_json(path);
    if (!j.is_array()) throw ConfigError("exemplar file must hold a JSON array: " + path.string());
    std::vector<FewShotExemplar> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& e = j[i];
        if (!e.is_object() || !e.contains("input") || !e["input"].is_string() || !e.contains("output")) {
            throw ConfigError(fmt::format("exemplar {} needs string 'input' and object 'output'", i));
        }
        auto tc = test_case_from_json(e["output"]);
        if (auto p = case_problems(tc); !p.empty()) {
            throw ConfigError(fmt::format("exemplar {} output is not a valid case: {}", i, p.front()));
        }
        out.push_back({e["input"].get<std::string>(), std::move(tc)});
    }
    return out;
}

std::string build_tcg_prompt(const ingest::FunctionalPoint& fp, const std::vector<FewShotExemplar>& exemplars) {
    if (exemplars.empty()) throw ConfigError("few-shot requires exemplars");
    std::string prompt =
        "You write conformance test cases for network protocol implementations.\n"
        "Each input is one normative requirement taken from a protocol specification.\n"
        "Write one test case that checks an implementation against that requirement.\n"
        "A test case has five parts: test name, test preconditions, test steps, test assertions, precautions.\n"
        "Name the protocol roles (client, server, sender, receiver) that perform each step.\n"
        "Reply with a JSON object holding the keys \"name\", \"preconditions\", \"steps\", \"assertions\" "
        "and \"precautions\", following the examples exactly.\n\n";
    for (std::size_t i = 0; i < exemplars.size(); ++i) {
        prompt += fmt::format("### Example {}\nInput:\n{}\nOutput:\n{}\n", i + 1, text::trim(exemplars[i].input),
                              canonical_case_text(exemplars[i].output));
    }
    prompt += fmt::format("### Test input\nInput:\n{}\nOutput:\n", text::trim(fp.paragraph_text));
    return prompt;
}

TestCase parse_case_reply(std::string_view reply) {
    auto tc = parse_json_reply(reply);
    if (!tc) tc = parse_prose(reply);
    if (!tc) throw ReplyError("malformed case: no test case template found in reply", std::string(reply));
    if (auto problems = case_problems(*tc); !problems.empty()) {
        throw ReplyError("malformed case: " + text::join(problems, "; "), std::string(reply));
    }
    return *tc;
}

std::string case_id_for(std::string_view fp_id) {
    return "tc_" + text::sanitize_id(fp_id);
}

TestCase generate_test_case(const ingest::FunctionalPoint& fp, const std::vector<FewShotExemplar>& exemplars,
                            llm::ChatBackend& backend) {
    llm::Transcript t;
    t.user(build_tcg_prompt(fp, exemplars));
    auto reply = backend.complete(t);
    TestCase tc;
    try {
        tc = parse_case_reply(reply);
    } catch (const ReplyError& first) {
        spdlog::info("{}: reply not parseable ({}); asking for the bare template", fp.fp_id, first.what());
        t.assistant(reply).user(
            "Output only the template: a single JSON object with the keys \"name\", \"preconditions\", "
            "\"steps\", \"assertions\" and \"precautions\". Steps and assertions must not be empty.");
        tc = parse_case_reply(backend.complete(t));
    }
    tc.case_id = case_id_for(fp.fp_id);
    tc.source_fp = fp.fp_id;
    return tc;
}

std::string_view to_string(FilterStatus s) {
    switch (s) {
    case FilterStatus::accepted: return "accepted";
    case FilterStatus::rejected: return "rejected";
    case FilterStatus::needs_review: return "needs_review";
    }
    return "rejected";
}

nlohmann::json to_json(const CaseFilterVerdict& v) {
    return {{"case_id", v.case_id}, {"status", to_string(v.status)}, {"reasons", v.reasons}};
}

std::set<std::string> content_words(std::string_view s) {
    std::set<std::string> out;
    for (auto& w : text::word_tokens(s)) {
        if (!stopwords().count(w)) out.insert(std::move(w));
    }
    return out;
}

CaseFilter::CaseFilter(std::vector<std::string> role_lexicon) {
    for (auto& r : role_lexicon) roles_.push_back(text::to_lower(text::trim(r)));
    if (roles_.empty()) throw ConfigError("role lexicon must not be empty");
}

CaseFilterVerdict CaseFilter::filter_case(const ingest::FunctionalPoint& fp, const TestCase& tc) {
    CaseFilterVerdict v{tc.case_id, FilterStatus::accepted, {}};
    if (auto problems = case_problems(tc); !problems.empty()) {
        v.status = FilterStatus::rejected;
        for (auto& p : problems) v.reasons.push_back("invalid case: " + p);
        return v;
    }
    const auto key = dedup_key(tc);

    const auto fp_words = content_words(fp.paragraph_text);
    for (std::size_t i = 0; i < tc.assertions.size(); ++i) {
        const auto words = content_words(tc.assertions[i]);
        const bool shared = std::any_of(words.begin(), words.end(), [&](const auto& w) { return fp_words.count(w); });
        if (!shared) v.reasons.push_back(fmt::format("assertion {} shares no content word with the functional point", i + 1));
    }
    bool role_named = false;
    for (const auto& step : tc.steps) {
        for (const auto& w : text::word_tokens(step)) {
            for (const auto& r : roles_) {
                if (w == r || w == r + "s") role_named = true;
            }
        }
    }
    if (!role_named) v.reasons.emplace_back("steps name no protocol role");

    std::lock_guard lock(mu_);
    if (accepted_.count(key)) {
        v.status = FilterStatus::rejected;
        v.reasons = {"duplicate of an accepted case"};
        return v;
    }
    if (!v.reasons.empty()) {
        v.status = FilterStatus::needs_review;
        return v;
    }
    accepted_.insert(key);
    return v;
}

std::size_t CaseFilter::accepted_count() const {
    std::lock_guard lock(mu_);
    return accepted_.size();
}

ImportResult import_cases(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("case file not found: " + path.string());
    auto j = text::read_json(path);
    if (!j.is_array()) throw ConfigError("case file must hold a JSON array: " + path.string());
    ImportResult result;
    for (std::size_t i = 0; i < j.size(); ++i) {
        try {
            const auto& e = j[i];
            if (!e.is_object()) throw ConfigError("entry is not an object");
            for (const char* required : {"name", "steps", "assertions"}) {
                if (!e.contains(required)) throw ConfigError(fmt::format("missing '{}'", required));
            }
            auto tc = test_case_from_json(e);
            if (auto problems = case_problems(tc); !problems.empty()) throw ConfigError(text::join(problems, "; "));
            tc.case_id = tc.case_id.empty() ? fmt::format("tc_user_{}", i) : text::sanitize_id(tc.case_id);
            tc.source_fp = std::string(kUserImported);
            result.cases.push_back(std::move(tc));
        } catch (const ConfigError& err) {
            result.errors.push_back({i, err.what()});
        }
    }
    return result;
}

} // namespace rfcprobe
