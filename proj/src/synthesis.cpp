#include "rfcprobe/synthesis.hpp"

#include <algorithm>
#include <future>
#include <map>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe {

namespace {

using nlohmann::json;

void warn(std::vector<std::string>* warnings, std::string message) {
    spdlog::warn("{}", message);
    if (warnings) warnings->push_back(std::move(message));
}

std::size_t backtick_run(std::string_view line) {
    std::size_t n = 0;
    while (n < line.size() && line[n] == '`') ++n;
    return n;
}

std::string fence_for(std::string_view body) {
    std::size_t longest = 0, run = 0;
    for (char c : body) {
        run = c == '`' ? run + 1 : 0;
        longest = std::max(longest, run);
    }
    return std::string(std::max<std::size_t>(3, longest + 1), '`');
}

// First JSON value of the wanted kind in the reply: fenced blocks, the whole
// reply, then the outermost bracket pair.
std::optional<json> find_json(std::string_view reply, json::value_t kind) {
    auto accept = [&](std::string_view s) -> std::optional<json> {
        auto j = json::parse(s, nullptr, false);
        if (j.is_discarded() || j.type() != kind) return std::nullopt;
        return j;
    };
    for (const auto& block : fenced_blocks(reply)) {
        if (auto j = accept(block)) return j;
    }
    if (auto j = accept(reply)) return j;
    const char open = kind == json::value_t::array ? '[' : '{';
    const char close = kind == json::value_t::array ? ']' : '}';
    auto a = reply.find(open);
    auto b = reply.rfind(close);
    if (a != std::string_view::npos && b != std::string_view::npos && b > a) return accept(reply.substr(a, b - a + 1));
    return std::nullopt;
}

std::string role_slug(std::string_view role) {
    std::string out;
    for (char c : text::to_lower(text::trim(role))) {
        out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    }
    return out.empty() ? "role" : out;
}

std::string case_block(const TestCase& tc) {
    return fmt::format("Test case {}:\n{}", tc.case_id, render_case(tc));
}

const std::regex& file_header_re() {
    static const std::regex re(R"(^#{2,4}\s*file:\s*(\S+)\s*$)", std::regex::icase);
    return re;
}

} // namespace

std::string synthesis_system_prompt(const SynthesisConfig& cfg) {
    std::string library = cfg.target_library.empty() ? "" : fmt::format(" built on {}", cfg.target_library);
    return fmt::format("You are a protocol test engineer who writes executable {} test programs{} to check "
                       "protocol implementations against their specification.",
                       cfg.language, library);
}

nlohmann::json to_json(const RolePlan& plan) {
    auto arr = json::array();
    for (const auto& inst : plan.instances) {
        arr.push_back({{"role", inst.role},
                       {"index", inst.index},
                       {"operations", inst.operations},
                       {"long_running", inst.long_running}});
    }
    return {{"instances", arr}};
}

nlohmann::json to_json(const Blueprint& bp) {
    auto entries = json::array();
    for (const auto& e : bp.entries) {
        entries.push_back(
            {{"file", e.file}, {"role", e.role}, {"start_delay_ms", e.start_delay_ms}, {"long_running", e.long_running}});
    }
    return {{"version", bp.version}, {"case_id", bp.case_id}, {"entries", entries}};
}

std::string serialize_blueprint(const Blueprint& bp) {
    return text::canonical_json(to_json(bp));
}

bool safe_file_name(std::string_view name) {
    if (name.empty() || name.front() == '.' || name.size() > 200) return false;
    for (char c : name) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-')) return false;
    }
    return name.find("..") == std::string_view::npos;
}

Blueprint parse_blueprint(std::string_view json_text) {
    auto j = json::parse(json_text, nullptr, false);
    if (j.is_discarded()) throw SchemaError("blueprint is not valid JSON");
    if (!j.is_object()) throw SchemaError("blueprint must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (key != "version" && key != "case_id" && key != "entries") {
            throw SchemaError(fmt::format("blueprint has unknown field '{}'", key));
        }
    }
    if (!j.contains("version")) throw SchemaError("blueprint is missing 'version'");
    if (!j["version"].is_number_integer() || j["version"].get<int>() != 1) {
        throw SchemaError("unsupported blueprint version (expected 1)");
    }
    if (!j.contains("entries")) throw SchemaError("blueprint is missing 'entries'");
    if (!j["entries"].is_array() || j["entries"].empty()) throw SchemaError("blueprint 'entries' must be a non-empty list");

    Blueprint bp;
    if (j.contains("case_id")) {
        if (!j["case_id"].is_string()) throw SchemaError("blueprint 'case_id' must be a string");
        bp.case_id = j["case_id"].get<std::string>();
    }
    std::set<std::string> seen;
    for (std::size_t i = 0; i < j["entries"].size(); ++i) {
        const auto& e = j["entries"][i];
        if (!e.is_object()) throw SchemaError(fmt::format("blueprint entry {} must be an object", i));
        for (const auto& [key, _] : e.items()) {
            if (key != "file" && key != "role" && key != "start_delay_ms" && key != "long_running") {
                throw SchemaError(fmt::format("blueprint entry {} has unknown field '{}'", i, key));
            }
        }
        BlueprintEntry entry;
        if (!e.contains("file") || !e["file"].is_string()) {
            throw SchemaError(fmt::format("blueprint entry {} needs a string 'file'", i));
        }
        entry.file = e["file"].get<std::string>();
        if (!safe_file_name(entry.file)) throw SchemaError(fmt::format("blueprint entry {} has unsafe file name '{}'", i, entry.file));
        if (!seen.insert(entry.file).second) throw SchemaError(fmt::format("blueprint lists '{}' twice", entry.file));
        if (e.contains("role")) {
            if (!e["role"].is_string()) throw SchemaError(fmt::format("blueprint entry {} 'role' must be a string", i));
            entry.role = e["role"].get<std::string>();
        }
        if (e.contains("start_delay_ms")) {
            if (!e["start_delay_ms"].is_number_integer() || e["start_delay_ms"].get<long long>() < 0 ||
                e["start_delay_ms"].get<long long>() > 600000) {
                throw SchemaError(fmt::format("blueprint entry {} 'start_delay_ms' must be an integer in [0, 600000]", i));
            }
            entry.start_delay_ms = e["start_delay_ms"].get<int>();
        }
        if (e.contains("long_running")) {
            if (!e["long_running"].is_boolean()) throw SchemaError(fmt::format("blueprint entry {} 'long_running' must be a boolean", i));
            entry.long_running = e["long_running"].get<bool>();
        }
        bp.entries.push_back(std::move(entry));
    }
    return bp;
}

std::vector<std::string> conjunction_lint(const RolePlan& plan) {
    static const std::regex conj(R"(\b(and|then)\b)", std::regex::icase);
    std::vector<std::string> flagged;
    for (const auto& inst : plan.instances) {
        for (const auto& op : inst.operations) {
            if (std::regex_search(op, conj)) flagged.push_back(op);
        }
    }
    return flagged;
}

RolePlan parse_role_plan(std::string_view reply, const SynthesisConfig& cfg) {
    std::optional<json> j = find_json(reply, json::value_t::object);
    json list;
    if (j && j->contains("instances")) list = (*j)["instances"];
    else if (auto arr = find_json(reply, json::value_t::array)) list = *arr;
    else throw ReplyError("decomposition reply holds no instance list", std::string(reply));
    if (!list.is_array() || list.empty()) throw ReplyError("decomposition reply has no instances", std::string(reply));

    RolePlan plan;
    std::map<std::string, int> next_index;
    std::set<std::pair<std::string, int>> seen;
    for (const auto& e : list) {
        if (!e.is_object() || !e.contains("role") || !e["role"].is_string()) {
            throw ReplyError("every instance needs a string 'role'", std::string(reply));
        }
        RoleInstance inst;
        inst.role = text::trim(e["role"].get<std::string>());
        if (inst.role.empty()) throw ReplyError("instance role is empty", std::string(reply));
        const auto key = text::to_lower(inst.role);
        if (e.contains("index") && e["index"].is_number_integer()) inst.index = e["index"].get<int>();
        else inst.index = next_index[key];
        next_index[key] = std::max(next_index[key], inst.index + 1);
        if (!seen.insert({key, inst.index}).second) {
            throw ReplyError(fmt::format("instance {} #{} appears twice", inst.role, inst.index), std::string(reply));
        }
        if (!e.contains("operations") || !e["operations"].is_array()) {
            throw ReplyError(fmt::format("instance {} #{} has no operation list", inst.role, inst.index), std::string(reply));
        }
        for (const auto& op : e["operations"]) {
            if (!op.is_string() || text::trim(op.get<std::string>()).empty()) {
                throw ReplyError("operations must be non-empty strings", std::string(reply));
            }
            inst.operations.push_back(text::trim(op.get<std::string>()));
        }
        if (inst.operations.empty()) {
            throw ReplyError(fmt::format("instance {} #{} has no operations", inst.role, inst.index), std::string(reply));
        }
        if (e.contains("long_running") && e["long_running"].is_boolean()) {
            inst.long_running = e["long_running"].get<bool>();
        } else {
            const auto words = text::word_tokens(inst.role);
            inst.long_running = std::any_of(cfg.long_running_roles.begin(), cfg.long_running_roles.end(),
                                            [&](const std::string& r) {
                                                return std::find(words.begin(), words.end(), text::to_lower(r)) != words.end();
                                            });
        }
        plan.instances.push_back(std::move(inst));
    }
    return plan;
}

std::string file_name_for(std::size_t ordinal, const RoleInstance& instance, const SynthesisConfig& cfg) {
    return fmt::format("sub_{}_{}{}", ordinal, role_slug(instance.role), cfg.extension);
}

std::vector<std::string> fenced_blocks(std::string_view reply) {
    std::vector<std::string> blocks;
    const auto lines = text::split_lines(reply);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto open_line = text::trim(lines[i]);
        const auto fence = backtick_run(open_line);
        if (fence < 3) continue;
        std::string body;
        std::size_t j = i + 1;
        bool closed = false;
        for (; j < lines.size(); ++j) {
            const auto t = text::trim(lines[j]);
            if (backtick_run(t) >= fence && t.find_first_not_of('`') == std::string::npos) {
                closed = true;
                break;
            }
            body += lines[j];
            body += '\n';
        }
        if (!closed) break;
        blocks.push_back(std::move(body));
        i = j;
    }
    return blocks;
}

RolePlan decompose_case(const TestCase& tc, llm::ChatBackend& backend, const SynthesisConfig& cfg,
                        std::vector<std::string>* warnings) {
    llm::Transcript t;
    t.system(synthesis_system_prompt(cfg))
        .user(fmt::format(
            "{}\n"
            "Decompose this test case into subtasks, one per participant role instance.\n"
            "Work out from the preconditions how many instances of each role are needed.\n"
            "For each instance list its operations in execution order. Each operation must be one atomic protocol "
            "action; never join two actions with \"and\" or \"then\".\n"
            "Mark roles that keep running until they are stopped (servers, listeners) with \"long_running\": true.\n"
            "Reply with JSON only:\n"
            "{{\"instances\": [{{\"role\": \"server\", \"index\": 0, \"long_running\": true, "
            "\"operations\": [\"...\"]}}]}}\n",
            case_block(tc)));

    auto reply = backend.complete(t);
    std::optional<RolePlan> plan;
    std::string problem;
    try {
        plan = parse_role_plan(reply, cfg);
        if (auto flagged = conjunction_lint(*plan); !flagged.empty()) {
            problem = fmt::format("These operations are compound: {}. Split each into atomic operations.",
                                  text::join(flagged, " | "));
        }
    } catch (const ReplyError& e) {
        problem = fmt::format("The reply could not be read ({}).", e.what());
    }
    if (problem.empty()) return *plan;

    t.assistant(reply).user(problem + " Reply again with the full JSON object only.");
    auto retry = backend.complete(t);
    RolePlan second;
    try {
        second = parse_role_plan(retry, cfg);
    } catch (const ReplyError& e) {
        throw ReplyError(fmt::format("decomposition failed: {}", e.what()), retry);
    }
    if (auto flagged = conjunction_lint(second); !flagged.empty()) {
        warn(warnings, fmt::format("{}: compound operations kept after re-prompt: {}", tc.case_id, text::join(flagged, " | ")));
    }
    return second;
}

std::string build_subprogram_prompt(const RoleInstance& instance, const TestCase& tc, const RetrievalResult& context,
                                    const SynthesisConfig& cfg) {
    std::string ops;
    for (std::size_t i = 0; i < instance.operations.size(); ++i) ops += fmt::format("{}. {}\n", i + 1, instance.operations[i]);
    std::string prompt = fmt::format(
        "{}\n"
        "Write the {} program for role \"{}\" (instance {}). It must perform exactly these operations, in order:\n{}\n"
        "Runtime contract:\n"
        "- Use only the loopback address 127.0.0.1. The port to use is in the environment variable PORT; extra "
        "ports, if needed, are PORT_BASE .. PORT_BASE+PORT_COUNT-1.\n"
        "- Exit with status 0 only when every step and assertion this role can observe succeeded; otherwise print the "
        "reason to stderr and exit non-zero.\n",
        case_block(tc), cfg.language, instance.role, instance.index, ops);
    if (instance.long_running) {
        prompt += "- This role keeps running until it receives SIGTERM; it must then exit promptly.\n";
    }
    if (!context.empty()) {
        prompt += "\nReference material from the implementation library:\n" + render_context(context);
    }
    prompt += fmt::format("\nReply with the complete program in one fenced code block.\n");
    return prompt;
}

Subprogram generate_subprogram(const RoleInstance& instance, std::size_t ordinal, const TestCase& tc,
                               const RetrievalResult& context, llm::ChatBackend& backend, const SynthesisConfig& cfg,
                               std::vector<std::string>* warnings) {
    llm::Transcript t;
    t.system(synthesis_system_prompt(cfg)).user(build_subprogram_prompt(instance, tc, context, cfg));
    auto reply = backend.complete(t);
    auto blocks = fenced_blocks(reply);
    auto usable = [](const std::vector<std::string>& b) { return !b.empty() && !text::trim(b.front()).empty(); };
    if (!usable(blocks)) {
        t.assistant(reply).user("Reply with the complete program inside a single fenced code block and nothing else.");
        reply = backend.complete(t);
        blocks = fenced_blocks(reply);
        if (!usable(blocks)) throw ReplyError(fmt::format("no program produced for {} #{}", instance.role, instance.index), reply);
    }
    Subprogram sp{instance.role, instance.index, file_name_for(ordinal, instance, cfg), blocks.front(), instance.long_running};
    if (blocks.size() > 1) {
        warn(warnings, fmt::format("{}: reply for {} had {} code blocks; the first was used", tc.case_id, sp.file_name, blocks.size()));
    }
    return sp;
}

bool is_permutation_of(const std::vector<std::string>& order, const std::vector<std::string>& names) {
    if (order.size() != names.size()) return false;
    std::multiset<std::string> a(order.begin(), order.end()), b(names.begin(), names.end());
    return a == b && std::set<std::string>(order.begin(), order.end()).size() == order.size();
}

std::vector<std::string> fallback_order(const std::vector<Subprogram>& subprograms) {
    std::vector<std::string> out;
    for (const auto& sp : subprograms)
        if (sp.long_running) out.push_back(sp.file_name);
    for (const auto& sp : subprograms)
        if (!sp.long_running) out.push_back(sp.file_name);
    return out;
}

Ordering order_subprograms(const RolePlan& plan, const std::vector<Subprogram>& subprograms, const TestCase& tc,
                           llm::ChatBackend& backend) {
    std::vector<std::string> names;
    std::string listing;
    for (std::size_t i = 0; i < subprograms.size(); ++i) {
        const auto& sp = subprograms[i];
        names.push_back(sp.file_name);
        listing += fmt::format("- {} (role {}, instance {}{})", sp.file_name, sp.role, sp.instance_index,
                               sp.long_running ? ", long-running" : "");
        if (i < plan.instances.size()) listing += ": " + text::join(plan.instances[i].operations, "; ");
        listing += '\n';
    }
    llm::Transcript t;
    t.system("You plan the startup order of cooperating test programs.")
        .user(fmt::format("{}\nThe test is carried out by these programs:\n{}\n"
                          "Infer from the test steps the order in which the programs must be started. Programs that "
                          "must already be listening go first.\n"
                          "Reply with a JSON array of the file names in startup order, each exactly once.\n",
                          case_block(tc), listing));
    for (int attempt = 0; attempt < 2; ++attempt) {
        auto reply = backend.complete(t);
        std::vector<std::string> order;
        if (auto j = find_json(reply, json::value_t::array)) {
            for (const auto& e : *j) {
                if (e.is_string()) order.push_back(e.get<std::string>());
            }
        }
        if (is_permutation_of(order, names)) return {order, false};
        if (attempt == 0) {
            t.assistant(reply).user(fmt::format("That is not an ordering of exactly these files: {}. Reply with the JSON "
                                                "array only.",
                                                text::join(names, ", ")));
        }
    }
    spdlog::warn("{}: ordering reply invalid twice; using the long-running-first fallback", tc.case_id);
    return {fallback_order(subprograms), true};
}

Blueprint integrate_blueprint(const std::string& case_id, const std::vector<std::string>& order,
                              const std::vector<Subprogram>& subprograms, int gap_ms) {
    std::vector<std::string> names;
    for (const auto& sp : subprograms) names.push_back(sp.file_name);
    if (!is_permutation_of(order, names)) throw ConfigError("blueprint order is not a permutation of the subprograms");
    Blueprint bp;
    bp.case_id = case_id;
    bool previous_long_running = false;
    for (const auto& file : order) {
        const auto& sp = *std::find_if(subprograms.begin(), subprograms.end(),
                                       [&](const Subprogram& s) { return s.file_name == file; });
        bp.entries.push_back({file, sp.role, previous_long_running ? gap_ms : 0, sp.long_running});
        previous_long_running = sp.long_running;
    }
    return bp;
}

Artifact synthesize(const TestCase& tc, const RetrievalResult& context, llm::ChatBackend& backend,
                    const SynthesisConfig& cfg) {
    Artifact art;
    const auto plan = decompose_case(tc, backend, cfg, &art.warnings);

    std::vector<std::vector<std::string>> per_warnings(plan.instances.size());
    if (cfg.parallel_subprograms && plan.instances.size() > 1) {
        std::vector<std::future<Subprogram>> futures;
        for (std::size_t i = 0; i < plan.instances.size(); ++i) {
            futures.push_back(std::async(std::launch::async, [&, i] {
                return generate_subprogram(plan.instances[i], i, tc, context, backend, cfg, &per_warnings[i]);
            }));
        }
        for (auto& f : futures) art.subprograms.push_back(f.get());
    } else {
        for (std::size_t i = 0; i < plan.instances.size(); ++i) {
            art.subprograms.push_back(generate_subprogram(plan.instances[i], i, tc, context, backend, cfg, &per_warnings[i]));
        }
    }
    for (auto& w : per_warnings) art.warnings.insert(art.warnings.end(), w.begin(), w.end());

    auto ordering = order_subprograms(plan, art.subprograms, tc, backend);
    art.order_fallback = ordering.fallback_used;
    if (ordering.fallback_used) art.warnings.push_back("startup order fell back to long-running first");
    art.blueprint_json = serialize_blueprint(
        integrate_blueprint(tc.case_id, ordering.files, art.subprograms, cfg.long_running_gap_ms));
    return art;
}

std::string render_artifact(const Artifact& artifact) {
    std::string out;
    auto block = [&](const std::string& name, const std::string& body) {
        const auto fence = fence_for(body);
        out += fmt::format("### file: {}\n{}\n{}", name, fence, body);
        if (!body.empty() && body.back() != '\n') out += '\n';
        out += fence + "\n\n";
    };
    for (const auto& sp : artifact.subprograms) block(sp.file_name, sp.source_text);
    block("blueprint.json", artifact.blueprint_json);
    return out;
}

Artifact parse_artifact_bundle(std::string_view reply, const Artifact* previous, const std::string& case_id) {
    std::map<std::string, std::string> files;
    std::vector<std::string> file_order;
    const auto lines = text::split_lines(reply);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::smatch m;
        const auto trimmed = text::trim(lines[i]);
        if (!std::regex_match(trimmed, m, file_header_re())) continue;
        const auto name = m[1].str();
        std::size_t j = i + 1;
        while (j < lines.size() && text::trim(lines[j]).empty()) ++j;
        if (j >= lines.size()) break;
        std::string rest;
        for (std::size_t k = j; k < lines.size(); ++k) rest += lines[k] + "\n";
        auto blocks = fenced_blocks(rest);
        if (blocks.empty() || backtick_run(text::trim(lines[j])) < 3) continue;
        if (!files.count(name)) file_order.push_back(name);
        files[name] = blocks.front();
        // Skip past the block just read.
        const auto fence = backtick_run(text::trim(lines[j]));
        std::size_t k = j + 1;
        while (k < lines.size()) {
            const auto t = text::trim(lines[k]);
            if (backtick_run(t) >= fence && t.find_first_not_of('`') == std::string::npos) break;
            ++k;
        }
        i = k;
    }

    Artifact art;
    std::optional<std::string> bp_text;
    if (auto it = files.find("blueprint.json"); it != files.end()) bp_text = it->second;
    else if (previous) bp_text = previous->blueprint_json;

    std::map<std::string, Subprogram> by_name;
    if (previous) {
        for (const auto& sp : previous->subprograms) by_name[sp.file_name] = sp;
    }
    bool changed = false;
    for (const auto& name : file_order) {
        if (name == "blueprint.json") continue;
        if (!safe_file_name(name)) {
            art.warnings.push_back(fmt::format("ignored file with unsafe name '{}'", name));
            continue;
        }
        auto& sp = by_name[name];
        sp.file_name = name;
        sp.source_text = files[name];
        changed = true;
    }
    if (!changed && !files.count("blueprint.json")) throw ReplyError("reply contains no files in the bundle format", std::string(reply));

    // Roles and flags come from the blueprint when it parses; otherwise from the name.
    std::map<std::string, BlueprintEntry> entries;
    if (bp_text) {
        try {
            for (auto& e : parse_blueprint(*bp_text).entries) entries[e.file] = e;
        } catch (const SchemaError&) {
        }
    }
    static const std::regex name_re(R"(^sub_(\d+)_([A-Za-z0-9_]+)\.\w+$)");
    for (auto& [name, sp] : by_name) {
        if (auto it = entries.find(name); it != entries.end()) {
            sp.role = it->second.role;
            sp.long_running = it->second.long_running;
        } else if (sp.role.empty()) {
            std::smatch m;
            sp.role = std::regex_match(name, m, name_re) ? m[2].str() : "unknown";
        }
        art.subprograms.push_back(sp);
    }
    if (art.subprograms.empty()) throw ReplyError("bundle holds no subprograms", std::string(reply));
    if (bp_text) {
        art.blueprint_json = *bp_text;
    } else {
        art.blueprint_json = serialize_blueprint(integrate_blueprint(case_id, fallback_order(art.subprograms), art.subprograms));
        art.warnings.push_back("bundle had no blueprint; used the long-running-first order");
    }
    return art;
}

void write_artifact(const Artifact& artifact, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& sp : artifact.subprograms) {
        if (!safe_file_name(sp.file_name)) throw ConfigError("unsafe subprogram file name: " + sp.file_name);
        text::write_file(dir / sp.file_name, sp.source_text);
    }
    text::write_file(dir / "blueprint.json", artifact.blueprint_json);
}

} // namespace rfcprobe
