#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rfcprobe/doc_ingest.hpp"
#include "rfcprobe/error.hpp"
#include "rfcprobe/memory.hpp"
#include "rfcprobe/pipeline.hpp"
#include "rfcprobe/refine.hpp"
#include "rfcprobe/runner.hpp"
#include "rfcprobe/synthesis.hpp"
#include "rfcprobe/text.hpp"
#include "rfcprobe/verdict.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using nlohmann::json;
using namespace rfcprobe;

// JSON crosses the boundary as text; the Python wrapper decodes it.
namespace {

std::string inventory(const std::string& content, const std::string& doc_id, bool markdown,
                      std::optional<bool> rfc2119) {
    auto doc = markdown ? ingest::parse_markdown(content, doc_id) : ingest::parse_plain_text(content, doc_id);
    if (rfc2119) doc.rfc2119 = *rfc2119;
    return ingest::inventory_json(doc, ingest::KeywordSet::rfc2119_default()).dump();
}

double pass_at(const std::vector<std::vector<bool>>& rows, int k) {
    EvalMatrix m;
    m.trials = rows.empty() ? 0 : static_cast<int>(rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) m.case_ids.push_back(std::to_string(i));
    m.success = rows;
    return pass_at_k(m, k);
}

std::string filter(const std::string& reports_json, const std::vector<std::string>& terms) {
    std::vector<ConformanceReport> reports;
    for (const auto& r : json::parse(reports_json)) reports.push_back(conformance_report_from_json(r));
    auto parts = filter_reports(std::move(reports), terms);
    json out = {{"auto_filtered", json::array()}, {"needs_manual_review", json::array()}};
    for (const auto& r : parts.auto_filtered) out["auto_filtered"].push_back(to_json(r));
    for (const auto& r : parts.needs_review) out["needs_manual_review"].push_back(to_json(r));
    return out.dump();
}

std::string debug_prompt(const std::string& history_json, int window, const std::string& initial,
                         const std::string& case_text, const std::string& debug, const std::string& next_context) {
    std::vector<IterationRecord> history;
    int i = 0;
    for (const auto& r : json::parse(history_json)) {
        IterationRecord rec;
        rec.index = r.value("index", i);
        rec.retrieved = r.value("retrieved", "");
        rec.output = r.value("output", "");
        rec.feedback = r.value("feedback", "");
        history.push_back(std::move(rec));
        ++i;
    }
    return build_debug_prompt(history, window, initial, case_text, debug, next_context);
}

std::string run_blueprint(const std::string& blueprint, const fs::path& workspace, int timeout_ms, int grace_ms,
                          const std::map<std::string, std::string>& env, const std::string& ports) {
    SandboxConfig sb;
    sb.timeout_ms = timeout_ms;
    sb.grace_ms = grace_ms;
    sb.extra_env = env;
    if (!ports.empty()) sb.ports = PortRange::parse(ports);
    py::gil_scoped_release release;
    return to_json(execute_blueprint_text(blueprint, workspace, sb)).dump();
}

std::string index_library(const fs::path& store_dir, const fs::path& library) {
    MemoryStore store(store_dir);
    LocalEmbedder emb;
    const auto st = store.index_library(library, emb);
    return json{{"files_indexed", st.files_indexed},
                {"files_skipped", st.files_skipped},
                {"items", st.items},
                {"experiences_kept", st.experiences_kept}}
        .dump();
}

std::string retrieve(const fs::path& store_dir, const std::string& query, std::size_t top_k) {
    MemoryStore store(store_dir);
    LocalEmbedder emb;
    return to_json(store.retrieve(query, top_k, emb)).dump();
}

int run_arm(const fs::path& config, std::optional<fs::path> workspace, const std::string& arm, bool force) {
    auto cfg = PipelineConfig::load(config);
    if (workspace) cfg.workspace = *workspace;
    Pipeline p(cfg);
    py::gil_scoped_release release;
    if (cfg.library) p.build_index();
    return p.run_arm(arm_settings(arm, cfg.refine), force);
}

} // namespace

PYBIND11_MODULE(_rfcprobe, m) {
    m.doc() = "rfcprobe core bindings";

    // translators run newest first, so the base class goes in first
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<SchemaError>(m, "SchemaError", PyExc_ValueError);
    py::register_exception<DegenerateInput>(m, "DegenerateInput", PyExc_ValueError);

    m.def("inventory", &inventory, py::arg("content"), py::arg("doc_id") = "doc", py::arg("markdown") = false,
          py::arg("rfc2119") = py::none(), "Document inventory as JSON text.");
    m.def("pass_at_k", &pass_at, py::arg("matrix"), py::arg("k"));
    m.def("filter_reports", &filter, py::arg("reports_json"), py::arg("terms"));
    m.def("default_filter_terms", &default_filter_terms);
    m.def("build_debug_prompt", &debug_prompt, py::arg("history_json"), py::arg("window"), py::arg("initial_prompt"),
          py::arg("case_text"), py::arg("debug_prompt"), py::arg("next_context"));
    m.def(
        "parse_blueprint", [](const std::string& text) { return to_json(parse_blueprint(text)).dump(); },
        py::arg("text"));
    m.def("run_blueprint", &run_blueprint, py::arg("blueprint"), py::arg("workspace"), py::arg("timeout_ms") = 30000,
          py::arg("grace_ms") = 3000, py::arg("env") = std::map<std::string, std::string>{}, py::arg("ports") = "");
    m.def("index_library", &index_library, py::arg("store_dir"), py::arg("library"));
    m.def("retrieve", &retrieve, py::arg("store_dir"), py::arg("query"), py::arg("top_k") = 4);
    m.def("run_arm", &run_arm, py::arg("config"), py::arg("workspace") = py::none(), py::arg("arm") = "full",
          py::arg("force") = false);
    m.def(
        "aggregate_report",
        [](const fs::path& arm_dir) { return aggregate_report(arm_dir, default_filter_terms()).dump(); },
        py::arg("arm_dir"));
    m.attr("__version__") = "0.1.0";
}
