#include "rfcprobe/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <regex>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "rfcprobe/error.hpp"
#include "rfcprobe/text.hpp"

namespace rfcprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void only_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(fmt::format("{} must be an object", where));
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw ConfigError(fmt::format("unknown key '{}' in {}", key, where));
    }
}

template <typename T>
T get_as(const json& j, const char* key, const char* where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(fmt::format("bad value for '{}' in {}", key, where));
    }
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

BackendSettings backend_from_json(const json& j, const fs::path& base, const char* where) {
    only_keys(j, where,
              {"kind", "cache_dir", "endpoint", "model", "timeout_seconds", "max_in_flight", "temperature", "top_p",
               "max_output_tokens"});
    BackendSettings b;
    if (j.contains("kind")) b.kind = get_as<std::string>(j, "kind", where);
    if (j.contains("cache_dir")) b.cache_dir = resolve(base, get_as<std::string>(j, "cache_dir", where));
    if (j.contains("endpoint")) b.live.endpoint = get_as<std::string>(j, "endpoint", where);
    if (j.contains("model")) b.live.model = get_as<std::string>(j, "model", where);
    if (j.contains("timeout_seconds")) b.live.timeout_seconds = get_as<int>(j, "timeout_seconds", where);
    if (j.contains("max_in_flight")) b.live.max_in_flight = get_as<int>(j, "max_in_flight", where);
    if (j.contains("temperature")) b.sampling.temperature = get_as<double>(j, "temperature", where);
    if (j.contains("top_p")) b.sampling.top_p = get_as<double>(j, "top_p", where);
    if (j.contains("max_output_tokens")) b.sampling.max_output_tokens = get_as<int>(j, "max_output_tokens", where);
    b.live = llm::LiveConfig::from_env(b.live);
    return b;
}

void validate_backend(const BackendSettings& b, const char* where) {
    if (b.kind != "live" && b.kind != "record" && b.kind != "replay")
        throw ConfigError(fmt::format("{}: kind must be live, record or replay", where));
    if (b.kind != "live" && b.cache_dir.empty()) throw ConfigError(fmt::format("{}: {} needs cache_dir", where, b.kind));
    if (b.kind == "replay" && !fs::is_directory(b.cache_dir))
        throw ConfigError(fmt::format("{}: replay cache not found: {}", where, b.cache_dir.string()));
    b.sampling.validate();
}

std::shared_ptr<llm::ChatBackend> make_backend(const BackendSettings& b, int trial) {
    const auto dir = b.cache_dir / ("trial_" + std::to_string(trial));
    std::shared_ptr<llm::ChatBackend> out;
    if (b.kind == "replay") out = std::make_shared<llm::ReplayBackend>(dir);
    else if (b.kind == "record") out = std::make_shared<llm::RecordBackend>(std::make_shared<llm::LiveBackend>(b.live), dir);
    else out = std::make_shared<llm::LiveBackend>(b.live);
    out->set_sampling(b.sampling);
    return out;
}

void run_parallel(std::size_t count, int jobs, const std::function<void(std::size_t, int)>& work) {
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(count)));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) work(i, 0);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int slot = 0; slot < workers; ++slot)
        pool.emplace_back([&, slot] {
            for (std::size_t i = next++; i < count; i = next++) work(i, slot);
        });
    for (auto& t : pool) t.join();
}

std::vector<fs::path> sorted_dirs(const fs::path& dir, const std::string& prefix) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && e.path().filename().string().rfind(prefix, 0) == 0) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

json cases_json(const std::vector<TestCase>& cases) {
    json arr = json::array();
    for (const auto& tc : cases) arr.push_back(to_json(tc));
    return arr;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

} // namespace

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
    const char* where = "pipeline config";
    only_keys(j, where,
              {"workspace", "documents", "keywords_file", "rfc2119", "exemplars", "cases", "backend", "judge_backend",
               "store", "sandbox", "synthesis", "refine", "filter_terms", "experiment", "trials", "jobs",
               "learn_experience"});
    PipelineConfig c;
    if (j.contains("workspace")) c.workspace = resolve(base_dir, get_as<std::string>(j, "workspace", where));
    else c.workspace = base_dir / "workspace";
    if (j.contains("documents"))
        for (const auto& d : get_as<std::vector<std::string>>(j, "documents", where)) c.documents.push_back(resolve(base_dir, d));
    if (j.contains("keywords_file")) c.keywords_file = resolve(base_dir, get_as<std::string>(j, "keywords_file", where));
    if (j.contains("rfc2119")) c.force_rfc2119 = get_as<bool>(j, "rfc2119", where);
    if (j.contains("exemplars")) c.exemplars = resolve(base_dir, get_as<std::string>(j, "exemplars", where));
    if (j.contains("cases")) c.cases_file = resolve(base_dir, get_as<std::string>(j, "cases", where));
    c.backend = backend_from_json(j.value("backend", json::object()), base_dir, "backend");
    if (j.contains("judge_backend")) c.judge_backend = backend_from_json(j["judge_backend"], base_dir, "judge_backend");

    const json store = j.value("store", json::object());
    only_keys(store, "store", {"dir", "library", "embedder", "top_k"});
    if (store.contains("dir")) c.store_dir = resolve(base_dir, get_as<std::string>(store, "dir", "store"));
    if (store.contains("library")) c.library = resolve(base_dir, get_as<std::string>(store, "library", "store"));
    if (store.contains("embedder")) c.embedder = get_as<std::string>(store, "embedder", "store");
    if (store.contains("top_k")) c.top_k = get_as<std::size_t>(store, "top_k", "store");

    const json sb = j.value("sandbox", json::object());
    only_keys(sb, "sandbox", {"timeout_ms", "grace_ms", "log_cap", "ports", "env", "env_allowlist", "launch"});
    if (sb.contains("timeout_ms")) c.sandbox.timeout_ms = get_as<int>(sb, "timeout_ms", "sandbox");
    if (sb.contains("grace_ms")) c.sandbox.grace_ms = get_as<int>(sb, "grace_ms", "sandbox");
    if (sb.contains("log_cap")) c.sandbox.log_cap = get_as<std::size_t>(sb, "log_cap", "sandbox");
    if (sb.contains("ports")) c.sandbox.ports = PortRange::parse(get_as<std::string>(sb, "ports", "sandbox"));
    if (sb.contains("env")) c.sandbox.extra_env = get_as<std::map<std::string, std::string>>(sb, "env", "sandbox");
    if (sb.contains("env_allowlist"))
        c.sandbox.env_allowlist = get_as<std::vector<std::string>>(sb, "env_allowlist", "sandbox");
    if (sb.contains("launch"))
        for (const auto& [ext, argv] : get_as<std::map<std::string, std::vector<std::string>>>(sb, "launch", "sandbox"))
            c.sandbox.launch[ext] = argv;

    const json syn = j.value("synthesis", json::object());
    only_keys(syn, "synthesis", {"language", "extension", "target_library", "parallel_subprograms", "long_running_gap_ms"});
    if (syn.contains("language")) c.synthesis.language = get_as<std::string>(syn, "language", "synthesis");
    if (syn.contains("extension")) c.synthesis.extension = get_as<std::string>(syn, "extension", "synthesis");
    if (syn.contains("target_library")) c.synthesis.target_library = get_as<std::string>(syn, "target_library", "synthesis");
    if (syn.contains("long_running_gap_ms"))
        c.synthesis.long_running_gap_ms = get_as<int>(syn, "long_running_gap_ms", "synthesis");
    if (syn.contains("parallel_subprograms"))
        c.synthesis.parallel_subprograms = get_as<bool>(syn, "parallel_subprograms", "synthesis");

    const json rf = j.value("refine", json::object());
    only_keys(rf, "refine", {"max_steps", "window", "initial_prompt", "debug_prompt", "feedback_log_tail"});
    if (rf.contains("max_steps")) c.refine.max_steps = get_as<int>(rf, "max_steps", "refine");
    if (rf.contains("window")) c.refine.window = get_as<int>(rf, "window", "refine");
    if (rf.contains("initial_prompt")) c.refine.initial_prompt = get_as<std::string>(rf, "initial_prompt", "refine");
    if (rf.contains("debug_prompt")) c.refine.debug_prompt = get_as<std::string>(rf, "debug_prompt", "refine");
    if (rf.contains("feedback_log_tail")) c.refine.feedback_log_tail = get_as<std::size_t>(rf, "feedback_log_tail", "refine");

    if (j.contains("filter_terms")) c.filter_terms = get_as<std::vector<std::string>>(j, "filter_terms", where);
    const json ex = j.value("experiment", json::object());
    only_keys(ex, "experiment", {"s_max", "k"});
    if (ex.contains("s_max")) c.s_max_grid = get_as<std::vector<int>>(ex, "s_max", "experiment");
    if (ex.contains("k")) c.k_grid = get_as<std::vector<int>>(ex, "k", "experiment");
    if (j.contains("trials")) c.trials = get_as<int>(j, "trials", where);
    if (j.contains("jobs")) c.jobs = get_as<int>(j, "jobs", where);
    if (j.contains("learn_experience")) c.learn_experience = get_as<bool>(j, "learn_experience", where);
    return c;
}

PipelineConfig PipelineConfig::load(const fs::path& file) {
    if (!fs::is_regular_file(file)) throw ConfigError("config file not found: " + file.string());
    json j;
    try {
        j = text::read_json(file);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return from_json(j, fs::absolute(file).parent_path());
}

void PipelineConfig::validate() const {
    for (const auto& d : documents)
        if (!fs::is_regular_file(d)) throw ConfigError("document not found: " + d.string());
    if (keywords_file && !fs::is_regular_file(*keywords_file))
        throw ConfigError("keyword file not found: " + keywords_file->string());
    if (exemplars && !fs::is_regular_file(*exemplars)) throw ConfigError("exemplar file not found: " + exemplars->string());
    if (cases_file && !fs::is_regular_file(*cases_file)) throw ConfigError("case file not found: " + cases_file->string());
    if (library && !fs::is_directory(*library)) throw ConfigError("library directory not found: " + library->string());
    const auto store = store_path();
    if (fs::exists(store) && !fs::is_directory(store))
        throw ConfigError("store path is not a directory: " + store.string());
    for (auto p = fs::absolute(store).parent_path(); !p.empty(); p = p.parent_path()) {
        if (!fs::exists(p)) continue;
        if (!fs::is_directory(p)) throw ConfigError("store path lies under a file: " + store.string());
        break;
    }
    if (embedder != "local" && embedder != "remote") throw ConfigError("embedder must be local or remote");
    if (top_k < 1) throw ConfigError("top_k must be at least 1");
    validate_backend(backend, "backend");
    if (judge_backend) validate_backend(*judge_backend, "judge_backend");
    sandbox.validate();
    refine.validate();
    if (synthesis.long_running_gap_ms < 0 || synthesis.long_running_gap_ms > 600000)
        throw ConfigError("long_running_gap_ms must be within 0..600000");
    if (s_max_grid.empty() || k_grid.empty()) throw ConfigError("experiment grid is empty");
    for (int v : s_max_grid)
        if (v < 1) throw ConfigError("S_max values must be at least 1");
    for (int v : k_grid)
        if (v < 1) throw ConfigError("k values must be at least 1");
    if (trials < 1) throw ConfigError("trials must be at least 1");
    if (jobs < 1) throw ConfigError("jobs must be at least 1");
    if (jobs > sandbox.ports.count()) throw ConfigError("jobs exceed the number of sandbox ports");
}

ArmSettings arm_settings(const std::string& arm, const RefineConfig& base) {
    if (arm == "full") return {"full", base.max_steps, false};
    if (arm == "no_rag") return {"no_rag", base.max_steps, true};
    if (arm == "no_refine") return {"no_refine", 1, false};
    if (arm == "baseline") return {"baseline", 1, true};
    throw ConfigError("unknown arm: " + arm);
}

std::string doc_id_of(const TestCase& tc) {
    static const std::regex fp_re(R"(^(.+)-s[^-]*-p\d+$)");
    std::smatch m;
    if (std::regex_match(tc.source_fp, m, fp_re)) return m[1].str();
    return std::string(kUserImported);
}

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) { config_.validate(); }

void Pipeline::set_backend_factory(BackendFactory factory) {
    std::lock_guard lock(mu_);
    factory_ = std::move(factory);
    backends_.clear();
    judges_.clear();
}

std::shared_ptr<llm::ChatBackend> Pipeline::backend_for(int trial) {
    std::lock_guard lock(mu_);
    if (backends_.size() <= static_cast<std::size_t>(trial)) backends_.resize(trial + 1);
    auto& b = backends_[trial];
    if (!b) b = factory_ ? factory_(trial) : make_backend(config_.backend, trial);
    return b;
}

std::shared_ptr<llm::ChatBackend> Pipeline::judge_for(int trial) {
    if (factory_ || !config_.judge_backend) return backend_for(trial);
    std::lock_guard lock(mu_);
    if (judges_.size() <= static_cast<std::size_t>(trial)) judges_.resize(trial + 1);
    auto& b = judges_[trial];
    if (!b) b = make_backend(*config_.judge_backend, trial);
    return b;
}

std::size_t Pipeline::backend_calls() const {
    std::lock_guard lock(mu_);
    std::size_t n = 0;
    for (const auto& b : backends_)
        if (b) n += b->call_count();
    for (const auto& b : judges_)
        if (b) n += b->call_count();
    return n;
}

Retriever Pipeline::retriever(bool frozen) {
    std::lock_guard lock(mu_);
    if (!store_) {
        store_ = std::make_shared<MemoryStore>(config_.store_path());
        embedder_ = std::shared_ptr<const Embedder>(make_embedder(config_.embedder));
    }
    if (frozen || store_->size() == 0) return Retriever{};
    return Retriever(store_, embedder_, config_.top_k);
}

fs::path Pipeline::arm_dir(const std::string& arm) const { return config_.workspace / "runs" / arm; }

fs::path Pipeline::case_dir(const std::string& arm, int trial, const std::string& case_id) const {
    return arm_dir(arm) / ("trial_" + std::to_string(trial)) / text::sanitize_id(case_id);
}

std::vector<ingest::FunctionalPoint> Pipeline::ingest() {
    if (config_.documents.empty()) throw ConfigError("no documents configured");
    const auto kw = config_.keywords_file ? ingest::KeywordSet::from_file(*config_.keywords_file)
                                          : ingest::KeywordSet::rfc2119_default();
    std::vector<ingest::FunctionalPoint> out;
    for (const auto& path : config_.documents) {
        const auto doc = ingest::load_document(path, config_.force_rfc2119);
        const auto inv = ingest::inventory_json(doc, kw);
        text::write_json(config_.workspace / "inventory" / (text::sanitize_id(doc.doc_id) + ".json"), inv);
        for (const auto& fp : inv["functional_points"]) out.push_back(ingest::functional_point_from_json(fp));
        spdlog::info("{}: {} functional points", doc.doc_id, inv["functional_points"].size());
    }
    return out;
}

std::vector<TestCase> Pipeline::generate_cases() {
    if (!config_.exemplars) throw ConfigError("case generation needs an exemplar file");
    const auto exemplars = load_exemplars(*config_.exemplars);
    std::vector<fs::path> files;
    if (fs::is_directory(config_.workspace / "inventory"))
        for (const auto& e : fs::directory_iterator(config_.workspace / "inventory"))
            if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<ingest::FunctionalPoint> fps;
    for (const auto& f : files) {
        const auto inv = text::read_json(f);
        for (const auto& fp : inv.at("functional_points")) fps.push_back(ingest::functional_point_from_json(fp));
    }
    if (fps.empty()) throw ConfigError("no functional points; run ingest first");

    auto backend = backend_for(0);
    CaseFilter filter;
    std::vector<TestCase> accepted, review;
    json log = json::array();
    for (const auto& fp : fps) {
        try {
            const auto tc = generate_test_case(fp, exemplars, *backend);
            const auto verdict = filter.filter_case(fp, tc);
            log.push_back(to_json(verdict));
            if (verdict.status == FilterStatus::accepted) accepted.push_back(tc);
            else if (verdict.status == FilterStatus::needs_review) review.push_back(tc);
        } catch (const ReplyError& e) {
            log.push_back({{"case_id", case_id_for(fp.fp_id)}, {"status", "generation_failed"}, {"reasons", {e.what()}}});
        }
    }
    const auto dir = config_.workspace / "cases";
    text::write_json(dir / "cases.json", cases_json(accepted));
    text::write_json(dir / "needs_review.json", cases_json(review));
    text::write_json(dir / "filter_log.json", log);
    return accepted;
}

IndexStats Pipeline::build_index() {
    if (!config_.library) throw ConfigError("no library directory configured");
    retriever(true);
    std::lock_guard lock(mu_);
    return store_->index_library(*config_.library, *embedder_);
}

Artifact Pipeline::synthesize_case(const TestCase& tc, const fs::path& out_dir) {
    const auto problems = case_problems(tc);
    if (!problems.empty()) throw ConfigError("invalid test case " + tc.case_id + ": " + problems.front());
    const auto r = retriever(false);
    const auto context = r.retrieve(config_.refine.initial_prompt + "\n\n" + render_case(tc));
    auto art = synthesize(tc, context, *backend_for(0), config_.synthesis);
    write_artifact(art, out_dir);
    return art;
}

std::vector<TestCase> Pipeline::load_cases() const {
    if (config_.cases_file) {
        auto res = import_cases(*config_.cases_file);
        for (const auto& e : res.errors) spdlog::warn("case file entry {} skipped: {}", e.index, e.message);
        std::lock_guard lock(mu_);
        for (const auto& e : text::read_json(*config_.cases_file))
            if (e.is_object() && e.contains("case_id") && e["case_id"].is_string() && e.contains("doc_id") &&
                e["doc_id"].is_string())
                imported_docs_[e["case_id"].get<std::string>()] = e["doc_id"].get<std::string>();
        return res.cases;
    }
    const auto file = config_.workspace / "cases" / "cases.json";
    if (!fs::is_regular_file(file)) throw ConfigError("no test cases; run gen-cases or configure a case file");
    std::vector<TestCase> out;
    for (const auto& j : text::read_json(file)) out.push_back(test_case_from_json(j));
    return out;
}

CaseRun Pipeline::test_case(const TestCase& tc, const ArmSettings& arm, int trial, bool force, int slot) {
    CaseRun run;
    run.test_case = tc;
    {
        std::lock_guard lock(mu_);
        auto it = imported_docs_.find(tc.case_id);
        run.doc_id = it == imported_docs_.end() ? doc_id_of(tc) : it->second;
    }
    run.trial = trial;
    const auto dir = case_dir(arm.name, trial, tc.case_id);
    if (!force && fs::is_regular_file(dir / "report.json") && fs::is_regular_file(dir / "outcome.json")) {
        run.outcome = refine_outcome_from_json(text::read_json(dir / "outcome.json"));
        run.report = conformance_report_from_json(text::read_json(dir / "report.json"));
        run.cached = true;
        return run;
    }
    fs::remove_all(dir);
    fs::create_directories(dir);
    try {
        SandboxConfig sb = config_.sandbox;
        sb.ports = sb.ports.slice(slot, config_.jobs);
        RunnerPlatform platform(dir / "work", sb);
        RefineConfig rc = config_.refine;
        rc.max_steps = arm.max_steps;
        auto backend = backend_for(trial);
        const auto outcome = refine_loop(tc, retriever(arm.frozen_store), *backend, platform, rc, config_.synthesis);
        run.outcome = outcome;
        text::write_json(dir / "outcome.json", to_json(outcome));
        if (!outcome.error.empty()) throw BackendError(outcome.error);

        const auto judgment = judge_assertions(tc, outcome, *judge_for(trial));
        text::write_json(dir / "judge.json", {{"verdict", std::string(to_string(judgment.verdict))},
                                              {"rationale", judgment.rationale},
                                              {"calls", judgment.calls}});
        auto report = make_report(tc, run.doc_id, trial, outcome, judgment);
        if (config_.learn_experience && !arm.frozen_store && !outcome.history.empty()) {
            const auto summary = summarize_experience(tc, outcome.history, *backend, rc.initial_prompt);
            std::lock_guard lock(mu_);
            remember_experience(*store_, *embedder_, summary);
        }
        text::write_json(dir / "report.json", to_json(report));
        run.report = std::move(report);
    } catch (const std::exception& e) {
        run.failure = e.what();
        text::write_json(dir / "failed.json",
                         {{"case_id", tc.case_id}, {"doc_id", run.doc_id}, {"trial", trial}, {"message", run.failure}});
        spdlog::error("{} (trial {}): {}", tc.case_id, trial, run.failure);
    }
    return run;
}

int Pipeline::run_arm(const ArmSettings& arm, bool force) {
    const auto cases = load_cases();
    if (cases.empty()) throw ConfigError("no test cases to run");
    std::set<std::string> ids;
    for (const auto& tc : cases)
        if (!ids.insert(text::sanitize_id(tc.case_id)).second) throw ConfigError("duplicate case id: " + tc.case_id);
    std::atomic<int> failed{0};
    for (int trial = 0; trial < config_.trials; ++trial) {
        run_parallel(cases.size(), config_.jobs, [&](std::size_t i, int slot) {
            const auto run = test_case(cases[i], arm, trial, force, slot);
            if (!run.failure.empty()) ++failed;
        });
    }
    write_aggregate(arm_dir(arm.name), config_.filter_terms);
    return failed > 0 ? 2 : 0;
}

int Pipeline::run_ablation(const std::vector<std::string>& arms, bool force) {
    if (arms.empty()) throw ConfigError("ablation needs at least one arm");
    std::vector<std::string> all = {"full"};
    for (const auto& a : arms) {
        arm_settings(a, config_.refine);
        if (std::find(all.begin(), all.end(), a) == all.end()) all.push_back(a);
    }
    int status = 0;
    json rows = json::array();
    std::string csv = "arm,max_steps,frozen_store,cases,pass_at_1,generation_rounds\n";
    for (const auto& name : all) {
        const auto arm = arm_settings(name, config_.refine);
        status = std::max(status, run_arm(arm, force));
        const auto agg = text::read_json(arm_dir(name) / "report.json");
        const double p1 = agg["pass_at_k"].value("1", 0.0);
        rows.push_back({{"arm", name},
                        {"max_steps", arm.max_steps},
                        {"frozen_store", arm.frozen_store},
                        {"cases", agg["cases"]},
                        {"pass_at_1", p1},
                        {"generation_rounds", agg["generation_rounds"]}});
        csv += fmt::format("{},{},{},{},{:.4f},{}\n", name, arm.max_steps, arm.frozen_store, agg["cases"].get<int>(), p1,
                           agg["generation_rounds"].get<int>());
    }
    text::write_json(config_.workspace / "runs" / "ablation.json", {{"arms", rows}});
    text::write_file(config_.workspace / "runs" / "ablation.csv", csv);
    return status;
}

int Pipeline::run_experiment(bool force) {
    const int s_top = *std::max_element(config_.s_max_grid.begin(), config_.s_max_grid.end());
    const int k_top = *std::max_element(config_.k_grid.begin(), config_.k_grid.end());
    ArmSettings arm{"experiment", s_top, false};
    const int saved_trials = config_.trials;
    config_.trials = k_top;
    int status;
    try {
        status = run_arm(arm, force);
    } catch (...) {
        config_.trials = saved_trials;
        throw;
    }
    config_.trials = saved_trials;

    std::vector<TrialResult> results;
    const auto agg = text::read_json(arm_dir(arm.name) / "report.json");
    for (const auto& r : agg.at("reports")) {
        const auto rep = conformance_report_from_json(r);
        results.push_back({rep.case_id, rep.doc_id, rep.trial, rep.execution_status == RefineStatus::executable,
                           rep.iterations_used, rep.judgment});
    }
    for (const auto& f : agg.at("failed"))
        results.push_back({f["case_id"].get<std::string>(), f.value("doc_id", ""), f["trial"].get<int>(), false, 0,
                           Judgment::fail});
    const auto tables = experiment_tables(results, config_.s_max_grid, config_.k_grid);
    write_experiment_tables(tables, arm_dir(arm.name) / "tables");
    text::write_json(arm_dir(arm.name) / "tables" / "experiment.json", to_json(tables));
    return status;
}

int Pipeline::run_all(bool force) {
    if (!config_.documents.empty()) ingest();
    if (config_.library) build_index();
    if (!config_.cases_file) generate_cases();
    return run_arm(arm_settings("full", config_.refine), force);
}

json aggregate_report(const fs::path& dir, const std::vector<std::string>& filter_terms) {
    std::vector<ConformanceReport> reports;
    json failed = json::array();
    int trials = 0;
    for (const auto& trial_dir : sorted_dirs(dir, "trial_")) {
        for (const auto& case_dir : sorted_dirs(trial_dir, "")) {
            if (fs::is_regular_file(case_dir / "report.json")) {
                reports.push_back(conformance_report_from_json(text::read_json(case_dir / "report.json")));
                trials = std::max(trials, reports.back().trial + 1);
            } else if (fs::is_regular_file(case_dir / "failed.json")) {
                auto f = text::read_json(case_dir / "failed.json");
                trials = std::max(trials, f["trial"].get<int>() + 1);
                failed.push_back(std::move(f));
            }
        }
    }
    std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) {
        return std::tie(a.case_id, a.trial) < std::tie(b.case_id, b.trial);
    });
    std::sort(failed.begin(), failed.end(), [](const json& a, const json& b) {
        return std::make_tuple(a["case_id"].get<std::string>(), a["trial"].get<int>()) <
               std::make_tuple(b["case_id"].get<std::string>(), b["trial"].get<int>());
    });

    auto parts = filter_reports(reports, filter_terms);
    if (fs::is_regular_file(dir / "review_decisions.json"))
        merge_review_decisions(parts.needs_review, text::read_json(dir / "review_decisions.json"));
    std::map<std::pair<std::string, int>, ConformanceReport> by_key;
    for (auto* part : {&parts.auto_filtered, &parts.needs_review})
        for (auto& r : *part) by_key[{r.case_id, r.trial}] = r;

    EvalMatrix m;
    m.trials = trials;
    std::map<std::string, std::size_t> row;
    auto add_case = [&](const std::string& id) {
        if (row.emplace(id, m.case_ids.size()).second) {
            m.case_ids.push_back(id);
            m.success.emplace_back(trials, false);
        }
    };
    json report_arr = json::array();
    int positives = 0, undecidable = 0, rounds = 0;
    std::map<std::string, int> filter_tally = {
        {"auto_filtered", 0}, {"needs_manual_review", 0}, {"kept", 0}, {"excluded", 0}};
    for (const auto& [key, r] : by_key) {
        add_case(r.case_id);
        m.success[row[r.case_id]][r.trial] = r.sample_class == SampleClass::positive;
        positives += r.sample_class == SampleClass::positive;
        undecidable += r.judgment == Judgment::undecidable;
        rounds += r.iterations_used;
        ++filter_tally[std::string(to_string(r.filter_status))];
        report_arr.push_back(to_json(r));
    }
    for (const auto& f : failed) add_case(f["case_id"].get<std::string>());

    json pass = json::object();
    if (m.cases() > 0)
        for (int k = 1; k <= trials; ++k) pass[std::to_string(k)] = pass_at_k(m, k);
    return {{"arm", dir.filename().string()},
            {"cases", m.cases()},
            {"trials", trials},
            {"samples", report_arr.size() + failed.size()},
            {"positives", positives},
            {"negatives", static_cast<int>(report_arr.size()) - positives},
            {"undecidable", undecidable},
            {"generation_rounds", rounds},
            {"pass_at_k", pass},
            {"filter", filter_tally},
            {"failed", failed},
            {"reports", report_arr}};
}

json write_aggregate(const fs::path& dir, const std::vector<std::string>& filter_terms) {
    auto agg = aggregate_report(dir, filter_terms);
    text::write_json(dir / "report.json", agg);
    std::string csv = "case_id,trial,doc_id,sample_class,execution_status,iterations_used,judgment,filter_status\n";
    std::vector<ConformanceReport> pending;
    for (const auto& j : agg["reports"]) {
        const auto r = conformance_report_from_json(j);
        csv += fmt::format("{},{},{},{},{},{},{},{}\n", csv_field(r.case_id), r.trial, csv_field(r.doc_id),
                           to_string(r.sample_class), to_string(r.execution_status), r.iterations_used,
                           to_string(r.judgment), to_string(r.filter_status));
        if (r.filter_status == ReportFilter::needs_manual_review) pending.push_back(r);
    }
    text::write_file(dir / "reports.csv", csv);
    write_review_queue(pending, dir / "review_queue.json");
    return agg;
}

} // namespace rfcprobe
