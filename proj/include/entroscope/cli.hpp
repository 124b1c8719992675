#pragma once

/**
 * Command implementations behind the `entroscope` executable. Each command
 * throws entroscope::Error on failure; `guarded` turns that into an exit code
 * (0 ok, 2 validation, 3 backend/transport, 4 numerical).
 */

#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "entroscope/cache.hpp"
#include "entroscope/detectors.hpp"
#include "entroscope/eval.hpp"
#include "entroscope/http_backend.hpp"
#include "entroscope/manifest.hpp"
#include "entroscope/simlab.hpp"

namespace entroscope::cli {

namespace fs = std::filesystem;

/// Whole lines only, so concurrent writers never interleave.
class LineLog {
public:
    explicit LineLog(std::ostream& os) : os_(os) {}
    void line(const std::string& s) const {
        std::lock_guard lock(mu_);
        os_ << s << '\n' << std::flush;
    }

private:
    std::ostream& os_;
    mutable std::mutex mu_;
};

struct RunConfig {
    std::string backend_kind = "simulator";  // "simulator" | "http"
    std::string checkpoint;                  // simulator
    HttpBackendConfig http;
    json template_overrides = json::object();
    DetectorConfig detectors;
    std::string cache_dir;
    int parallelism = 4;
    std::string output_dir = "out";

    void validate() const {
        if (backend_kind == "simulator") {
            if (checkpoint.empty()) throw ValidationError("backend.checkpoint is required for the simulator backend");
        } else if (backend_kind == "http") {
            if (http.endpoint.empty()) throw ValidationError("backend.endpoint is required for the http backend");
            if (http.model.empty()) throw ValidationError("backend.model is required for the http backend");
            if (http.api_key_env.empty()) throw ValidationError("backend.api_key_env must name an environment variable");
            if (http.scoring != "none" && http.scoring != "echo") throw ValidationError("backend.scoring must be 'none' or 'echo'");
            if (http.max_retries < 0 || http.backoff_ms < 0 || http.timeout_s < 1)
                throw ValidationError("backend retry settings are out of range");
        } else {
            throw ValidationError("backend.kind must be 'simulator' or 'http', got '" + backend_kind + "'");
        }
        if (parallelism < 1) throw ValidationError("parallelism must be >= 1");
        detectors.validate();
    }
};

inline json to_json(const RunConfig& c) {
    json tmpl{{"system", nullptr}, {"user_wrapper", nullptr}, {"critique_wrapper", nullptr}, {"critique_instruction", nullptr}};
    for (auto it = c.template_overrides.begin(); it != c.template_overrides.end(); ++it) tmpl[it.key()] = it.value();
    return json{{"backend",
                 {{"kind", c.backend_kind},
                  {"checkpoint", c.checkpoint},
                  {"endpoint", c.http.endpoint},
                  {"model", c.http.model},
                  {"api_key_env", c.http.api_key_env},
                  {"chat_path", c.http.chat_path},
                  {"completions_path", c.http.completions_path},
                  {"scoring", c.http.scoring},
                  {"max_retries", c.http.max_retries},
                  {"backoff_ms", c.http.backoff_ms},
                  {"timeout_s", c.http.timeout_s}}},
                {"template", tmpl},
                {"detectors", to_json(c.detectors)},
                {"cache_dir", c.cache_dir},
                {"parallelism", c.parallelism},
                {"output_dir", c.output_dir}};
}

namespace detail {

inline void reject_unknown(const json& j, const json& known, const std::string& where) {
    if (!j.is_object()) throw ValidationError((where.empty() ? std::string("config") : where) + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key())) throw ValidationError("unknown config key '" + where + it.key() + "'");
}

inline void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it->is_object() && key != "template") {
            flatten(*it, key, out);
        } else if (key == "template") {
            for (auto t = it->begin(); t != it->end(); ++t) out[key + "." + t.key()] = *t;
        } else {
            out[key] = *it;
        }
    }
}

}  // namespace detail

/// Reads a run config; absent keys keep their defaults, unknown keys are rejected.
inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    const json known = to_json(c);
    detail::reject_unknown(j, known, "");
    try {
        if (j.contains("backend")) {
            const auto& b = j["backend"];
            detail::reject_unknown(b, known["backend"], "backend.");
            c.backend_kind = b.value("kind", c.backend_kind);
            c.checkpoint = b.value("checkpoint", c.checkpoint);
            c.http.endpoint = b.value("endpoint", c.http.endpoint);
            c.http.model = b.value("model", c.http.model);
            c.http.api_key_env = b.value("api_key_env", c.http.api_key_env);
            c.http.chat_path = b.value("chat_path", c.http.chat_path);
            c.http.completions_path = b.value("completions_path", c.http.completions_path);
            c.http.scoring = b.value("scoring", c.http.scoring);
            c.http.max_retries = b.value("max_retries", c.http.max_retries);
            c.http.backoff_ms = b.value("backoff_ms", c.http.backoff_ms);
            c.http.timeout_s = b.value("timeout_s", c.http.timeout_s);
        }
        if (j.contains("template")) {
            detail::reject_unknown(j["template"], known["template"], "template.");
            for (auto it = j["template"].begin(); it != j["template"].end(); ++it) {
                if (it->is_null() && it.key() != "system") continue;
                if (!it->is_null() && !it->is_string()) throw ValidationError("template." + it.key() + " must be a string");
                c.template_overrides[it.key()] = *it;
            }
        }
        if (j.contains("detectors")) c.detectors = detector_config_from_json(j["detectors"]);
        c.cache_dir = j.value("cache_dir", c.cache_dir);
        c.parallelism = j.value("parallelism", c.parallelism);
        c.output_dir = j.value("output_dir", c.output_dir);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad run config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Every overridable dotted key with its default value.
inline std::map<std::string, json> config_keys() {
    std::map<std::string, json> out;
    detail::flatten(to_json(RunConfig{}), "", out);
    return out;
}

/**
 * Applies `key=value` overrides to a config document. Values are parsed as
 * JSON when the key's default is not a string; string keys take the raw text.
 */
inline json apply_overrides(json doc, const std::map<std::string, std::string>& overrides) {
    const auto keys = config_keys();
    for (const auto& [key, raw] : overrides) {
        auto k = keys.find(key);
        if (k == keys.end()) throw ValidationError("unknown config key '" + key + "'");
        json value;
        if (k->second.is_string() || k->second.is_null()) {
            value = raw;
        } else {
            try {
                value = json::parse(raw);
            } catch (const json::parse_error&) {
                throw ValidationError("--" + key + " expects a JSON value, got '" + raw + "'");
            }
        }
        if (!doc.is_object()) throw ValidationError("config must be a JSON object");
        std::string pointer = "/";
        for (char ch : key) pointer += ch == '.' ? '/' : ch;
        try {
            doc[json::json_pointer(pointer)] = value;
        } catch (const json::exception& e) {
            throw ValidationError("cannot apply --" + key + ": " + e.what());
        }
    }
    return doc;
}

inline RunConfig load_run_config(const std::optional<fs::path>& path, const std::map<std::string, std::string>& overrides) {
    json doc = json::object();
    if (path) {
        try {
            doc = json::parse(read_file(*path));
        } catch (const json::parse_error& e) {
            throw ParseError(path->string() + " is not valid JSON: " + e.what());
        }
    }
    return run_config_from_json(apply_overrides(std::move(doc), overrides));
}

/// Backend described by the config, wrapped in a cache (persistent when cache_dir is set).
inline std::shared_ptr<const CachingBackend> make_backend(const RunConfig& c) {
    std::shared_ptr<const Backend> inner;
    if (c.backend_kind == "simulator") {
        inner = std::make_shared<simlab::SimBackend>(
            std::make_shared<const simlab::SyntheticPolicy>(simlab::load_checkpoint(c.checkpoint)));
    } else {
        inner = std::make_shared<HttpBackend>(c.http);
    }
    fs::path file;
    if (!c.cache_dir.empty()) file = fs::path(c.cache_dir) / "cache.jsonl";
    return std::make_shared<CachingBackend>(inner, file);
}

inline PromptTemplate resolve_template(const RunConfig& c, const Backend& backend) {
    return template_from_json(c.template_overrides, backend.default_template());
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        auto end = s.find(',', start);
        if (end == std::string::npos) end = s.size();
        auto part = s.substr(start, end - start);
        const auto a = part.find_first_not_of(" \t");
        const auto b = part.find_last_not_of(" \t");
        if (a != std::string::npos) out.push_back(part.substr(a, b - a + 1));
        start = end + 1;
    }
    return out;
}

inline std::vector<std::string> parse_detector_list(const std::string& s) {
    if (s == "all") return {kDetectorNames.begin(), kDetectorNames.end()};
    auto names = split_list(s);
    if (names.empty()) throw ValidationError("no detectors given; registered: " + registered_detectors_list());
    for (const auto& n : names)
        if (!is_registered_detector(n))
            throw ValidationError("unknown detector '" + n + "'; registered: " + registered_detectors_list());
    return names;
}

// ---------------------------------------------------------------- inject

struct InjectArgs {
    fs::path benchmark;
    std::optional<fs::path> corpus;
    double fraction = 0.5;
    int occurrences = 1;
    std::uint64_t seed = 0;
    fs::path out_dir;
};

inline void cmd_inject(const InjectArgs& a, std::ostream& out) {
    const auto benchmark = load_manifest(a.benchmark);
    std::vector<TrainRecord> corpus;
    if (a.corpus) corpus = load_train_records(*a.corpus);
    const auto result = build_injection(benchmark, corpus, {a.fraction, a.occurrences, a.seed});
    save_train_records(a.out_dir / "train.jsonl", result.train);
    save_manifest(a.out_dir / "detection.jsonl", result.detection);
    std::size_t members = 0;
    for (const auto& item : result.detection) members += item.label == Label::member;
    out << members << " members / " << result.detection.size() - members << " nonmembers\n";
    out << result.train.size() << " train records (" << corpus.size() << " base, "
        << result.train.size() - corpus.size() << " injected)\n";
}

// ---------------------------------------------------------------- score

struct ScoreArgs {
    RunConfig config;
    fs::path manifest;
    std::string detectors = "self_critique";
    fs::path out;
};

struct ScoreSummary {
    std::size_t records = 0;
    std::size_t failures = 0;
    std::size_t backend_generate_calls = 0;
    std::size_t backend_score_calls = 0;
    std::size_t cache_hits = 0;
};

inline ScoreSummary cmd_score(const ScoreArgs& a, std::ostream& out, const LineLog& log) {
    const auto names = parse_detector_list(a.detectors);
    const auto manifest = load_manifest(a.manifest);
    a.config.validate();
    const auto backend = make_backend(a.config);
    const auto tmpl = resolve_template(a.config, *backend);
    const auto result = run_detector_suite(backend, tmpl, manifest, a.config.detectors, names, a.config.parallelism);
    for (const auto& f : result.failures) log.line("warning: " + f.item_id + " / " + f.detector + ": " + f.message);
    write_file(a.out, dump_score_records(result.records));
    ScoreSummary s{result.records.size(), result.failures.size(), backend->generate_calls(), backend->score_calls(),
                   backend->hits()};
    out << s.records << " records written to " << a.out.string() << ", " << s.failures << " failures\n";
    out << "backend calls: " << s.backend_generate_calls << " generate, " << s.backend_score_calls << " score; cache hits "
        << s.cache_hits << "\n";
    return s;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    fs::path scores;
    fs::path manifest;
    fs::path out_dir;
    bool dual_stage = false;
    std::string dual_main = "self_critique";
    std::optional<fs::path> aux_scores;  // defaults to the aux detector's records in `scores`
    DualStageConfig dual;
};

struct EvalOutcome {
    std::vector<EvalReport> reports;
    std::vector<DualStageRow> dual_rows;
};

namespace detail {

inline std::map<std::string, std::unordered_map<std::string, double>> by_detector(const std::vector<ScoreRecord>& records) {
    std::map<std::string, std::unordered_map<std::string, double>> out;
    for (const auto& r : records)
        if (!out[r.detector].emplace(r.item_id, r.score).second)
            throw ValidationError("duplicate score for item '" + r.item_id + "' / " + r.detector);
    return out;
}

}  // namespace detail

inline EvalOutcome cmd_eval(const EvalArgs& a, std::ostream& out, const LineLog& log) {
    const auto manifest = load_manifest(a.manifest);
    std::unordered_map<std::string, bool> member;
    std::size_t n_members = 0, unknown = 0;
    for (const auto& item : manifest) {
        if (item.label == Label::unknown) {
            ++unknown;
            continue;
        }
        member[item.id] = item.label == Label::member;
        n_members += item.label == Label::member;
    }
    if (unknown) log.line("warning: " + std::to_string(unknown) + " unlabeled items ignored");
    if (n_members == 0 || n_members == member.size())
        throw ValidationError("manifest " + a.manifest.string() + " holds a single class; AUC is undefined");

    const auto records = load_score_records(a.scores);
    const auto scores = detail::by_detector(records);
    if (scores.empty()) throw ValidationError("no scores in " + a.scores.string());

    EvalOutcome outcome;
    std::string summary = "detector,auc,youden_threshold,f1_at_youden,n_members,n_nonmembers\n";
    for (const auto& [detector, by_id] : scores) {
        std::vector<LabeledScore> joined;
        for (const auto& [id, score] : by_id) {
            auto m = member.find(id);
            if (m == member.end()) {
                if (std::none_of(manifest.begin(), manifest.end(), [&](const auto& it) { return it.id == id; }))
                    throw ValidationError("score for item '" + id + "' has no manifest entry");
                continue;
            }
            joined.push_back({score, m->second});
        }
        const auto c = count_classes(joined);
        if (c.members == 0 || c.nonmembers == 0) {
            log.line("warning: " + detector + " scored a single class; skipped");
            continue;
        }
        const auto report = evaluate(detector, joined);
        write_file(a.out_dir / ("eval_" + detector + ".json"), to_json(report).dump(2) + "\n");
        write_file(a.out_dir / ("hist_" + detector + ".csv"), histogram_csv(score_histogram(joined)));
        summary += detector + "," + fixed9(report.auc) + "," + fixed9(report.youden_threshold) + "," +
                   fixed9(report.f1_at_youden) + "," + std::to_string(report.n_members) + "," +
                   std::to_string(report.n_nonmembers) + "\n";
        out << detector << ": AUC " << fixed9(report.auc) << ", F1 " << fixed9(report.f1_at_youden) << "\n";
        outcome.reports.push_back(report);
    }
    if (outcome.reports.empty()) throw ValidationError("no detector has scores for both classes");
    write_file(a.out_dir / "summary.csv", summary);

    if (a.dual_stage) {
        auto main = scores.find(a.dual_main);
        if (main == scores.end()) throw ValidationError("dual stage: no '" + a.dual_main + "' scores");
        std::unordered_map<std::string, double> aux;
        if (a.aux_scores) {
            const auto aux_by = detail::by_detector(load_score_records(*a.aux_scores));
            auto it = aux_by.find(a.dual.aux_detector);
            if (it == aux_by.end() && aux_by.size() == 1) it = aux_by.begin();
            if (it == aux_by.end()) throw ValidationError("dual stage: no '" + a.dual.aux_detector + "' aux scores");
            aux = it->second;
        } else {
            auto it = scores.find(a.dual.aux_detector);
            if (it == scores.end()) throw ValidationError("dual stage: no '" + a.dual.aux_detector + "' scores");
            aux = it->second;
        }
        std::unordered_map<std::string, bool> covered;
        for (const auto& [id, m] : member)
            if (main->second.contains(id) && aux.contains(id)) covered[id] = m;
        if (covered.size() < member.size())
            log.line("warning: dual stage uses " + std::to_string(covered.size()) + " of " + std::to_string(member.size()) +
                     " labeled items (others lack a score)");
        outcome.dual_rows = dual_stage_report(main->second, aux, covered, a.dual);
        const auto csv = dual_stage_csv(outcome.dual_rows);
        write_file(a.out_dir / "dual_stage.csv", csv);
        out << csv;
    }
    return outcome;
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
    std::optional<fs::path> sim_config;
    fs::path out_dir;
    int parallelism = 4;
    std::string detectors = "all";
};

inline EvalOutcome cmd_simulate(const SimulateArgs& a, std::ostream& out, const LineLog& log) {
    simlab::SimConfig cfg;
    if (a.sim_config) {
        try {
            cfg = simlab::sim_config_from_json(json::parse(read_file(*a.sim_config)));
        } catch (const json::parse_error& e) {
            throw ParseError(a.sim_config->string() + " is not valid JSON: " + e.what());
        }
    }
    cfg.validate();
    const auto names = parse_detector_list(a.detectors);
    const auto t0 = std::chrono::steady_clock::now();
    auto lab = simlab::dual_contamination_lab(cfg);
    const auto t1 = std::chrono::steady_clock::now();
    log.line("trained " + std::to_string(lab.member_ids().size()) + " member items in " +
             std::to_string(std::chrono::duration<double>(t1 - t0).count()) + " s");

    const fs::path dir = a.out_dir;
    write_file(dir / "sim_config.json", simlab::to_json(cfg).dump(2) + "\n");
    save_manifest(dir / "manifest.jsonl", lab.manifest);
    simlab::save_checkpoint(dir / "checkpoint.json", lab.policy);
    std::vector<ScoreRecord> aux;
    for (const auto& [id, v] : lab.aux_scores) aux.push_back({id, "pretrain_proxy", v, json::object()});
    write_file(dir / "aux_scores.jsonl", dump_score_records(aux));
    std::string trace = "step,member_entropy\n";
    for (std::size_t i = 0; i < lab.report.trace_steps.size(); ++i)
        trace += std::to_string(lab.report.trace_steps[i]) + "," + fixed9(lab.report.member_entropy_trace[i]) + "\n";
    write_file(dir / "train_trace.csv", trace);

    RunConfig rc;
    rc.backend_kind = "simulator";
    rc.checkpoint = (dir / "checkpoint.json").string();
    rc.parallelism = a.parallelism;
    rc.output_dir = dir.string();
    write_file(dir / "run_config.json", to_json(rc).dump(2) + "\n");

    auto policy = std::make_shared<const simlab::SyntheticPolicy>(std::move(lab.policy));
    auto backend = std::make_shared<simlab::SimBackend>(policy);
    const auto result =
        run_detector_suite(backend, backend->default_template(), lab.manifest, rc.detectors, names, a.parallelism);
    for (const auto& f : result.failures) log.line("warning: " + f.item_id + " / " + f.detector + ": " + f.message);
    write_file(dir / "scores.jsonl", dump_score_records(result.records));

    EvalArgs e;
    e.scores = dir / "scores.jsonl";
    e.manifest = dir / "manifest.jsonl";
    e.out_dir = dir / "eval";
    e.aux_scores = dir / "aux_scores.jsonl";
    e.dual.aux_detector = "pretrain_proxy";
    e.dual_stage = std::find(names.begin(), names.end(), e.dual_main) != names.end();
    return cmd_eval(e, out, log);
}

// ---------------------------------------------------------------- report

/// Summary table over the eval_*.json files of a directory, sorted by detector.
inline std::string cmd_report(const fs::path& eval_dir, const std::string& format) {
    if (format != "csv" && format != "markdown") throw ValidationError("format must be 'csv' or 'markdown'");
    if (!fs::is_directory(eval_dir)) throw ValidationError("cannot open " + eval_dir.string());
    std::vector<EvalReport> reports;
    for (const auto& entry : fs::directory_iterator(eval_dir)) {
        const auto name = entry.path().filename().string();
        if (name.rfind("eval_", 0) != 0 || entry.path().extension() != ".json") continue;
        try {
            reports.push_back(eval_report_from_json(json::parse(read_file(entry.path()))));
        } catch (const json::exception& e) {
            throw ParseError(entry.path().string() + ": " + e.what());
        }
    }
    if (reports.empty()) throw ValidationError("no eval_*.json reports in " + eval_dir.string());
    std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.detector < b.detector; });

    std::string out;
    if (format == "csv") {
        out = "detector,auc,f1_at_youden,n_members,n_nonmembers\n";
        for (const auto& r : reports)
            out += r.detector + "," + fixed9(r.auc) + "," + fixed9(r.f1_at_youden) + "," + std::to_string(r.n_members) +
                   "," + std::to_string(r.n_nonmembers) + "\n";
    } else {
        out = "| detector | AUC | F1 | members | non-members |\n|---|---|---|---|---|\n";
        char buf[64];
        for (const auto& r : reports) {
            std::snprintf(buf, sizeof buf, "%.4f | %.4f", r.auc, r.f1_at_youden);
            out += "| " + r.detector + " | " + buf + " | " + std::to_string(r.n_members) + " | " +
                   std::to_string(r.n_nonmembers) + " |\n";
        }
    }
    if (auto dual = eval_dir / "dual_stage.csv"; fs::exists(dual)) out += "\n" + read_file(dual);
    return out;
}

// ---------------------------------------------------------------- exit codes

/// Runs `fn`, reporting any failure on `err` as one line. Returns the exit code.
template <class F>
int guarded(const LineLog& err, F&& fn) {
    try {
        fn();
        return 0;
    } catch (const Error& e) {
        err.line(std::string("error: ") + e.what());
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        err.line(std::string("error: ") + e.what());
        return 2;
    } catch (const std::exception& e) {
        err.line(std::string("internal error: ") + e.what());
        return 1;
    }
}

}  // namespace entroscope::cli
