#pragma once

/**
 * Contamination detectors. Every score is oriented so that a higher value
 * means "more likely seen in training". All detectors work on the model's
 * greedy response to the plain prompt, never on the question text itself.
 *
 *   self_critique  penalized cosine of entropy sequences, plain vs critique pass
 *   ppl            mean token logprob of the greedy response
 *   min_k          mean of the lowest k-fraction of token logprobs
 *   min_k_pp       same selection over per-token z-scores against the top-K distribution
 *   recall         mean logprob with a non-member prefix minus without
 *   cdd            minus the mean normalized token edit distance of samples to the greedy response
 *   entropy_temp   mean penalized cosine between greedy and temperature-sample entropies
 *   entropy_noise  penalized cosine between greedy entropies with and without the prefix
 */

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "entroscope/backend.hpp"
#include "entroscope/cache.hpp"
#include "entroscope/entropy.hpp"
#include "entroscope/manifest.hpp"
#include "entroscope/numeric.hpp"

namespace entroscope {

inline constexpr std::array<std::string_view, 8> kDetectorNames = {
    "self_critique", "ppl", "min_k", "min_k_pp", "recall", "cdd", "entropy_temp", "entropy_noise"};

inline bool is_registered_detector(std::string_view name) {
    return std::find(kDetectorNames.begin(), kDetectorNames.end(), name) != kDetectorNames.end();
}

inline std::string registered_detectors_list() {
    std::string s;
    for (auto n : kDetectorNames) {
        if (!s.empty()) s += ", ";
        s += n;
    }
    return s;
}

inline constexpr std::string_view kDefaultNonmemberPrefix =
    "The harbor authority published its revised ferry timetable this week. Morning crossings now leave "
    "twenty minutes earlier, and a new evening route connects the two northern piers. Residents can "
    "request printed copies at the visitor center near the fish market.";

struct DetectorConfig {
    double min_k_fraction = 0.2;
    int cdd_samples = 20;
    double cdd_temperature = 0.8;
    int etemp_samples = 8;
    double etemp_temperature = 0.8;
    bool etemp_pairwise = false;
    std::string nonmember_prefix = std::string(kDefaultNonmemberPrefix);
    int top_k_logprobs = 20;
    int max_tokens = 4096;
    bool renormalize_topk = false;
    bool self_critique_no_anchor = false;  // ablation: critique pass without the initial response
    std::uint64_t seed = 0;                 // root of every per-sample seed

    void validate() const {
        if (!(min_k_fraction > 0.0 && min_k_fraction <= 1.0)) throw ValidationError("min_k_fraction must be in (0, 1]");
        if (cdd_samples < 1 || etemp_samples < 1) throw ValidationError("sample counts must be >= 1");
        if (!(cdd_temperature > 0.0) || !(etemp_temperature > 0.0)) throw ValidationError("temperatures must be > 0");
        if (top_k_logprobs < 1) throw ValidationError("top_k_logprobs must be >= 1");
        if (max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
        if (nonmember_prefix.empty()) throw ValidationError("nonmember_prefix must be non-empty");
    }
};

inline json to_json(const DetectorConfig& c) {
    return json{{"min_k_fraction", c.min_k_fraction},
                {"cdd_samples", c.cdd_samples},
                {"cdd_temperature", c.cdd_temperature},
                {"etemp_samples", c.etemp_samples},
                {"etemp_temperature", c.etemp_temperature},
                {"etemp_pairwise", c.etemp_pairwise},
                {"nonmember_prefix", c.nonmember_prefix},
                {"top_k_logprobs", c.top_k_logprobs},
                {"max_tokens", c.max_tokens},
                {"renormalize_topk", c.renormalize_topk},
                {"self_critique_no_anchor", c.self_critique_no_anchor},
                {"seed", c.seed}};
}

/// Reads a config over `c`. Unknown keys are rejected.
inline DetectorConfig detector_config_from_json(const json& j, DetectorConfig c = {}) {
    if (!j.is_object()) throw ValidationError("detector config must be a JSON object");
    const json known = to_json(c);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.contains(it.key())) throw ValidationError("unknown detector config key '" + it.key() + "'");
    try {
        c.min_k_fraction = j.value("min_k_fraction", c.min_k_fraction);
        c.cdd_samples = j.value("cdd_samples", c.cdd_samples);
        c.cdd_temperature = j.value("cdd_temperature", c.cdd_temperature);
        c.etemp_samples = j.value("etemp_samples", c.etemp_samples);
        c.etemp_temperature = j.value("etemp_temperature", c.etemp_temperature);
        c.etemp_pairwise = j.value("etemp_pairwise", c.etemp_pairwise);
        c.nonmember_prefix = j.value("nonmember_prefix", c.nonmember_prefix);
        c.top_k_logprobs = j.value("top_k_logprobs", c.top_k_logprobs);
        c.max_tokens = j.value("max_tokens", c.max_tokens);
        c.renormalize_topk = j.value("renormalize_topk", c.renormalize_topk);
        c.self_critique_no_anchor = j.value("self_critique_no_anchor", c.self_critique_no_anchor);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad detector config: ") + e.what());
    }
    c.validate();
    return c;
}

struct ScoreRecord {
    std::string item_id;
    std::string detector;
    double score = 0.0;
    json aux = json::object();
};

/// One JSON Lines row; the score is written as a 9-decimal fixed-point number.
inline std::string score_record_line(const ScoreRecord& r) {
    return "{\"item_id\":" + json(r.item_id).dump() + ",\"detector\":" + json(r.detector).dump() +
           ",\"score\":" + fixed9(r.score) + ",\"aux\":" + r.aux.dump() + "}";
}

inline std::string dump_score_records(const std::vector<ScoreRecord>& records) {
    std::string out;
    for (const auto& r : records) out += score_record_line(r) + "\n";
    return out;
}

inline std::vector<ScoreRecord> load_score_records(const std::filesystem::path& path) {
    std::vector<ScoreRecord> out;
    for_each_jsonl(path, [&](const json& j, std::size_t line) {
        try {
            ScoreRecord r{j.at("item_id").get<std::string>(), j.at("detector").get<std::string>(),
                          j.at("score").get<double>(), j.value("aux", json::object())};
            if (!std::isfinite(r.score)) throw ParseError("non-finite score", line);
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line);
        }
    });
    return out;
}

/// Levenshtein distance over token sequences (unit costs).
inline std::size_t token_edit_distance(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

/// Mean of the max(1, floor(fraction * n)) smallest values.
inline double lowest_fraction_mean(std::vector<double> values, double fraction) {
    if (values.empty()) throw ScoringError("no token values to select from");
    const auto n = values.size();
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9)));
    std::sort(values.begin(), values.end());
    return mean(std::span<const double>(values).first(std::min(k, n)));
}

/// Z-score of the chosen token's logprob against the step's top-K distribution.
inline double minkpp_token_score(const TokenStep& step) {
    double mu = 0.0;
    for (const auto& t : step.topk) mu += t.prob * std::log(t.prob);
    double var = 0.0;
    for (const auto& t : step.topk) {
        const double d = std::log(t.prob) - mu;
        var += t.prob * d * d;
    }
    const double sigma = std::sqrt(var);
    if (sigma < 1e-9) return 0.0;
    return (step.logprob - mu) / sigma;
}

/// Everything a detector needs to talk to one backend.
struct Probe {
    const Backend& backend;
    const PromptTemplate& tmpl;
    const DetectorConfig& cfg;

    DecodingParams greedy() const { return DecodingParams::greedy(cfg.top_k_logprobs, cfg.max_tokens); }

    Generation greedy_plain(const DetectionItem& item) const {
        auto g = backend.generate(render_plain(tmpl, item.question), greedy());
        if (g.steps.empty()) throw ScoringError("empty greedy response for item '" + item.id + "'");
        return g;
    }

    Generation sample(const DetectionItem& item, std::string_view tag, int index, double temperature) const {
        const auto seed = derive_seed(cfg.seed, item.id + "/" + std::string(tag) + "/" + std::to_string(index));
        return backend.generate(render_plain(tmpl, item.question),
                                DecodingParams::sampled(temperature, seed, cfg.top_k_logprobs, cfg.max_tokens));
    }

    EntropySeq entropies(const Generation& g) const { return entropy_sequence(g, cfg.top_k_logprobs, cfg.renormalize_topk); }
};

inline ScoreRecord self_critique_score(const Probe& probe, const DetectionItem& item) {
    const auto r1 = probe.greedy_plain(item);
    const auto e1 = probe.entropies(r1);
    const std::string p2 = probe.cfg.self_critique_no_anchor ? render_unconventional(probe.tmpl, item.question)
                                                             : render_critique(probe.tmpl, item.question, r1.text);
    const auto r2 = probe.backend.generate(p2, probe.greedy());
    if (r2.steps.empty()) throw ScoringError("empty critique response for item '" + item.id + "'");
    const auto e2 = probe.entropies(r2);
    const auto parts = penalized_cosine_parts(e1, e2);
    json aux{{"len_e1", e1.size()},
             {"len_e2", e2.size()},
             {"cosine", parts.cosine},
             {"length_penalty", parts.length_penalty},
             {"e1", to_json(e1)},
             {"e2", to_json(e2)}};
    if (probe.cfg.self_critique_no_anchor) aux["no_anchor"] = true;
    return {item.id, "self_critique", parts.score, aux};
}

inline ScoreRecord ppl_score(const Probe& probe, const DetectionItem& item) {
    const auto r = probe.greedy_plain(item);
    const auto lp = r.logprobs();
    const double m = mean(lp);
    return {item.id, "ppl", m, json{{"n_tokens", lp.size()}, {"perplexity", std::exp(-m)}}};
}

inline ScoreRecord mink_score(const Probe& probe, const DetectionItem& item) {
    const auto r = probe.greedy_plain(item);
    const double s = lowest_fraction_mean(r.logprobs(), probe.cfg.min_k_fraction);
    return {item.id, "min_k", s, json{{"n_tokens", r.steps.size()}, {"k_fraction", probe.cfg.min_k_fraction}}};
}

inline ScoreRecord minkpp_score(const Probe& probe, const DetectionItem& item) {
    const auto r = probe.greedy_plain(item);
    std::vector<double> z;
    for (const auto& step : r.steps) z.push_back(minkpp_token_score(step));
    const double s = lowest_fraction_mean(z, probe.cfg.min_k_fraction);
    return {item.id, "min_k_pp", s, json{{"n_tokens", r.steps.size()}, {"k_fraction", probe.cfg.min_k_fraction}}};
}

inline ScoreRecord recall_score(const Probe& probe, const DetectionItem& item) {
    const auto r = probe.greedy_plain(item);
    const auto tokens = r.tokens();
    const auto plain = probe.backend.score_response(render_plain(probe.tmpl, item.question), tokens);
    const auto prefixed =
        probe.backend.score_response(render_plain(probe.tmpl, with_prefix(probe.cfg.nonmember_prefix, item.question)), tokens);
    const double mp = mean(plain), mq = mean(prefixed);
    return {item.id, "recall", mq - mp, json{{"mean_logprob_plain", mp}, {"mean_logprob_prefixed", mq}}};
}

inline ScoreRecord cdd_score(const Probe& probe, const DetectionItem& item) {
    const auto r0 = probe.greedy_plain(item);
    const auto ref = r0.tokens();
    std::vector<double> dist;
    for (int i = 0; i < probe.cfg.cdd_samples; ++i) {
        const auto s = probe.sample(item, "cdd", i, probe.cfg.cdd_temperature).tokens();
        const double longest = static_cast<double>(std::max(s.size(), ref.size()));
        dist.push_back(static_cast<double>(token_edit_distance(s, ref)) / longest);
    }
    return {item.id, "cdd", -mean(dist), json{{"n_samples", dist.size()}, {"temperature", probe.cfg.cdd_temperature}}};
}

inline ScoreRecord entropy_temp_score(const Probe& probe, const DetectionItem& item) {
    const auto e0 = probe.entropies(probe.greedy_plain(item));
    std::vector<EntropySeq> samples;
    for (int i = 0; i < probe.cfg.etemp_samples; ++i) {
        const auto g = probe.sample(item, "etemp", i, probe.cfg.etemp_temperature);
        samples.push_back(g.steps.empty() ? EntropySeq{} : probe.entropies(g));
    }
    // An empty sample shares no path with anything: similarity 0.
    auto sim = [](const EntropySeq& a, const EntropySeq& b) { return a.empty() || b.empty() ? 0.0 : penalized_cosine(a, b); };
    std::vector<double> sims;
    if (probe.cfg.etemp_pairwise && samples.size() > 1) {
        for (std::size_t i = 0; i < samples.size(); ++i)
            for (std::size_t j = i + 1; j < samples.size(); ++j) sims.push_back(sim(samples[i], samples[j]));
    } else {
        for (const auto& s : samples) sims.push_back(sim(e0, s));
    }
    return {item.id, "entropy_temp", mean(sims),
            json{{"n_samples", samples.size()}, {"temperature", probe.cfg.etemp_temperature}, {"pairwise", probe.cfg.etemp_pairwise}}};
}

inline ScoreRecord entropy_noise_score(const Probe& probe, const DetectionItem& item) {
    const auto e = probe.entropies(probe.greedy_plain(item));
    const auto g = probe.backend.generate(render_plain(probe.tmpl, with_prefix(probe.cfg.nonmember_prefix, item.question)),
                                          probe.greedy());
    if (g.steps.empty()) throw ScoringError("empty prefixed response for item '" + item.id + "'");
    const auto e2 = probe.entropies(g);
    const auto parts = penalized_cosine_parts(e, e2);
    return {item.id, "entropy_noise", parts.score,
            json{{"len_plain", e.size()}, {"len_prefixed", e2.size()}, {"length_penalty", parts.length_penalty}}};
}

inline ScoreRecord run_detector(std::string_view name, const Probe& probe, const DetectionItem& item) {
    if (name == "self_critique") return self_critique_score(probe, item);
    if (name == "ppl") return ppl_score(probe, item);
    if (name == "min_k") return mink_score(probe, item);
    if (name == "min_k_pp") return minkpp_score(probe, item);
    if (name == "recall") return recall_score(probe, item);
    if (name == "cdd") return cdd_score(probe, item);
    if (name == "entropy_temp") return entropy_temp_score(probe, item);
    if (name == "entropy_noise") return entropy_noise_score(probe, item);
    throw ValidationError("unknown detector '" + std::string(name) + "'; registered: " + registered_detectors_list());
}

struct ScoringFailure {
    std::string item_id;
    std::string detector;
    std::string message;
};

struct SuiteResult {
    std::vector<ScoreRecord> records;  // sorted by (item_id, detector)
    std::vector<ScoringFailure> failures;
};

/**
 * Scores every (item, detector) pair. Items run concurrently on up to
 * `parallelism` threads; one item's passes run in order. Generations are
 * shared across detectors through a cache (the given backend is wrapped in an
 * in-memory one unless it already is a CachingBackend). Per-item failures are
 * collected; the call throws only when nothing could be scored.
 */
inline SuiteResult run_detector_suite(std::shared_ptr<const Backend> backend, const PromptTemplate& tmpl,
                                      const std::vector<DetectionItem>& manifest, const DetectorConfig& cfg,
                                      const std::vector<std::string>& detector_names, int parallelism = 1) {
    if (manifest.empty()) throw ValidationError("manifest is empty");
    if (detector_names.empty()) throw ValidationError("no detectors requested");
    for (const auto& n : detector_names)
        if (!is_registered_detector(n))
            throw ValidationError("unknown detector '" + n + "'; registered: " + registered_detectors_list());
    cfg.validate();
    tmpl.validate();
    if (!dynamic_cast<const CachingBackend*>(backend.get())) backend = std::make_shared<CachingBackend>(backend);

    const Probe probe{*backend, tmpl, cfg};
    SuiteResult result;
    std::mutex mu;
    bool network_failure = false;
    std::string network_message;
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i = next++; i < manifest.size(); i = next++) {
            for (const auto& name : detector_names) {
                try {
                    auto rec = run_detector(name, probe, manifest[i]);
                    if (!std::isfinite(rec.score)) throw ScoringError("non-finite score");
                    std::lock_guard lock(mu);
                    result.records.push_back(std::move(rec));
                } catch (const NetworkError& e) {
                    std::lock_guard lock(mu);
                    network_failure = true;
                    network_message = e.what();
                    result.failures.push_back({manifest[i].id, name, e.what()});
                } catch (const Error& e) {
                    std::lock_guard lock(mu);
                    result.failures.push_back({manifest[i].id, name, e.what()});
                }
            }
        }
    };
    const int threads = std::max(1, std::min<int>(parallelism, static_cast<int>(manifest.size())));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    }

    auto by_key = [](const auto& a, const auto& b) {
        return std::tie(a.item_id, a.detector) < std::tie(b.item_id, b.detector);
    };
    std::sort(result.records.begin(), result.records.end(), by_key);
    std::sort(result.failures.begin(), result.failures.end(), by_key);
    if (result.records.empty()) {
        if (network_failure) throw NetworkError("backend unreachable: " + network_message);
        throw ScoringError("every item failed to score" +
                           (result.failures.empty() ? std::string() : ": " + result.failures.front().message));
    }
    return result;
}

}  // namespace entroscope
