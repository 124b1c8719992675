#pragma once

// Core value types shared by backends, the entropy module and detectors.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "entroscope/jsonl.hpp"

namespace entroscope {

enum class DecodingMode { greedy, temperature };

struct DecodingParams {
    DecodingMode mode = DecodingMode::greedy;
    double temperature = 1.0;  // ignored in greedy mode
    int top_k_logprobs = 20;
    int max_tokens = 4096;
    std::optional<std::uint64_t> seed;

    static DecodingParams greedy(int k = 20, int max_tokens = 4096) {
        DecodingParams p;
        p.top_k_logprobs = k;
        p.max_tokens = max_tokens;
        return p;
    }
    static DecodingParams sampled(double temperature, std::uint64_t seed, int k = 20, int max_tokens = 4096) {
        DecodingParams p;
        p.mode = DecodingMode::temperature;
        p.temperature = temperature;
        p.seed = seed;
        p.top_k_logprobs = k;
        p.max_tokens = max_tokens;
        return p;
    }

    /// Temperature as sent on the wire: greedy is encoded as 0.
    double wire_temperature() const { return mode == DecodingMode::greedy ? 0.0 : temperature; }
};

struct TopToken {
    std::string token;
    double prob = 0.0;

    bool operator==(const TopToken&) const = default;
};

struct TokenStep {
    std::string token;
    double logprob = 0.0;       // natural log of the chosen token's probability
    std::vector<TopToken> topk;  // descending by prob

    std::vector<double> topk_probs() const {
        std::vector<double> p;
        p.reserve(topk.size());
        for (const auto& t : topk) p.push_back(t.prob);
        return p;
    }
};

struct Generation {
    std::string prompt;
    std::vector<TokenStep> steps;
    std::string text;
    DecodingParams params;
    bool truncated = false;      // stopped by max_tokens
    bool deterministic = true;   // false when the backend cannot guarantee replay

    std::vector<std::string> tokens() const {
        std::vector<std::string> t;
        t.reserve(steps.size());
        for (const auto& s : steps) t.push_back(s.token);
        return t;
    }
    std::vector<double> logprobs() const {
        std::vector<double> l;
        l.reserve(steps.size());
        for (const auto& s : steps) l.push_back(s.logprob);
        return l;
    }
};

inline json to_json(const DecodingParams& p) {
    json j{{"mode", p.mode == DecodingMode::greedy ? "greedy" : "temperature"},
           {"temperature", p.mode == DecodingMode::greedy ? 0.0 : p.temperature},
           {"top_k_logprobs", p.top_k_logprobs},
           {"max_tokens", p.max_tokens}};
    j["seed"] = p.seed ? json(*p.seed) : json(nullptr);
    return j;
}

inline DecodingParams params_from_json(const json& j) {
    DecodingParams p;
    p.mode = j.value("mode", std::string("greedy")) == "greedy" ? DecodingMode::greedy : DecodingMode::temperature;
    p.temperature = j.value("temperature", 1.0);
    if (p.mode == DecodingMode::greedy) p.temperature = 1.0;
    p.top_k_logprobs = j.value("top_k_logprobs", 20);
    p.max_tokens = j.value("max_tokens", 4096);
    if (j.contains("seed") && !j["seed"].is_null()) p.seed = j["seed"].get<std::uint64_t>();
    return p;
}

inline json to_json(const Generation& g) {
    json steps = json::array();
    for (const auto& s : g.steps) {
        json top = json::array();
        for (const auto& t : s.topk) top.push_back(json::array({t.token, t.prob}));
        steps.push_back(json{{"token", s.token}, {"logprob", s.logprob}, {"topk", top}});
    }
    return json{{"prompt", g.prompt}, {"text", g.text},          {"params", to_json(g.params)},
                {"steps", steps},     {"truncated", g.truncated}, {"deterministic", g.deterministic}};
}

inline Generation generation_from_json(const json& j) {
    Generation g;
    g.prompt = j.at("prompt").get<std::string>();
    g.text = j.at("text").get<std::string>();
    g.params = params_from_json(j.at("params"));
    g.truncated = j.value("truncated", false);
    g.deterministic = j.value("deterministic", true);
    for (const auto& s : j.at("steps")) {
        TokenStep step;
        step.token = s.at("token").get<std::string>();
        step.logprob = s.at("logprob").get<double>();
        for (const auto& t : s.at("topk")) step.topk.push_back({t.at(0).get<std::string>(), t.at(1).get<double>()});
        g.steps.push_back(std::move(step));
    }
    return g;
}

}  // namespace entroscope
