#pragma once

/**
 * Chat-completion HTTP backend.
 *
 * Wire format (request):
 *   POST {base}/v1/chat/completions
 *   {"model", "messages": [{"role","content"}...], "temperature", "max_tokens",
 *    "logprobs": true, "top_logprobs": K, "seed"?}
 * Greedy decoding is sent as temperature 0. The response must carry
 * choices[0].logprobs.content[i] = {"token", "logprob", "top_logprobs": [{"token","logprob"}]}.
 *
 * Teacher-forced scoring is emulated through the legacy completions endpoint
 * with echo=true and max_tokens=0 when `scoring` is "echo"; otherwise
 * score_response raises CapabilityError.
 */

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "entroscope/backend.hpp"

namespace entroscope {

struct HttpBackendConfig {
    std::string endpoint = "http://127.0.0.1:8000";  // scheme://host[:port][/base]
    std::string model;
    std::string api_key_env = "ENTROSCOPE_API_KEY";
    std::string chat_path = "/v1/chat/completions";
    std::string completions_path = "/v1/completions";
    std::string scoring = "none";  // "none" | "echo"
    int max_retries = 3;
    int backoff_ms = 500;
    int timeout_s = 120;
    PromptTemplate prompt_template;
};

class HttpBackend final : public Backend {
public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
        split_endpoint();
        if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    }

    std::string id() const override { return "http:" + cfg_.endpoint + ":" + cfg_.model; }
    PromptTemplate default_template() const override { return cfg_.prompt_template; }

    json chat_request(const std::string& prompt, const DecodingParams& params) const {
        json messages = json::array();
        if (cfg_.prompt_template.system) messages.push_back({{"role", "system"}, {"content", *cfg_.prompt_template.system}});
        messages.push_back({{"role", "user"}, {"content", prompt}});
        json body{{"model", cfg_.model},
                  {"messages", messages},
                  {"temperature", params.wire_temperature()},
                  {"max_tokens", params.max_tokens},
                  {"logprobs", true},
                  {"top_logprobs", params.top_k_logprobs}};
        if (params.seed) body["seed"] = *params.seed;
        return body;
    }

    Generation generate(const std::string& prompt, const DecodingParams& params) const override {
        if (prompt.empty()) throw ValidationError("empty prompt");
        if (params.top_k_logprobs < 1) throw ValidationError("top_k_logprobs must be >= 1");
        const json response = post(cfg_.chat_path, chat_request(prompt, params));
        return parse_chat_response(response, prompt, params);
    }

    static Generation parse_chat_response(const json& response, const std::string& prompt, const DecodingParams& params) {
        Generation g;
        g.prompt = prompt;
        g.params = params;
        g.deterministic = false;
        try {
            const auto& choice = response.at("choices").at(0);
            g.truncated = choice.value("finish_reason", std::string()) == "length";
            const auto lp = choice.find("logprobs");
            if (lp == choice.end() || lp->is_null() || !lp->contains("content") || (*lp)["content"].is_null())
                throw CapabilityError("backend response carries no token logprobs");
            for (const auto& c : (*lp)["content"]) {
                TokenStep step;
                step.token = c.at("token").get<std::string>();
                step.logprob = std::min(0.0, c.at("logprob").get<double>());
                for (const auto& t : c.value("top_logprobs", json::array())) {
                    const double p = std::min(1.0, std::exp(t.at("logprob").get<double>()));
                    if (p > 0.0) step.topk.push_back({t.at("token").get<std::string>(), p});
                }
                std::stable_sort(step.topk.begin(), step.topk.end(),
                                 [](const TopToken& a, const TopToken& b) { return a.prob > b.prob; });
                if (step.topk.size() > static_cast<std::size_t>(params.top_k_logprobs))
                    step.topk.resize(static_cast<std::size_t>(params.top_k_logprobs));
                normalize_mass(step);
                g.text += step.token;
                g.steps.push_back(std::move(step));
            }
        } catch (const json::exception& e) {
            throw CapabilityError(std::string("malformed chat completion response: ") + e.what());
        }
        return g;
    }

    std::vector<double> score_response(const std::string& prompt,
                                       std::span<const std::string> response_tokens) const override {
        if (response_tokens.empty()) throw ValidationError("empty response token list");
        if (cfg_.scoring != "echo") throw CapabilityError("backend has no teacher-forced scoring (set scoring=echo)");
        std::string response;
        for (const auto& t : response_tokens) response += t;
        json body{{"model", cfg_.model}, {"prompt", prompt + response}, {"max_tokens", 0},
                  {"echo", true},         {"logprobs", 1},              {"temperature", 0.0}};
        const json r = post(cfg_.completions_path, body);
        try {
            const auto& lp = r.at("choices").at(0).at("logprobs");
            const auto& toks = lp.at("tokens");
            const auto& lps = lp.at("token_logprobs");
            const auto& offs = lp.at("text_offset");
            std::vector<double> out;
            std::string echoed;
            for (std::size_t i = 0; i < toks.size(); ++i) {
                if (offs.at(i).get<std::size_t>() < prompt.size()) continue;
                if (lps.at(i).is_null()) throw CapabilityError("echo scoring returned null logprob inside response");
                out.push_back(std::min(0.0, lps.at(i).get<double>()));
                echoed += toks.at(i).get<std::string>();
            }
            if (out.size() != response_tokens.size() || echoed != response)
                throw CapabilityError("echo scoring tokenization does not align with the response tokens");
            return out;
        } catch (const json::exception& e) {
            throw CapabilityError(std::string("malformed echo scoring response: ") + e.what());
        }
    }

private:
    // Reported top-K masses can exceed 1 by rounding; scale them back.
    static void normalize_mass(TokenStep& step) {
        double mass = 0.0;
        for (const auto& t : step.topk) mass += t.prob;
        if (mass > 1.0) {
            for (auto& t : step.topk) t.prob /= mass;
            for (const auto& t : step.topk)
                if (t.token == step.token) step.logprob = std::log(t.prob);
        }
    }

    void split_endpoint() {
        const auto scheme_end = cfg_.endpoint.find("://");
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
        if (cfg_.endpoint.rfind("https://", 0) == 0)
            throw ValidationError("https endpoint requested but this build has no TLS support");
#endif
        const auto path_start = cfg_.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
        if (path_start == std::string::npos) {
            host_ = cfg_.endpoint;
        } else {
            host_ = cfg_.endpoint.substr(0, path_start);
            base_path_ = cfg_.endpoint.substr(path_start);
            while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
        }
    }

    json post(const std::string& path, const json& body) const {
        const std::string payload = body.dump();
        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.backoff_ms << (attempt - 1)));
            httplib::Client client(host_);
            client.set_connection_timeout(cfg_.timeout_s);
            client.set_read_timeout(cfg_.timeout_s);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
            auto res = client.Post(base_path_ + path, headers, payload, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 200 && res->status < 300) {
                try {
                    return json::parse(res->body);
                } catch (const json::parse_error&) {
                    throw CapabilityError("backend returned non-JSON body");
                }
            }
            NetworkError err("HTTP " + std::to_string(res->status) + " from " + path, res->status);
            if (!err.retryable()) throw err;
            last_error = err.what();
        }
        throw NetworkError(last_error + " (after " + std::to_string(cfg_.max_retries) + " retries)");
    }

    HttpBackendConfig cfg_;
    std::string host_;
    std::string base_path_;
    std::string api_key_;
};

}  // namespace entroscope
