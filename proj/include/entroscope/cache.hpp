#pragma once

/**
 * Generation cache in front of any Backend.
 *
 * Keys are FNV-1a hashes of (backend id, call kind, prompt, decoding params).
 * Only replayable calls are cached: greedy decoding, or sampling with an
 * explicit seed. With a cache file the cache is persisted as JSON Lines
 * ({"key", "generation"} or {"key", "logprobs"}) and reloaded on start, which
 * is what makes interrupted runs resumable.
 */

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include "entroscope/backend.hpp"
#include "entroscope/rng.hpp"

namespace entroscope {

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string generation_cache_key(const std::string& backend_id, const std::string& prompt, const DecodingParams& p) {
    const json key{{"backend", backend_id}, {"kind", "generate"}, {"prompt", prompt}, {"params", to_json(p)}};
    return hex64(fnv1a64(key.dump()));
}

inline std::string scoring_cache_key(const std::string& backend_id, const std::string& prompt,
                                     std::span<const std::string> tokens) {
    const json key{{"backend", backend_id}, {"kind", "score"}, {"prompt", prompt},
                   {"tokens", std::vector<std::string>(tokens.begin(), tokens.end())}};
    return hex64(fnv1a64(key.dump()));
}

class CachingBackend final : public Backend {
public:
    explicit CachingBackend(std::shared_ptr<const Backend> inner, std::filesystem::path file = {})
        : inner_(std::move(inner)), file_(std::move(file)) {
        if (!file_.empty() && std::filesystem::exists(file_)) load();
    }

    std::string id() const override { return inner_->id(); }
    PromptTemplate default_template() const override { return inner_->default_template(); }

    Generation generate(const std::string& prompt, const DecodingParams& params) const override {
        const bool cacheable = params.mode == DecodingMode::greedy || params.seed.has_value();
        if (!cacheable) {
            ++generate_calls_;
            return inner_->generate(prompt, params);
        }
        const auto key = generation_cache_key(inner_->id(), prompt, params);
        {
            std::shared_lock lock(mu_);
            if (auto it = generations_.find(key); it != generations_.end()) {
                ++hits_;
                return it->second;
            }
        }
        ++generate_calls_;
        Generation g = inner_->generate(prompt, params);
        std::unique_lock lock(mu_);
        if (generations_.emplace(key, g).second) append(json{{"key", key}, {"generation", to_json(g)}});
        return g;
    }

    std::vector<double> score_response(const std::string& prompt,
                                       std::span<const std::string> response_tokens) const override {
        const auto key = scoring_cache_key(inner_->id(), prompt, response_tokens);
        {
            std::shared_lock lock(mu_);
            if (auto it = scores_.find(key); it != scores_.end()) {
                ++hits_;
                return it->second;
            }
        }
        ++score_calls_;
        auto lp = inner_->score_response(prompt, response_tokens);
        std::unique_lock lock(mu_);
        if (scores_.emplace(key, lp).second) append(json{{"key", key}, {"logprobs", lp}});
        return lp;
    }

    /// Calls forwarded to the wrapped backend (cache misses).
    std::size_t generate_calls() const { return generate_calls_; }
    std::size_t score_calls() const { return score_calls_; }
    std::size_t hits() const { return hits_; }

private:
    void load() {
        for_each_jsonl(file_, [&](const json& j, std::size_t) {
            const auto key = j.at("key").get<std::string>();
            if (j.contains("generation")) generations_.emplace(key, generation_from_json(j["generation"]));
            if (j.contains("logprobs")) scores_.emplace(key, j["logprobs"].get<std::vector<double>>());
        });
    }

    // Caller holds the unique lock; one line per write keeps the file line-atomic.
    void append(const json& entry) const {
        if (file_.empty()) return;
        if (file_.has_parent_path()) std::filesystem::create_directories(file_.parent_path());
        std::ofstream out(file_, std::ios::app | std::ios::binary);
        out << entry.dump() << '\n';
    }

    std::shared_ptr<const Backend> inner_;
    std::filesystem::path file_;
    mutable std::shared_mutex mu_;
    mutable std::unordered_map<std::string, Generation> generations_;
    mutable std::unordered_map<std::string, std::vector<double>> scores_;
    mutable std::atomic<std::size_t> generate_calls_{0};
    mutable std::atomic<std::size_t> score_calls_{0};
    mutable std::atomic<std::size_t> hits_{0};
};

}  // namespace entroscope
