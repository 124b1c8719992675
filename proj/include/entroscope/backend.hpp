#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "entroscope/error.hpp"
#include "entroscope/prompt.hpp"
#include "entroscope/types.hpp"

namespace entroscope {

/**
 * A text-generation backend exposing per-token top-K probabilities.
 *
 * Implementations must be safe to call concurrently from several threads;
 * calls share no mutable state.
 */
class Backend {
public:
    virtual ~Backend() = default;

    virtual Generation generate(const std::string& prompt, const DecodingParams& params) const = 0;

    /// Teacher-forced natural-log probability of each response token given
    /// the prompt and the preceding response tokens.
    virtual std::vector<double> score_response(const std::string& prompt,
                                               std::span<const std::string> response_tokens) const = 0;

    /// Stable identifier folded into cache keys.
    virtual std::string id() const = 0;

    virtual PromptTemplate default_template() const { return {}; }
};

/// Throws DomainError if a step breaks the ordering, mass, or logprob invariants.
inline void check_step(const TokenStep& step) {
    if (!(step.logprob <= 1e-12) || !std::isfinite(step.logprob))
        throw DomainError("token logprob must be finite and <= 0");
    double mass = 0.0;
    for (std::size_t i = 0; i < step.topk.size(); ++i) {
        const double p = step.topk[i].prob;
        if (!(p > 0.0 && p <= 1.0)) throw DomainError("top-k probability outside (0, 1]");
        if (i > 0 && p > step.topk[i - 1].prob) throw DomainError("top-k not sorted descending");
        mass += p;
        if (step.topk[i].token == step.token && std::abs(std::log(p) - step.logprob) > 1e-6)
            throw DomainError("chosen token prob inconsistent with its logprob");
    }
    if (mass > 1.0 + 1e-6) throw DomainError("top-k mass exceeds 1");
}

inline void check_generation(const Generation& g) {
    std::string text;
    for (const auto& s : g.steps) {
        check_step(s);
        text += s.token;
    }
    if (text != g.text) throw DomainError("generation text differs from concatenated tokens");
}

}  // namespace entroscope
