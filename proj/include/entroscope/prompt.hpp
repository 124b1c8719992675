#pragma once

/**
 * Prompt templates for the plain pass and the critique pass.
 *
 * Slots are written `{name}` and filled in one left-to-right pass, so a
 * substituted value is never rescanned: a response that itself contains
 * "{question}" or "---" is embedded verbatim.
 *
 *   plain prompt    = user_wrapper[question := q]
 *   critique prompt = user_wrapper[question := critique_wrapper[
 *                         question := q,
 *                         instruction := critique_instruction[initial_response := r1]]]
 */

#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "entroscope/error.hpp"
#include "entroscope/jsonl.hpp"

namespace entroscope {

inline constexpr std::string_view kCritiqueInstruction =
    "A possible answer is provided below (it may or may not be correct). Please provide a response "
    "that follows a different reasoning path or provides an alternative solution:\n"
    "\n"
    "---\n"
    "\n"
    "{initial_response}\n"
    "\n"
    "---\n"
    "\n"
    "Please now provide your new, different response:";

/// Anchor-free variant used by the no-initial-response ablation.
inline constexpr std::string_view kUnconventionalInstruction =
    "Answer using a technique you’d typically avoid or a deliberately unconventional line of reasoning.";

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
    return n;
}

/// Single-pass `{slot}` substitution. Unknown `{...}` sequences are copied through.
inline std::string fill_slots(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& values) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] == '{') {
            const auto close = tmpl.find('}', i + 1);
            if (close != std::string_view::npos) {
                auto it = values.find(tmpl.substr(i + 1, close - i - 1));
                if (it != values.end()) {
                    out += it->second;
                    i = close + 1;
                    continue;
                }
            }
        }
        out += tmpl[i++];
    }
    return out;
}

struct PromptTemplate {
    std::optional<std::string> system;
    std::string user_wrapper = "{question}";
    std::string critique_wrapper = "{question}\n\n{instruction}";
    std::string critique_instruction = std::string(kCritiqueInstruction);

    void validate() const {
        if (count_occurrences(user_wrapper, "{question}") != 1)
            throw ValidationError("user_wrapper must contain exactly one {question} slot");
        if (count_occurrences(critique_wrapper, "{question}") != 1 ||
            count_occurrences(critique_wrapper, "{instruction}") != 1)
            throw ValidationError("critique_wrapper must contain one {question} and one {instruction} slot");
        if (count_occurrences(critique_wrapper, "{initial_response}") +
                count_occurrences(critique_instruction, "{initial_response}") !=
            1)
            throw ValidationError("critique template must contain exactly one {initial_response} slot");
    }
};

inline std::string render_plain(const PromptTemplate& t, std::string_view question) {
    if (question.empty()) throw ValidationError("empty question");
    return fill_slots(t.user_wrapper, {{"question", std::string(question)}});
}

inline std::string render_critique(const PromptTemplate& t, std::string_view question, std::string_view initial_response) {
    if (question.empty()) throw ValidationError("empty question");
    if (initial_response.empty()) throw ValidationError("empty initial response");
    const std::string r1(initial_response);
    const std::string instruction = fill_slots(t.critique_instruction, {{"initial_response", r1}});
    const std::string inner =
        fill_slots(t.critique_wrapper, {{"question", std::string(question)}, {"instruction", instruction}, {"initial_response", r1}});
    return fill_slots(t.user_wrapper, {{"question", inner}});
}

/// Critique pass without the initial response as an anchor.
inline std::string render_unconventional(const PromptTemplate& t, std::string_view question) {
    if (question.empty()) throw ValidationError("empty question");
    const std::string inner = fill_slots(
        t.critique_wrapper,
        {{"question", std::string(question)}, {"instruction", std::string(kUnconventionalInstruction)}, {"initial_response", ""}});
    return fill_slots(t.user_wrapper, {{"question", inner}});
}

/// `prefix (+) question`: non-member text placed ahead of the question.
inline std::string with_prefix(std::string_view prefix, std::string_view question) {
    return std::string(prefix) + "\n\n" + std::string(question);
}

inline PromptTemplate template_from_json(const json& j, PromptTemplate base = {}) {
    if (j.contains("system")) base.system = j["system"].is_null() ? std::nullopt : std::optional(j["system"].get<std::string>());
    base.user_wrapper = j.value("user_wrapper", base.user_wrapper);
    base.critique_wrapper = j.value("critique_wrapper", base.critique_wrapper);
    base.critique_instruction = j.value("critique_instruction", base.critique_instruction);
    base.validate();
    return base;
}

}  // namespace entroscope
