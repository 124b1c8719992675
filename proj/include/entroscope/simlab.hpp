#pragma once

/**
 * Synthetic policy-collapse laboratory.
 *
 * A tabular softmax policy: logits indexed [item, position, token]. Each item
 * has a gold target sequence. Members are trained with REINFORCE plus an
 * entropy bonus until their policy collapses onto the target; non-members are
 * never touched. The trained table is served through the Backend contract so
 * every detector can run against it as a black box.
 *
 * Context model. A prompt names one item via `<item:ID>`. Two markers change
 * the logits the policy decodes with:
 *   - `<critique>` after the item marker adds `critique_shift[position, token]`,
 *   - any text before the item marker (a non-member prefix) adds `prefix_shift`.
 * Both shift tables are seeded; their end-of-sequence column ramps up with
 * position so that flat policies stop early under either perturbation while
 * peaked ones keep their full-length path.
 *
 * Pretraining leakage. A seeded subset of items carries a prior that biases
 * the target tokens before RL starts. The prior models recall of memorized
 * text: it applies in full to plain and prefixed prompts but only with weight
 * `critique_prior_gain` under the critique marker. RL updates go to `logits`
 * only and are computed against the full plain-context policy, so an item the
 * prior already solves receives little RL signal.
 *
 * Token `vocab_size - 1` is end-of-sequence. It is never part of a target and
 * is not emitted as a step.
 */

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "entroscope/backend.hpp"
#include "entroscope/entropy.hpp"
#include "entroscope/manifest.hpp"
#include "entroscope/rng.hpp"

namespace entroscope::simlab {

struct SimConfig {
    int vocab_size = 16;
    int seq_len = 12;
    int n_items = 200;
    double member_fraction = 0.5;
    int train_steps = 2000;
    double learning_rate = 0.5;
    double entropy_coef = 0.001;
    double baseline_decay = 0.9;
    double reward_scale = 3.0;
    double critique_shift_scale = 1.0;
    double prefix_shift_scale = 0.5;
    double pretrain_fraction = 0.5;
    double pretrain_strength_min = 8.0;
    double pretrain_strength_max = 12.0;
    double critique_prior_gain = 0.18;
    int checkpoint_every = 100;
    std::uint64_t seed = 20240917;

    void validate() const {
        if (vocab_size < 4) throw ValidationError("vocab_size must be >= 4");
        if (seq_len < 2) throw ValidationError("seq_len must be >= 2");
        if (n_items < 2) throw ValidationError("n_items must be >= 2");
        if (!(member_fraction > 0.0 && member_fraction < 1.0)) throw ValidationError("member_fraction must be in (0, 1)");
        if (train_steps < 0) throw ValidationError("train_steps must be >= 0");
        if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
        if (!(entropy_coef >= 0.0)) throw ValidationError("entropy_coef must be >= 0");
        if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw ValidationError("baseline_decay must be in [0, 1)");
        if (!(reward_scale > 0.0 && std::isfinite(reward_scale))) throw ValidationError("reward_scale must be finite and > 0");
        if (!(critique_shift_scale >= 0.0) || !(prefix_shift_scale >= 0.0))
            throw ValidationError("shift scales must be >= 0");
        if (!(pretrain_fraction >= 0.0 && pretrain_fraction <= 1.0)) throw ValidationError("pretrain_fraction must be in [0, 1]");
        if (!(pretrain_strength_min >= 0.0 && pretrain_strength_max >= pretrain_strength_min))
            throw ValidationError("pretrain strength range is invalid");
        if (!(critique_prior_gain >= 0.0)) throw ValidationError("critique_prior_gain must be >= 0");
        if (checkpoint_every < 1) throw ValidationError("checkpoint_every must be >= 1");
        const auto members = injection_count(member_fraction, static_cast<std::size_t>(n_items));
        if (members == 0 || members >= static_cast<std::size_t>(n_items))
            throw ValidationError("member_fraction leaves one class empty");
    }
};

inline json to_json(const SimConfig& c) {
    return json{{"vocab_size", c.vocab_size},
                {"seq_len", c.seq_len},
                {"n_items", c.n_items},
                {"member_fraction", c.member_fraction},
                {"train_steps", c.train_steps},
                {"learning_rate", c.learning_rate},
                {"entropy_coef", c.entropy_coef},
                {"baseline_decay", c.baseline_decay},
                {"reward_scale", c.reward_scale},
                {"critique_shift_scale", c.critique_shift_scale},
                {"prefix_shift_scale", c.prefix_shift_scale},
                {"pretrain_fraction", c.pretrain_fraction},
                {"pretrain_strength_min", c.pretrain_strength_min},
                {"pretrain_strength_max", c.pretrain_strength_max},
                {"critique_prior_gain", c.critique_prior_gain},
                {"checkpoint_every", c.checkpoint_every},
                {"seed", c.seed}};
}

/// Reads a config, taking defaults for absent keys. Unknown keys are rejected.
inline SimConfig sim_config_from_json(const json& j) {
    SimConfig c;
    const json defaults = to_json(c);
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!defaults.contains(it.key())) throw ValidationError("unknown simulator config key '" + it.key() + "'");
    try {
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.seq_len = j.value("seq_len", c.seq_len);
        c.n_items = j.value("n_items", c.n_items);
        c.member_fraction = j.value("member_fraction", c.member_fraction);
        c.train_steps = j.value("train_steps", c.train_steps);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
        c.baseline_decay = j.value("baseline_decay", c.baseline_decay);
        c.reward_scale = j.value("reward_scale", c.reward_scale);
        c.critique_shift_scale = j.value("critique_shift_scale", c.critique_shift_scale);
        c.prefix_shift_scale = j.value("prefix_shift_scale", c.prefix_shift_scale);
        c.pretrain_fraction = j.value("pretrain_fraction", c.pretrain_fraction);
        c.pretrain_strength_min = j.value("pretrain_strength_min", c.pretrain_strength_min);
        c.pretrain_strength_max = j.value("pretrain_strength_max", c.pretrain_strength_max);
        c.critique_prior_gain = j.value("critique_prior_gain", c.critique_prior_gain);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad simulator config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Which perturbations are active for a prompt.
struct Context {
    std::size_t item = 0;
    bool critique = false;
    bool prefixed = false;
};

inline void softmax_inplace(std::span<double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double& v : z) {
        v = std::exp(v - m);
        s += v;
    }
    for (double& v : z) v /= s;
}

inline double entropy_of(std::span<const double> p) {
    double h = 0.0;
    for (double q : p)
        if (q > 0.0) h -= q * std::log(q);
    return h < kEntropyFloor ? 0.0 : h;
}

class SyntheticPolicy {
public:
    SyntheticPolicy() = default;

    SyntheticPolicy(SimConfig cfg, std::vector<std::string> item_ids)
        : cfg_(cfg), item_ids_(std::move(item_ids)) {
        const auto n = item_ids_.size();
        const auto L = static_cast<std::size_t>(cfg_.seq_len);
        const auto V = static_cast<std::size_t>(cfg_.vocab_size);
        logits_.assign(n * L * V, 0.0);
        prior_.assign(n * L * V, 0.0);
        critique_shift_.assign(L * V, 0.0);
        prefix_shift_.assign(L * V, 0.0);
        targets_.assign(n * L, 0);
        for (std::size_t i = 0; i < n; ++i) index_[item_ids_[i]] = i;
        for (std::size_t v = 0; v + 1 < V; ++v) vocab_.push_back("t" + std::to_string(v) + " ");
        vocab_.push_back("</s>");
        for (std::size_t v = 0; v < V; ++v) token_index_[vocab_[v]] = v;
    }

    const SimConfig& config() const { return cfg_; }
    std::size_t n_items() const { return item_ids_.size(); }
    std::size_t seq_len() const { return static_cast<std::size_t>(cfg_.seq_len); }
    std::size_t vocab_size() const { return static_cast<std::size_t>(cfg_.vocab_size); }
    std::size_t eos() const { return vocab_size() - 1; }
    const std::vector<std::string>& item_ids() const { return item_ids_; }
    const std::vector<std::string>& vocab() const { return vocab_; }

    std::size_t item_index(std::string_view id) const {
        auto it = index_.find(std::string(id));
        if (it == index_.end()) throw ValidationError("unknown simulator item '" + std::string(id) + "'");
        return it->second;
    }
    std::optional<std::size_t> token_index(std::string_view token) const {
        auto it = token_index_.find(std::string(token));
        if (it == token_index_.end()) return std::nullopt;
        return it->second;
    }

    std::span<double> logits(std::size_t item, std::size_t pos) {
        return {logits_.data() + (item * seq_len() + pos) * vocab_size(), vocab_size()};
    }
    std::span<const double> logits(std::size_t item, std::size_t pos) const {
        return {logits_.data() + (item * seq_len() + pos) * vocab_size(), vocab_size()};
    }
    std::span<double> prior(std::size_t item, std::size_t pos) {
        return {prior_.data() + (item * seq_len() + pos) * vocab_size(), vocab_size()};
    }
    std::span<const double> prior(std::size_t item, std::size_t pos) const {
        return {prior_.data() + (item * seq_len() + pos) * vocab_size(), vocab_size()};
    }
    std::span<double> critique_shift(std::size_t pos) { return {critique_shift_.data() + pos * vocab_size(), vocab_size()}; }
    std::span<const double> critique_shift(std::size_t pos) const {
        return {critique_shift_.data() + pos * vocab_size(), vocab_size()};
    }
    std::span<double> prefix_shift(std::size_t pos) { return {prefix_shift_.data() + pos * vocab_size(), vocab_size()}; }
    std::span<const double> prefix_shift(std::size_t pos) const {
        return {prefix_shift_.data() + pos * vocab_size(), vocab_size()};
    }
    std::span<int> targets(std::size_t item) { return {targets_.data() + item * seq_len(), seq_len()}; }
    std::span<const int> targets(std::size_t item) const { return {targets_.data() + item * seq_len(), seq_len()}; }

    const std::vector<double>& all_logits() const { return logits_; }
    const std::vector<double>& all_prior() const { return prior_; }

    /// Logits the policy decodes with at (item, pos) under a context.
    std::vector<double> effective_logits(const Context& ctx, std::size_t pos) const {
        std::vector<double> z(vocab_size());
        const auto base = logits(ctx.item, pos);
        const auto pri = prior(ctx.item, pos);
        const double gain = ctx.critique ? cfg_.critique_prior_gain : 1.0;
        for (std::size_t v = 0; v < z.size(); ++v) {
            z[v] = base[v] + gain * pri[v];
            if (ctx.critique) z[v] += critique_shift(pos)[v];
            if (ctx.prefixed) z[v] += prefix_shift(pos)[v];
        }
        return z;
    }

    std::vector<double> probs(const Context& ctx, std::size_t pos, double temperature = 1.0) const {
        auto z = effective_logits(ctx, pos);
        for (double& v : z) v /= temperature;
        softmax_inplace(z);
        return z;
    }

    /// Parses `<item:ID>`, an optional prefix before it, and `<critique>` after it.
    Context parse_prompt(std::string_view prompt) const {
        const auto open = prompt.find("<item:");
        if (open == std::string_view::npos) throw ValidationError("simulator prompt has no <item:...> marker");
        const auto close = prompt.find('>', open);
        if (close == std::string_view::npos) throw ValidationError("unterminated <item:...> marker");
        Context ctx;
        ctx.item = item_index(prompt.substr(open + 6, close - open - 6));
        ctx.prefixed = prompt.substr(0, open).find_first_not_of(" \t\r\n") != std::string_view::npos;
        ctx.critique = prompt.find("<critique>", close) != std::string_view::npos;
        return ctx;
    }

    /// FNV-1a over every tensor; distinguishes checkpoints that share a seed.
    std::uint64_t fingerprint() const {
        auto bytes = [](const auto& v) {
            return std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(v[0]));
        };
        std::uint64_t h = fnv1a64(bytes(targets_));
        for (const auto* t : {&logits_, &prior_, &critique_shift_, &prefix_shift_}) h = fnv1a64(bytes(*t), h);
        return h;
    }

    bool all_finite() const {
        return std::all_of(logits_.begin(), logits_.end(), [](double v) { return std::isfinite(v); });
    }

    friend json to_json(const SyntheticPolicy& p);
    friend SyntheticPolicy policy_from_json(const json& j);

private:
    SimConfig cfg_;
    std::vector<std::string> item_ids_;
    std::vector<std::string> vocab_;
    std::vector<double> logits_;
    std::vector<double> prior_;
    std::vector<double> critique_shift_;
    std::vector<double> prefix_shift_;
    std::vector<int> targets_;
    std::unordered_map<std::string, std::size_t> index_;
    std::unordered_map<std::string, std::size_t> token_index_;
};

/// Checkpoint: JSON tensor dump with an explicit shape header.
inline json to_json(const SyntheticPolicy& p) {
    return json{{"format", "entroscope-simlab-checkpoint"},
                {"version", 1},
                {"shape", {p.n_items(), p.seq_len(), p.vocab_size()}},
                {"config", to_json(p.cfg_)},
                {"item_ids", p.item_ids_},
                {"targets", p.targets_},
                {"logits", p.logits_},
                {"prior", p.prior_},
                {"critique_shift", p.critique_shift_},
                {"prefix_shift", p.prefix_shift_}};
}

inline SyntheticPolicy policy_from_json(const json& j) {
    try {
        if (j.at("format") != "entroscope-simlab-checkpoint") throw ValidationError("not a simlab checkpoint");
        const auto cfg = sim_config_from_json(j.at("config"));
        SyntheticPolicy p(cfg, j.at("item_ids").get<std::vector<std::string>>());
        const auto shape = j.at("shape").get<std::vector<std::size_t>>();
        if (shape != std::vector<std::size_t>{p.n_items(), p.seq_len(), p.vocab_size()})
            throw ValidationError("checkpoint shape does not match its config");
        auto load = [&](const char* key, auto& dst) {
            auto v = j.at(key).get<std::remove_reference_t<decltype(dst)>>();
            if (v.size() != dst.size()) throw ValidationError(std::string("checkpoint tensor '") + key + "' has wrong size");
            dst = std::move(v);
        };
        load("targets", p.targets_);
        load("logits", p.logits_);
        load("prior", p.prior_);
        load("critique_shift", p.critique_shift_);
        load("prefix_shift", p.prefix_shift_);
        return p;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const SyntheticPolicy& p) {
    write_file(path, to_json(p).dump());
}

inline SyntheticPolicy load_checkpoint(const std::filesystem::path& path) {
    try {
        return policy_from_json(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
}

inline std::string sim_item_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sim-%04zu", i);
    return buf;
}

/// Question text the simulator's prompts carry for an item.
inline std::string sim_question(const std::string& id) { return "<item:" + id + ">"; }

inline PromptTemplate sim_template() {
    PromptTemplate t;
    t.critique_wrapper = "{question}\n<critique>\n{instruction}";
    return t;
}

// Token columns get N(0, 0.5^2) noise; the end-of-sequence column climbs from
// about -1 to +3 over the sequence. Both are multiplied by the table's scale.
inline void fill_shift(Rng& rng, std::span<double> row, std::size_t pos, std::size_t seq_len, double scale) {
    for (std::size_t v = 0; v + 1 < row.size(); ++v) row[v] = scale * 0.5 * rng.normal();
    const double frac = static_cast<double>(pos + 1) / static_cast<double>(seq_len);
    row[row.size() - 1] = scale * (4.0 * frac - 1.0 + 0.25 * rng.normal());
}

/**
 * Fresh uniform policy plus its detection manifest. Members are a seeded
 * uniform subset of size round-half-up(member_fraction * n_items).
 */
inline std::pair<SyntheticPolicy, std::vector<DetectionItem>> init_lab(const SimConfig& cfg) {
    cfg.validate();
    std::vector<std::string> ids;
    for (int i = 0; i < cfg.n_items; ++i) ids.push_back(sim_item_id(static_cast<std::size_t>(i)));
    SyntheticPolicy policy(cfg, ids);

    Rng target_rng(derive_seed(cfg.seed, "targets"));
    for (std::size_t i = 0; i < policy.n_items(); ++i)
        for (int& t : policy.targets(i)) t = static_cast<int>(target_rng.index(policy.vocab_size() - 1));

    Rng shift_rng(derive_seed(cfg.seed, "shifts"));
    for (std::size_t pos = 0; pos < policy.seq_len(); ++pos)
        fill_shift(shift_rng, policy.critique_shift(pos), pos, policy.seq_len(), cfg.critique_shift_scale);
    for (std::size_t pos = 0; pos < policy.seq_len(); ++pos)
        fill_shift(shift_rng, policy.prefix_shift(pos), pos, policy.seq_len(), cfg.prefix_shift_scale);

    Rng member_rng(derive_seed(cfg.seed, "members"));
    const auto n_members = injection_count(cfg.member_fraction, policy.n_items());
    std::vector<bool> member(policy.n_items(), false);
    for (auto i : member_rng.sample_without_replacement(policy.n_items(), n_members)) member[i] = true;

    std::vector<DetectionItem> manifest;
    for (std::size_t i = 0; i < policy.n_items(); ++i) {
        DetectionItem item;
        item.id = ids[i];
        item.question = sim_question(ids[i]);
        item.label = member[i] ? Label::member : Label::nonmember;
        item.source = "simlab";
        item.meta = json{{"index", i}};
        manifest.push_back(std::move(item));
    }
    return {std::move(policy), std::move(manifest)};
}

/**
 * Pretraining leakage: round-half-up(pretrain_fraction * k) items of each
 * class get a prior of strength U[min, max] on every target token. Strengths
 * are recorded in the manifest meta as `pretrain_strength`.
 */
inline void apply_pretraining_leak(SyntheticPolicy& policy, std::vector<DetectionItem>& manifest) {
    const auto& cfg = policy.config();
    if (cfg.pretrain_fraction <= 0.0) return;
    Rng rng(derive_seed(cfg.seed, "pretrain"));
    for (Label cls : {Label::member, Label::nonmember}) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < manifest.size(); ++i)
            if (manifest[i].label == cls) pool.push_back(i);
        const auto k = injection_count(cfg.pretrain_fraction, pool.size());
        for (auto j : rng.sample_without_replacement(pool.size(), k)) {
            const auto item = pool[j];
            const double strength =
                cfg.pretrain_strength_min + (cfg.pretrain_strength_max - cfg.pretrain_strength_min) * rng.uniform();
            const auto tgt = policy.targets(item);
            for (std::size_t pos = 0; pos < policy.seq_len(); ++pos)
                policy.prior(item, pos)[static_cast<std::size_t>(tgt[pos])] = strength;
            manifest[item].meta["pretrain_strength"] = strength;
        }
    }
}

/// Plain-context greedy path of an item (argmax, lowest index on ties).
inline std::vector<std::size_t> greedy_path(const SyntheticPolicy& p, const Context& ctx) {
    std::vector<std::size_t> path;
    for (std::size_t pos = 0; pos < p.seq_len(); ++pos) {
        const auto z = p.effective_logits(ctx, pos);
        const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
        if (best == p.eos()) break;
        path.push_back(best);
    }
    return path;
}

/// Mean full-vocabulary entropy along the plain greedy path.
inline double greedy_path_entropy(const SyntheticPolicy& p, std::size_t item) {
    const Context ctx{item, false, false};
    const auto path = greedy_path(p, ctx);
    if (path.empty()) return 0.0;
    std::vector<double> h;
    for (std::size_t pos = 0; pos < path.size(); ++pos) h.push_back(entropy_of(p.probs(ctx, pos)));
    return mean(h);
}

/// Mean log-probability of the plain greedy path: the pretraining proxy score.
inline double greedy_path_logprob(const SyntheticPolicy& p, std::size_t item) {
    const Context ctx{item, false, false};
    const auto path = greedy_path(p, ctx);
    if (path.empty()) return 0.0;
    std::vector<double> lp;
    for (std::size_t pos = 0; pos < path.size(); ++pos) lp.push_back(std::log(p.probs(ctx, pos)[path[pos]]));
    return mean(lp);
}

/// Reward: fraction of target positions matched by the sample, times `scale` (an exact match earns `scale`).
inline double sequence_reward(std::span<const std::size_t> sample, std::span<const int> target, double scale) {
    double r = 0.0;
    for (std::size_t t = 0; t < sample.size() && t < target.size(); ++t)
        if (sample[t] == static_cast<std::size_t>(target[t])) r += 1.0;
    return target.empty() ? 0.0 : scale * r / static_cast<double>(target.size());
}

/// Samples from the plain-context policy; stops after end-of-sequence (kept in the sample).
inline std::vector<std::size_t> sample_sequence(const SyntheticPolicy& p, std::size_t item, Rng& rng) {
    const Context ctx{item, false, false};
    std::vector<std::size_t> seq;
    for (std::size_t pos = 0; pos < p.seq_len(); ++pos) {
        const auto probs = p.probs(ctx, pos);
        const auto tok = rng.categorical(probs);
        seq.push_back(tok);
        if (tok == p.eos()) break;
    }
    return seq;
}

/// d/dz of log pi(sample) scaled by the advantage, as a [seq_len x vocab] table.
inline std::vector<double> reinforce_gradient(const SyntheticPolicy& p, std::size_t item, std::span<const std::size_t> sample,
                                              double advantage) {
    const auto V = p.vocab_size();
    std::vector<double> g(p.seq_len() * V, 0.0);
    const Context ctx{item, false, false};
    for (std::size_t pos = 0; pos < sample.size(); ++pos) {
        const auto probs = p.probs(ctx, pos);
        for (std::size_t v = 0; v < V; ++v) g[pos * V + v] = advantage * ((v == sample[pos] ? 1.0 : 0.0) - probs[v]);
    }
    return g;
}

/// Gradient of sum_t H(pi_t) with respect to the logits.
inline std::vector<double> entropy_gradient(const SyntheticPolicy& p, std::size_t item) {
    const auto V = p.vocab_size();
    std::vector<double> g(p.seq_len() * V, 0.0);
    const Context ctx{item, false, false};
    for (std::size_t pos = 0; pos < p.seq_len(); ++pos) {
        const auto probs = p.probs(ctx, pos);
        const double h = entropy_of(probs);
        for (std::size_t v = 0; v < V; ++v)
            g[pos * V + v] = probs[v] > 0.0 ? -probs[v] * (std::log(probs[v]) + h) : 0.0;
    }
    return g;
}

/**
 * Exact expectation of the training update direction for one item,
 * E_x[(R(x) - baseline) * grad log pi(x)] + entropy_coef * grad H, computed by
 * enumerating every sequence. Exponential in seq_len; meant for tiny
 * instances such as gradient checks.
 */
inline std::vector<double> expected_update_direction(const SyntheticPolicy& p, std::size_t item, double baseline) {
    const auto V = p.vocab_size();
    const auto L = p.seq_len();
    std::vector<double> total(L * V, 0.0);
    const Context ctx{item, false, false};
    std::vector<std::vector<double>> probs;
    for (std::size_t pos = 0; pos < L; ++pos) probs.push_back(p.probs(ctx, pos));

    std::vector<std::size_t> seq;
    std::function<void(double)> walk = [&](double prob) {
        const bool ended = !seq.empty() && seq.back() == p.eos();
        if (ended || seq.size() == L) {
            const double adv = sequence_reward(seq, p.targets(item), p.config().reward_scale) - baseline;
            const auto g = reinforce_gradient(p, item, seq, adv);
            for (std::size_t i = 0; i < g.size(); ++i) total[i] += prob * g[i];
            return;
        }
        for (std::size_t v = 0; v < V; ++v) {
            seq.push_back(v);
            walk(prob * probs[seq.size() - 1][v]);
            seq.pop_back();
        }
    };
    walk(1.0);
    const auto eg = entropy_gradient(p, item);
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += p.config().entropy_coef * eg[i];
    return total;
}

struct TrainReport {
    /// Mean greedy-path entropy of the member items at step 0 and every checkpoint_every steps.
    std::vector<double> member_entropy_trace;
    std::vector<int> trace_steps;
};

/**
 * REINFORCE with a per-item running-mean baseline (exponentially weighted by
 * baseline_decay, so it tracks the current policy) plus an entropy bonus,
 * applied to member items only, single-threaded and seed-deterministic.
 * Throws DivergenceError on any non-finite logit.
 */
inline TrainReport train(SyntheticPolicy& policy, std::span<const std::string> member_ids) {
    const auto& cfg = policy.config();
    std::vector<std::size_t> members;
    for (const auto& id : member_ids) members.push_back(policy.item_index(id));

    TrainReport report;
    auto record = [&](int step) {
        if (members.empty()) return;
        std::vector<double> h;
        for (auto i : members) h.push_back(greedy_path_entropy(policy, i));
        report.member_entropy_trace.push_back(mean(h));
        report.trace_steps.push_back(step);
    };
    record(0);

    Rng rng(derive_seed(cfg.seed, "train"));
    std::vector<double> baseline(policy.n_items(), 0.0);
    std::vector<bool> seen(policy.n_items(), false);
    const auto V = policy.vocab_size();

    for (int step = 1; step <= cfg.train_steps; ++step) {
        for (auto item : members) {
            const auto sample = sample_sequence(policy, item, rng);
            const double reward = sequence_reward(sample, policy.targets(item), cfg.reward_scale);
            auto grad = reinforce_gradient(policy, item, sample, reward - baseline[item]);
            if (cfg.entropy_coef > 0.0) {
                const auto eg = entropy_gradient(policy, item);
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += cfg.entropy_coef * eg[i];
            }
            for (std::size_t pos = 0; pos < policy.seq_len(); ++pos) {
                auto z = policy.logits(item, pos);
                for (std::size_t v = 0; v < V; ++v) {
                    z[v] += cfg.learning_rate * grad[pos * V + v];
                    if (!std::isfinite(z[v]))
                        throw DivergenceError("non-finite logit at step " + std::to_string(step) + ", item " +
                                              policy.item_ids()[item] + ", position " + std::to_string(pos));
                }
            }
            baseline[item] = seen[item] ? cfg.baseline_decay * baseline[item] + (1.0 - cfg.baseline_decay) * reward : reward;
            seen[item] = true;
        }
        if (step % cfg.checkpoint_every == 0) record(step);
    }
    return report;
}

/**
 * In-process backend over a trained (or untrained) policy.
 *
 * Reported top-K probabilities are the exact distribution the token was drawn
 * from: softmax(logits) for greedy decoding, softmax(logits / T) when sampling.
 * Sampling requires a seed for replay; without one seed 0 is used.
 */
class SimBackend final : public Backend {
public:
    explicit SimBackend(std::shared_ptr<const SyntheticPolicy> policy)
        : policy_(std::move(policy)), fingerprint_(policy_->fingerprint()) {}

    std::string id() const override {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fingerprint_));
        return "simlab:" + std::string(buf);
    }
    PromptTemplate default_template() const override { return sim_template(); }
    const SyntheticPolicy& policy() const { return *policy_; }

    Generation generate(const std::string& prompt, const DecodingParams& params) const override {
        if (prompt.empty()) throw ValidationError("empty prompt");
        if (params.top_k_logprobs < 1) throw ValidationError("top_k_logprobs must be >= 1");
        if (params.max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
        const auto& p = *policy_;
        const Context ctx = p.parse_prompt(prompt);
        const bool greedy = params.mode == DecodingMode::greedy;
        if (!greedy && !(params.temperature > 0.0)) throw ValidationError("temperature must be > 0");
        Rng rng(params.seed.value_or(0));

        Generation g;
        g.prompt = prompt;
        g.params = params;
        g.deterministic = true;
        for (std::size_t pos = 0; pos < p.seq_len(); ++pos) {
            if (g.steps.size() == static_cast<std::size_t>(params.max_tokens)) {
                g.truncated = true;
                break;
            }
            const auto probs = p.probs(ctx, pos, greedy ? 1.0 : params.temperature);
            const std::size_t tok = greedy ? static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin())
                                           : rng.categorical(probs);
            if (tok == p.eos()) break;
            TokenStep step;
            step.token = p.vocab()[tok];
            step.logprob = std::log(probs[tok]);
            step.topk = top_k(probs, static_cast<std::size_t>(params.top_k_logprobs));
            g.text += step.token;
            g.steps.push_back(std::move(step));
        }
        return g;
    }

    std::vector<double> score_response(const std::string& prompt,
                                       std::span<const std::string> response_tokens) const override {
        if (response_tokens.empty()) throw ValidationError("empty response token list");
        const auto& p = *policy_;
        const Context ctx = p.parse_prompt(prompt);
        if (response_tokens.size() > p.seq_len()) throw ValidationError("response longer than the simulator horizon");
        std::vector<double> out;
        for (std::size_t pos = 0; pos < response_tokens.size(); ++pos) {
            const auto tok = p.token_index(response_tokens[pos]);
            if (!tok || *tok == p.eos()) throw ValidationError("token '" + response_tokens[pos] + "' is not in the simulator vocabulary");
            out.push_back(std::log(p.probs(ctx, pos)[*tok]));
        }
        return out;
    }

private:
    std::vector<TopToken> top_k(const std::vector<double>& probs, std::size_t k) const {
        std::vector<std::size_t> order(probs.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return probs[a] > probs[b]; });
        std::vector<TopToken> out;
        for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
            if (probs[order[i]] <= 0.0) break;
            out.push_back({policy_->vocab()[order[i]], probs[order[i]]});
        }
        return out;
    }

    std::shared_ptr<const SyntheticPolicy> policy_;
    std::uint64_t fingerprint_;
};

struct Lab {
    SyntheticPolicy policy;
    std::vector<DetectionItem> manifest;
    /// Pretraining proxy per item id: mean greedy logprob before RL.
    std::vector<std::pair<std::string, double>> aux_scores;
    TrainReport report;

    std::vector<std::string> member_ids() const {
        std::vector<std::string> ids;
        for (const auto& item : manifest)
            if (item.label == Label::member) ids.push_back(item.id);
        return ids;
    }
};

/**
 * The full lab: fresh policy, pretraining leakage on a seeded subset of both
 * classes, pretraining-proxy scores taken before RL, then RL on the members.
 */
inline Lab dual_contamination_lab(const SimConfig& cfg) {
    auto [policy, manifest] = init_lab(cfg);
    apply_pretraining_leak(policy, manifest);
    Lab lab{std::move(policy), std::move(manifest), {}, {}};
    for (std::size_t i = 0; i < lab.policy.n_items(); ++i)
        lab.aux_scores.emplace_back(lab.policy.item_ids()[i], greedy_path_logprob(lab.policy, i));
    const auto members = lab.member_ids();
    lab.report = train(lab.policy, members);
    return lab;
}

/// Alias used by the simulate command: the default lab is the dual-contamination lab.
inline Lab run_lab(const SimConfig& cfg) { return dual_contamination_lab(cfg); }

}  // namespace entroscope::simlab
