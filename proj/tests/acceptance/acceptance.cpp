// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// `--freeze` writes the simulator AUC golden file instead of comparing against it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <utility>

#include "entroscope/detectors.hpp"
#include "entroscope/eval.hpp"
#include "entroscope/manifest.hpp"
#include "entroscope/prompt.hpp"
#include "entroscope/simlab.hpp"
#include "oracles.hpp"

using namespace entroscope;
using namespace entroscope::simlab;

namespace {

const std::string kData = ENTROSCOPE_TEST_DATA;
bool g_freeze = false;

struct Outcome {
    bool ok = true;
    std::ostringstream detail;

    void check(bool cond, const std::string& what) {
        if (!cond) {
            if (detail.tellp() > 0) detail << "; ";
            detail << what;
            ok = false;
        }
    }
};

using Criterion = std::function<void(Outcome&)>;

std::string fmt(double v, const char* f = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::unordered_map<std::string, bool> labels(const std::vector<DetectionItem>& m) {
    std::unordered_map<std::string, bool> out;
    for (const auto& it : m) out[it.id] = it.label == Label::member;
    return out;
}

std::map<std::string, double> suite_aucs(const Lab& lab, const DetectorConfig& cfg, const std::vector<std::string>& names,
                                         std::map<std::string, std::unordered_map<std::string, double>>* scores = nullptr) {
    auto backend = std::make_shared<SimBackend>(std::make_shared<const SyntheticPolicy>(lab.policy));
    const auto res = run_detector_suite(backend, backend->default_template(), lab.manifest, cfg, names, 4);
    const auto member = labels(lab.manifest);
    std::map<std::string, std::vector<LabeledScore>> by;
    for (const auto& r : res.records) {
        by[r.detector].push_back({r.score, member.at(r.item_id)});
        if (scores) (*scores)[r.detector][r.item_id] = r.score;
    }
    std::map<std::string, double> out;
    for (const auto& [d, v] : by) out[d] = auc(v);
    return out;
}

// 1
void penalized_cosine_oracle(Outcome& o) {
    auto seq = [](std::vector<double> v) { return EntropySeq{std::move(v)}; };
    const double a = penalized_cosine(seq({1, 2, 3}), seq({1, 2, 3}));
    const double b = penalized_cosine(seq({1, 0}), seq({0, 1}));
    const double c = penalized_cosine(seq({1, 1}), seq({1, 1, 1, 1}));
    o.check(std::abs(a - 1.0) <= 1e-9, "identical pair gave " + fmt(a));
    o.check(std::abs(b - 0.0) <= 1e-9, "orthogonal pair gave " + fmt(b));
    o.check(std::abs(c - std::sqrt(2.0) / 4.0) <= 1e-9 && std::abs(c - 0.353553) <= 5e-7, "length-penalized pair gave " + fmt(c, "%.9f"));
    oracle::TestRng rng{101};
    double worst = 0;
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> x(1 + rng.below(60)), y(1 + rng.below(60));
        for (auto& v : x) v = rng.uniform() * 2.8;
        for (auto& v : y) v = rng.uniform() * 2.8;
        const double s = penalized_cosine(seq(x), seq(y));
        const double scale = 0.001 + rng.uniform() * 1000;
        auto xs = x;
        for (auto& v : xs) v *= scale;
        worst = std::max({worst, std::abs(s - penalized_cosine(seq(y), seq(x))), std::abs(s - penalized_cosine(seq(xs), seq(y))),
                          std::abs(s - oracle::cosine_penalized(x, y))});
    }
    o.check(worst <= 1e-9, "symmetry/scale/oracle deviation " + fmt(worst));
    o.detail << (o.ok ? "examples exact, max deviation " + fmt(worst) + " over 1000 pairs" : "");
}

// 2
void entropy_oracle(Outcome& o) {
    oracle::TestRng rng{202};
    double worst = 0;
    bool monotone = true, full_at_support = true;
    for (int t = 0; t < 1000; ++t) {
        auto p = rng.distribution(1 + rng.below(100));
        std::sort(p.begin(), p.end(), std::greater<>());
        auto ref = [](double r) { return r < kEntropyFloor ? 0.0 : r; };
        const auto refs = oracle::topk_entropy_all(p);
        worst = std::max(worst, std::abs(token_entropy(p) - ref(refs.back())));
        double prev = 0;
        for (std::size_t k = 1; k <= p.size(); ++k) {
            const double h = topk_entropy(p, static_cast<int>(k));
            worst = std::max(worst, std::abs(h - ref(refs[k - 1])));
            monotone &= h >= prev;
            prev = h;
        }
        full_at_support &= topk_entropy(p, static_cast<int>(p.size())) == token_entropy(p);
    }
    o.check(worst <= 1e-9, "max deviation from high-precision reference " + fmt(worst));
    o.check(monotone, "topk_entropy not monotone in K");
    o.check(full_at_support, "topk_entropy at K = support differs from full entropy");
    o.detail << (o.ok ? "max deviation " + fmt(worst) + " over 1000 distributions" : "");
}

// 3
void auc_youden_oracle(Outcome& o) {
    oracle::TestRng rng{303};
    double worst_auc = 0;
    int youden_mismatch = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 2 + rng.below(499);
        const std::size_t levels = 1 + rng.below(t % 2 ? 10 : 2000);
        std::vector<LabeledScore> s(n);
        std::vector<oracle::Scored> os(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = {static_cast<double>(rng.below(levels)) / static_cast<double>(levels), i == 0 || (i != 1 && rng.below(2) == 1)};
            os[i] = {s[i].score, s[i].member};
        }
        const double a = auc(s), pairs = oracle::auc_pairs(os), trap = trapezoid_area(roc_curve(s));
        worst_auc = std::max({worst_auc, std::abs(a - pairs), std::abs(pairs - trap)});
        const auto y = youden_f1(s);
        const auto r = oracle::youden_sweep(os);
        if (y.threshold != r.threshold || std::abs(y.f1 - r.f1) > 1e-12 || std::abs(y.tpr - r.tpr) > 1e-12) ++youden_mismatch;
    }
    o.check(worst_auc <= 1e-9, "AUC vs pair count vs trapezoid deviation " + fmt(worst_auc));
    o.check(youden_mismatch == 0, std::to_string(youden_mismatch) + " Youden mismatches");
    o.detail << (o.ok ? "200 score sets, max AUC deviation " + fmt(worst_auc) + ", Youden identical" : "");
}

// 4
void topk_stability(Outcome& o) {
    std::ostringstream d;
    for (std::uint64_t seed : {20240917ULL, 1ULL, 2ULL}) {
        SimConfig cfg;
        cfg.seed = seed;
        const auto lab = dual_contamination_lab(cfg);
        std::vector<double> aucs;
        for (int k : {3, 5, 10, 20, 50}) {
            DetectorConfig dc;
            dc.top_k_logprobs = k;
            aucs.push_back(suite_aucs(lab, dc, {"self_critique"}).at("self_critique"));
        }
        const double m = mean(aucs);
        double var = 0;
        for (double a : aucs) var += (a - m) * (a - m);
        var /= static_cast<double>(aucs.size() - 1);
        o.check(var <= 1e-3, "seed " + std::to_string(seed) + " variance " + fmt(var));
        d << "seed " << seed << " var " << fmt(var, "%.3g") << " (AUC " << fmt(*std::min_element(aucs.begin(), aucs.end()), "%.4f")
          << ".." << fmt(*std::max_element(aucs.begin(), aucs.end()), "%.4f") << ") ";
    }
    if (o.ok) o.detail << d.str();
}

// 5
void detector_ordering(Outcome& o) {
    const auto lab = dual_contamination_lab(SimConfig{});
    const std::vector<std::string> names(kDetectorNames.begin(), kDetectorNames.end());
    const auto aucs = suite_aucs(lab, DetectorConfig{}, names);
    const double sc = aucs.at("self_critique");
    o.check(sc >= 0.80, "self_critique AUC " + fmt(sc));
    for (const char* base : {"ppl", "min_k", "min_k_pp"})
        o.check(sc - aucs.at(base) >= 0.10, std::string("margin over ") + base + " " + fmt(sc - aucs.at(base)));

    json current = json::object();
    for (const auto& [d, a] : aucs) current[d] = exact_double(a);
    const std::string path = kData + "/golden/simlab_auc.json";
    if (g_freeze) {
        write_file(path, current.dump(2) + "\n");
    } else {
        json golden;
        try {
            golden = json::parse(read_file(path));
        } catch (const std::exception& e) {
            o.check(false, std::string("golden file unreadable: ") + e.what());
        }
        if (!golden.is_null()) o.check(golden == current, "AUCs differ from golden file: " + current.dump());
    }
    std::ostringstream d;
    d << "self_critique " << fmt(sc, "%.4f");
    for (const auto& [n, a] : aucs)
        if (n != "self_critique") d << ", " << n << " " << fmt(a, "%.4f");
    d << (g_freeze ? " (golden frozen)" : " (bit-exact vs golden)");
    if (o.ok) o.detail << d.str();
}

// 6
void dual_stage_shape(Outcome& o) {
    SimConfig cfg;
    cfg.n_items = 1000;
    cfg.pretrain_fraction = 0.7;
    const auto lab = dual_contamination_lab(cfg);
    std::map<std::string, std::unordered_map<std::string, double>> scores;
    suite_aucs(lab, DetectorConfig{}, {"self_critique"}, &scores);
    const std::unordered_map<std::string, double> aux(lab.aux_scores.begin(), lab.aux_scores.end());
    const DualStageConfig dc;
    const auto rows = dual_stage_report(scores["self_critique"], aux, labels(lab.manifest), dc);
    const auto at = [&](double q) {
        for (const auto& r : rows)
            if (r.q == q) return r;
        throw std::runtime_error("quantile missing");
    };
    const auto full = at(1.0), q3 = at(0.3);
    if (!q3.auc_filtered || !q3.auc_control || !full.auc_filtered || !full.auc_control) {
        o.check(false, "undefined AUC cell");
        return;
    }
    const double gain = *q3.auc_filtered - *full.auc_filtered;
    const double drift = *q3.auc_control - *full.auc_control;
    o.check(gain >= 0.05, "filtered gain " + fmt(gain));
    o.check(std::abs(drift) < 0.05, "control change " + fmt(drift));
    o.detail << "filtered " << fmt(*full.auc_filtered, "%.4f") << " -> " << fmt(*q3.auc_filtered, "%.4f") << " (+" << fmt(gain, "%.4f")
             << "), control " << fmt(*full.auc_control, "%.4f") << " -> " << fmt(*q3.auc_control, "%.4f");
}

// 7
void collapse_signatures(Outcome& o) {
    const SimConfig cfg;
    auto [policy, manifest] = init_lab(cfg);
    apply_pretraining_leak(policy, manifest);
    const auto before = policy;
    std::vector<std::string> members;
    for (const auto& it : manifest)
        if (it.label == Label::member) members.push_back(it.id);
    train(policy, members);

    std::vector<double> mem, untouched;
    bool identical = true;
    const auto L = policy.seq_len();
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        if (manifest[i].label == Label::member) {
            mem.push_back(greedy_path_entropy(policy, i));
            continue;
        }
        for (std::size_t pos = 0; pos < L; ++pos) {
            const auto a = before.logits(i, pos);
            const auto b = std::as_const(policy).logits(i, pos);
            identical &= std::equal(a.begin(), a.end(), b.begin());
        }
        if (!manifest[i].meta.contains("pretrain_strength")) untouched.push_back(greedy_path_entropy(policy, i));
    }
    const double hm = mean(mem);
    const double ln16 = std::log(16.0);
    const bool exact = std::all_of(untouched.begin(), untouched.end(), [&](double h) { return std::abs(h - ln16) <= 1e-12; });
    o.check(hm < 0.1, "member entropy " + fmt(hm));
    o.check(exact && !untouched.empty(), "untouched non-member entropy differs from ln 16");
    o.check(identical, "non-member logits changed");
    o.detail << "member " << fmt(hm, "%.4f") << " nats, untouched non-members " << fmt(mean(untouched), "%.5f") << " (n=" << untouched.size()
             << "), non-member logits bit-identical";
}

// 8
void gradient_check(Outcome& o) {
    SimConfig cfg;
    cfg.vocab_size = 4;
    cfg.seq_len = 2;
    cfg.entropy_coef = 0.05;
    SyntheticPolicy p(cfg, {"micro"});
    oracle::TestRng rng{808};
    std::vector<double> z;
    for (std::size_t pos = 0; pos < 2; ++pos)
        for (double& v : p.logits(0, pos)) z.push_back(v = 2 * rng.uniform() - 1);
    p.targets(0)[0] = 2;
    p.targets(0)[1] = 0;
    const double baseline = 0.7;
    const auto analytic = expected_update_direction(p, 0, baseline);
    const auto fd = oracle::surrogate_gradient_fd(z, 2, 4, {2, 0}, baseline, cfg.entropy_coef, cfg.reward_scale);
    const double err = oracle::relative_error(analytic, fd);
    o.check(err <= 1e-3, "relative error " + fmt(err));
    o.detail << (o.ok ? "relative error " + fmt(err, "%.3g") : "");
}

// 9
void builder_fidelity(Outcome& o) {
    std::vector<DetectionItem> bench;
    for (int i = 0; i < 30; ++i) {
        DetectionItem it;
        it.id = "aime-" + std::to_string(i);
        it.question = "Problem " + std::to_string(i);
        bench.push_back(it);
    }
    std::vector<TrainRecord> corpus;
    for (int i = 0; i < 50; ++i) corpus.push_back({"base-" + std::to_string(i), "text " + std::to_string(i), 1});
    const InjectionConfig ic{0.5, 2, 42};
    const auto a = build_injection(bench, corpus, ic);
    const auto b = build_injection(bench, corpus, ic);
    std::map<std::string, int> copies;
    for (const auto& r : a.train)
        if (r.item_id.rfind("aime-", 0) == 0) copies[r.item_id]++;
    std::size_t members = 0;
    for (const auto& it : a.detection) {
        if (it.label != Label::member) continue;
        ++members;
        o.check(copies[it.id] == 2, it.id + " appears " + std::to_string(copies[it.id]) + " times");
    }
    o.check(members == 15 && copies.size() == 15, "member count " + std::to_string(members));
    o.check(dump_jsonl(a.train) == dump_jsonl(b.train) && dump_jsonl(a.detection) == dump_jsonl(b.detection),
            "two runs differ");
    o.detail << (o.ok ? "15 members x 2 copies, byte-identical reruns" : "");
}

// 10
void prompt_fidelity(Outcome& o) {
    const auto fixture = json::parse(read_file(kData + "/fixtures/critique_fixture.json"));
    const auto golden = read_file(kData + "/golden/critique_prompt.txt");
    const auto rendered =
        render_critique(PromptTemplate{}, fixture.at("question").get<std::string>(), fixture.at("initial_response").get<std::string>());
    const std::string tail = "Please now provide your new, different response:";
    o.check(rendered == golden, "rendered prompt differs from golden file");
    o.check(rendered.size() >= tail.size() && rendered.compare(rendered.size() - tail.size(), tail.size(), tail) == 0,
            "missing closing instruction");
    o.detail << (o.ok ? std::to_string(golden.size()) + " bytes, byte-identical" : "");
}

}  // namespace

int main(int argc, char** argv) {
    for (int i = 1; i < argc; ++i)
        if (std::string(argv[i]) == "--freeze") g_freeze = true;

    struct Entry {
        const char* name;
        double limit_s;
        Criterion fn;
    };
    const std::vector<Entry> criteria = {
        {"penalized cosine oracle", 1, penalized_cosine_oracle},
        {"entropy oracle", 1, entropy_oracle},
        {"AUC/Youden oracle", 10, auc_youden_oracle},
        {"top-K stability", 300, topk_stability},
        {"end-to-end detector ordering", 300, detector_ordering},
        {"dual-stage shape", 600, dual_stage_shape},
        {"collapse signatures", 120, collapse_signatures},
        {"gradient check", 1, gradient_check},
        {"benchmark builder fidelity", 1, builder_fidelity},
        {"prompt fidelity", 1, prompt_fidelity},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            criteria[i].fn(o);
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        o.check(secs < criteria[i].limit_s, "runtime " + fmt(secs, "%.2f") + " s over the " + fmt(criteria[i].limit_s) + " s limit");
        std::printf("%s  %2zu. %-30s %8.2fs  %s\n", o.ok ? "PASS" : "FAIL", i + 1, criteria[i].name, secs, o.detail.str().c_str());
        std::fflush(stdout);
        failed += !o.ok;
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
