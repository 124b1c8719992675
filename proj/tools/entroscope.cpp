// entroscope: contamination detection from the command line.
//
//   entroscope inject   --benchmark B.jsonl [--corpus C.jsonl] --fraction F --occurrences N --seed S --out DIR
//   entroscope score    [--config run.json] --manifest M.jsonl --detectors a,b --out scores.jsonl [--<dotted.key> V ...]
//   entroscope eval     --scores S.jsonl --manifest M.jsonl --out DIR [--dual-stage ...]
//   entroscope simulate [--config sim.json] --out DIR
//   entroscope report   --eval-dir DIR [--format csv|markdown] [--out FILE]

#include <CLI11.hpp>

#include "entroscope/cli.hpp"

namespace cli = entroscope::cli;

int main(int argc, char** argv) {
    CLI::App app{"Detect benchmark contamination from token entropies and likelihoods"};
    app.require_subcommand(1);
    const cli::LineLog err(std::cerr);

    cli::InjectArgs inject;
    std::string inject_corpus;
    auto* inject_cmd = app.add_subcommand("inject", "Build train and detection manifests with seeded injection");
    inject_cmd->add_option("--benchmark", inject.benchmark, "Benchmark items (JSON Lines)")->required();
    inject_cmd->add_option("--corpus", inject_corpus, "Base training corpus (JSON Lines)");
    inject_cmd->add_option("--fraction", inject.fraction, "Fraction of items injected")->capture_default_str();
    inject_cmd->add_option("--occurrences", inject.occurrences, "Copies per injected item")->capture_default_str();
    inject_cmd->add_option("--seed", inject.seed, "Selection and placement seed")->capture_default_str();
    inject_cmd->add_option("--out", inject.out_dir, "Output directory")->required();

    std::string score_config, score_out;
    cli::ScoreArgs score;
    std::map<std::string, std::string> overrides;
    auto* score_cmd = app.add_subcommand("score", "Run detectors against a backend");
    score_cmd->add_option("--config", score_config, "Run config (JSON)");
    score_cmd->add_option("--manifest", score.manifest, "Detection manifest (JSON Lines)")->required();
    score_cmd->add_option("--detectors", score.detectors, "Comma-separated detector names, or 'all'")->capture_default_str();
    score_cmd->add_option("--out", score_out, "Score records path (default: <output_dir>/scores.jsonl)");
    for (const auto& [key, def] : cli::config_keys()) {
        score_cmd->add_option("--" + key, overrides[key], "Override " + key)->group("Config overrides");
    }

    cli::EvalArgs eval;
    std::string eval_aux, eval_quantiles;
    auto* eval_cmd = app.add_subcommand("eval", "AUC, ROC, Youden F1 and histograms per detector");
    eval_cmd->add_option("--scores", eval.scores, "Score records (JSON Lines)")->required();
    eval_cmd->add_option("--manifest", eval.manifest, "Labeled detection manifest")->required();
    eval_cmd->add_option("--out", eval.out_dir, "Output directory")->required();
    eval_cmd->add_flag("--dual-stage", eval.dual_stage, "Also write the dual-stage table");
    eval_cmd->add_option("--dual-main", eval.dual_main, "Detector conditioned on the aux subset")->capture_default_str();
    eval_cmd->add_option("--aux-scores", eval_aux, "Aux score records (default: read from --scores)");
    eval_cmd->add_option("--aux-detector", eval.dual.aux_detector, "Aux detector name")->capture_default_str();
    eval_cmd->add_option("--quantiles", eval_quantiles, "Comma-separated quantiles, descending");
    eval_cmd->add_option("--control-seed", eval.dual.control_seed, "Random-control seed")->capture_default_str();

    cli::SimulateArgs sim;
    std::string sim_config;
    auto* sim_cmd = app.add_subcommand("simulate", "Train the synthetic lab, score and evaluate it");
    sim_cmd->add_option("--config", sim_config, "Simulator config (JSON)");
    sim_cmd->add_option("--out", sim.out_dir, "Output directory")->required();
    sim_cmd->add_option("--parallelism", sim.parallelism, "Scoring threads")->capture_default_str();
    sim_cmd->add_option("--detectors", sim.detectors, "Comma-separated detector names, or 'all'")->capture_default_str();

    std::string report_dir, report_format = "csv", report_out;
    auto* report_cmd = app.add_subcommand("report", "Summarize eval reports as a table");
    report_cmd->add_option("--eval-dir", report_dir, "Directory written by eval")->required();
    report_cmd->add_option("--format", report_format, "csv or markdown")->capture_default_str();
    report_cmd->add_option("--out", report_out, "Write the table here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    return cli::guarded(err, [&] {
        if (*inject_cmd) {
            if (!inject_corpus.empty()) inject.corpus = inject_corpus;
            cli::cmd_inject(inject, std::cout);
        } else if (*score_cmd) {
            std::map<std::string, std::string> given;
            for (const auto& [key, value] : overrides)
                if (score_cmd->count("--" + key)) given[key] = value;
            std::optional<std::filesystem::path> path;
            if (!score_config.empty()) path = score_config;
            score.config = cli::load_run_config(path, given);
            score.out = score_out.empty() ? std::filesystem::path(score.config.output_dir) / "scores.jsonl"
                                          : std::filesystem::path(score_out);
            cli::cmd_score(score, std::cout, err);
        } else if (*eval_cmd) {
            if (!eval_aux.empty()) eval.aux_scores = eval_aux;
            if (!eval_quantiles.empty()) {
                eval.dual.quantiles.clear();
                for (const auto& q : cli::split_list(eval_quantiles)) {
                    try {
                        eval.dual.quantiles.push_back(std::stod(q));
                    } catch (const std::exception&) {
                        throw entroscope::ValidationError("bad quantile '" + q + "'");
                    }
                }
            }
            cli::cmd_eval(eval, std::cout, err);
        } else if (*sim_cmd) {
            if (!sim_config.empty()) sim.sim_config = sim_config;
            cli::cmd_simulate(sim, std::cout, err);
        } else if (*report_cmd) {
            const auto table = cli::cmd_report(report_dir, report_format);
            if (report_out.empty()) {
                std::cout << table;
            } else {
                entroscope::write_file(report_out, table);
            }
        }
    });
}
