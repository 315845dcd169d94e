// kancal: train and evaluate KAN/MLP classifiers with calibration metrics.
//
// Exit codes: 0 success, 1 unexpected error, 2 invalid configuration,
// 3 missing or malformed data, 4 training diverged.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "kancal/checkpoint.hpp"
#include "kancal/experiment.hpp"

namespace fs = std::filesystem;
using namespace kancal;

namespace {

struct CommonFlags {
    std::string config;
    std::string output_dir;
    std::string data_dir;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--output-dir", flags.output_dir, "Directory for all artifacts");
    cmd->add_option("--data-dir", flags.data_dir,
                    std::string("Base directory for relative dataset paths (default $") + kDataDirEnv + ")");
    cmd->add_option("--seed", flags.seed, "Override the experiment seed");
    cmd->add_flag("--quiet", flags.quiet, "Suppress progress output");
}

Overrides overrides_from(const CommonFlags& flags) {
    Overrides o;
    if (!flags.output_dir.empty()) o.output_dir = flags.output_dir;
    if (!flags.data_dir.empty()) o.data_dir = flags.data_dir;
    o.seed = flags.seed;
    return o;
}

/// Config stored in the checkpoint, or the --config file when given.
ExperimentConfig checkpoint_config(const Checkpoint& cp, const CommonFlags& flags) {
    ExperimentConfig config;
    if (!flags.config.empty()) {
        config = load_config(flags.config);
    } else {
        const Json meta = Json::parse(cp.metadata_json);
        if (!meta.contains("config"))
            throw ConfigError("checkpoint carries no config; pass --config");
        config = config_from_json(meta.at("config"));
    }
    Overrides o = overrides_from(flags);
    o.output_dir.reset();
    apply_overrides(config, o);
    return config;
}

void check_architecture(const Model& model, const DataSplits& data) {
    if (model.input_dim() != data.train.dim() || model.class_count() < data.train.class_count)
        throw ConfigError("checkpoint architecture does not match the data (" +
                          std::to_string(model.input_dim()) + " inputs, " +
                          std::to_string(model.class_count()) + " outputs)");
}

fs::path output_dir_for(const CommonFlags& flags, const fs::path& fallback) {
    return flags.output_dir.empty() ? fallback : fs::path(flags.output_dir);
}

int cmd_run(const CommonFlags& flags) {
    ExperimentConfig config = flags.config.empty() ? ExperimentConfig{} : load_config(flags.config);
    apply_overrides(config, overrides_from(flags));
    RunOptions options;
    options.log = flags.quiet ? nullptr : &std::cerr;
    const RunSummary s = run_experiment(config, options);
    std::cout << Json{{"output_dir", config.output_dir},
                      {"param_count", s.param_count},
                      {"tau", s.tau},
                      {"final", report_to_json(s.final_report)},
                      {"posthoc_temperature", s.posthoc_temperature}}
                     .dump(2)
              << '\n';
    return 0;
}

int cmd_sweep(const CommonFlags& flags, int workers, std::optional<std::size_t> budget) {
    if (flags.config.empty()) throw ConfigError("sweep needs --config");
    SweepConfig sweep = load_sweep_config(flags.config);
    if (workers > 0) sweep.workers = workers;
    if (budget) sweep.budget = budget;
    const SweepResult result = run_sweep(sweep, overrides_from(flags), flags.quiet ? nullptr : &std::cerr);
    std::size_t ok = 0, skipped = 0, failed = 0;
    for (const auto& run : result.runs) {
        ok += run.summary.status == RunStatus::ok;
        skipped += run.summary.status == RunStatus::skipped;
        failed += run.summary.status == RunStatus::failed;
    }
    const std::string out = flags.output_dir.empty() ? sweep.output_dir : flags.output_dir;
    std::cout << "runs=" << result.runs.size() << " ok=" << ok << " skipped=" << skipped
              << " failed=" << failed << " summary=" << (fs::path(out) / "summary.csv").string() << '\n';
    return 0;
}

int cmd_posthoc(const CommonFlags& flags, const std::string& checkpoint) {
    const Checkpoint cp = load_checkpoint(checkpoint);
    const ExperimentConfig config = checkpoint_config(cp, flags);
    const DataSplits data = prepare_data(config);
    check_architecture(cp.model, data);
    const PosthocResult r = posthoc(predict_logits(cp.model, data.val.features), data.val.labels,
                                    predict_logits(cp.model, data.test.features), data.test.labels, cp.tau,
                                    config.eval.bins);
    const Json out = {{"temperature", r.fit.temperature},
                      {"tau", cp.tau},
                      {"degenerate", r.fit.degenerate},
                      {"val_nll_before", r.fit.nll_before},
                      {"val_nll_after", r.fit.nll_after},
                      {"before", report_to_json(r.before)},
                      {"after", report_to_json(r.after)}};
    const fs::path dir = output_dir_for(flags, fs::path(checkpoint).parent_path());
    if (!dir.empty()) fs::create_directories(dir);
    write_text(dir / "posthoc.json", out.dump(2) + "\n");
    std::cout << out.dump(2) << '\n';
    return 0;
}

int cmd_logits(const CommonFlags& flags, const std::string& checkpoint, int bins, const std::string& part) {
    const Checkpoint cp = load_checkpoint(checkpoint);
    const ExperimentConfig config = checkpoint_config(cp, flags);
    const DataSplits data = prepare_data(config);
    check_architecture(cp.model, data);
    const Dataset& set = part == "train" ? data.train : part == "val" ? data.val : data.test;
    const LogitHistogram hist = logit_histogram(predict_logits(cp.model, set.features), bins);
    const fs::path dir = output_dir_for(flags, fs::path(checkpoint).parent_path());
    if (!dir.empty()) fs::create_directories(dir);
    write_text(dir / "logit_hist.csv", logit_hist_csv(hist));
    std::printf("mean=%.10g stddev=%.10g bins=%d\n", hist.mean, hist.stddev, bins);
    return 0;
}

int cmd_metrics(const CommonFlags& flags, const std::string& logits_path, int bins, double tau,
                std::optional<double> smece_bw) {
    const auto [logits, labels] = read_logits_csv(logits_path);
    const EvalSet eval = EvalSet::from_logits(logits, labels, tau);
    const CalibrationReport report = evaluate(eval, bins, smece_bw);
    const Json out = report_to_json(report);
    if (!flags.output_dir.empty()) {
        fs::create_directories(flags.output_dir);
        write_text(fs::path(flags.output_dir) / "metrics.json", out.dump(2) + "\n");
        write_text(fs::path(flags.output_dir) / "reliability.csv", reliability_csv(bin_stats(eval, bins)));
    }
    std::cout << out.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kolmogorov-Arnold network calibration experiments"};
    app.require_subcommand(1);

    CommonFlags flags;
    int workers = 0;
    std::optional<std::size_t> budget;
    std::string checkpoint, part = "test", logits_path;
    int bins = 50, metric_bins = kDefaultBins;
    double tau = 1.0;
    std::optional<double> smece_bw;

    auto* run = app.add_subcommand("run", "Train one configuration and write its artifacts");
    run->add_option("--config", flags.config, "Experiment JSON")->check(CLI::ExistingFile);
    add_common(run, flags);

    auto* sweep = app.add_subcommand("sweep", "Run the Cartesian product of a grid config");
    sweep->add_option("--config", flags.config, "Sweep JSON")->required()->check(CLI::ExistingFile);
    sweep->add_option("--workers", workers, "Parallel runs")->check(CLI::PositiveNumber);
    sweep->add_option("--budget", budget, "Skip runs with more parameters than this");
    add_common(sweep, flags);

    auto* ph = app.add_subcommand("posthoc", "Fit a post-hoc temperature on the validation split");
    ph->add_option("--checkpoint", checkpoint, "model.ckpt")->required()->check(CLI::ExistingFile);
    ph->add_option("--config", flags.config, "Override the config stored in the checkpoint");
    add_common(ph, flags);

    auto* lg = app.add_subcommand("logits", "Histogram the logits of a checkpoint");
    lg->add_option("--checkpoint", checkpoint, "model.ckpt")->required()->check(CLI::ExistingFile);
    lg->add_option("--config", flags.config, "Override the config stored in the checkpoint");
    lg->add_option("--bins", bins, "Histogram bins")->check(CLI::PositiveNumber);
    lg->add_option("--split", part, "Data part")->check(CLI::IsMember({"train", "val", "test"}));
    add_common(lg, flags);

    auto* mt = app.add_subcommand("metrics", "Calibration metrics of a dumped logits CSV");
    mt->add_option("--logits", logits_path, "CSV with header label,l0,...")->required();
    mt->add_option("--bins", metric_bins, "Equal-width bins")->check(CLI::PositiveNumber);
    mt->add_option("--tau", tau, "Divide logits by this temperature")->check(CLI::PositiveNumber);
    mt->add_option("--smece-bandwidth", smece_bw, "Fixed smooth-ECE bandwidth");
    add_common(mt, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*run) return cmd_run(flags);
        if (*sweep) return cmd_sweep(flags, workers, budget);
        if (*ph) return cmd_posthoc(flags, checkpoint);
        if (*lg) return cmd_logits(flags, checkpoint, bins, part);
        if (*mt) return cmd_metrics(flags, logits_path, metric_bins, tau, smece_bw);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return 4;
    } catch (const Json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
