#pragma once

// Experiment configuration, single runs, sweeps, and the artifact formats
// consumed by the plotting scripts.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kancal/calibration.hpp"
#include "kancal/data.hpp"
#include "kancal/network.hpp"
#include "kancal/optim.hpp"

namespace kancal {

using Json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kSummarySchemaVersion = 1;
inline constexpr const char* kDataDirEnv = "KANCAL_DATA_DIR";

struct ModelConfig {
    ModelKind kind = ModelKind::kan;
    std::vector<int> hidden{8};  // input and output widths come from the data
    int grid_size = 5;
    int degree = 3;
    double grid_min = -1.0;
    double grid_max = 1.0;
    ShortcutKind shortcut = ShortcutKind::silu;
    Activation activation = Activation::relu;  // MLP hidden layers
};

struct DataConfig {
    std::string source = "synthetic";  // synthetic | idx | csv
    std::optional<std::uint64_t> seed;  // defaults to the experiment seed
    SynthConfig synth;
    std::string images, labels;            // idx
    std::string test_images, test_labels;  // idx, optional
    std::size_t max_samples = 0;           // idx training file, 0 = all
    std::size_t test_max_samples = 0;
    std::string path;                      // csv
    std::string label_column = "label";    // csv
    SplitSpec split;                       // used when there is no separate test file
    double val_fraction = 0.1;             // held out of a separate training file
};

struct EvalConfig {
    int bins = kDefaultBins;
    std::optional<double> smece_bandwidth;  // fixed-point search when unset
    bool tau_curve = true;
    double tau_curve_min = 0.5;
    double tau_curve_max = 5.0;
    int tau_curve_points = 46;
    int logit_bins = 50;
};

/// Training defaults for experiments: smaller batches and a larger step than
/// TrainConfig's library defaults, sized for desk-scale datasets.
TrainConfig experiment_train_defaults();

struct ExperimentConfig {
    int schema_version = kConfigSchemaVersion;
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train = experiment_train_defaults();  // train.seed is derived from seed
    DataConfig data;
    EvalConfig eval;
    std::string output_dir = "runs/default";
    std::string data_dir;  // base for relative dataset paths

    void validate() const;
};

/// Missing fields take defaults; unknown fields are a ConfigError.
ExperimentConfig config_from_json(const Json& json);
/// Fully resolved form; config_from_json(config_to_json(c)) reproduces c.
Json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

struct Overrides {
    std::optional<std::string> output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> data_dir;
};

/// Flag values beat file values. An empty data_dir falls back to the
/// KANCAL_DATA_DIR environment variable.
void apply_overrides(ExperimentConfig& config, const Overrides& overrides);

/// Train/val/test parts with features already mapped into the grid range.
DataSplits prepare_data(const ExperimentConfig& config);
Model build_model(const ExperimentConfig& config, int input_dim, int class_count);
/// config.train with the derived training seed and the eval settings.
TrainConfig resolved_train_config(const ExperimentConfig& config);

struct RunOptions {
    std::optional<std::size_t> max_params;  // skip without writing when exceeded
    std::ostream* log = nullptr;
};

enum class RunStatus { ok, skipped, failed };
std::string to_string(RunStatus status);

struct RunSummary {
    RunStatus status = RunStatus::ok;
    std::string error;
    std::size_t param_count = 0;
    double tau = 1.0;
    CalibrationReport final_report;
    int best_accuracy_epoch = 0;
    double best_accuracy = 0.0;
    int min_ece_epoch = 0;
    double min_ece = 0.0;
    double posthoc_temperature = 1.0;
    CalibrationReport posthoc_report;  // test set under the fitted temperature
};

/// Loads data, trains, and writes config.json, metrics.jsonl,
/// reliability.csv, tau_curve.csv (optional), logit_hist.csv,
/// test_logits.csv, report.json and model.ckpt under output_dir. Nothing is
/// written when loading data or building the model fails.
RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

struct SweepConfig {
    std::string output_dir = "sweeps/default";
    int workers = 1;
    std::optional<std::size_t> budget;
    Json base = Json::object();
    std::vector<std::pair<std::string, Json>> axes;  // dotted path, list of values
};

/// "axes" is either a list of {"path", "values"} objects, kept in order, or
/// an object mapping path to values, taken in key order.
SweepConfig sweep_config_from_json(const Json& json);
SweepConfig load_sweep_config(const std::filesystem::path& path);

struct SweepRun {
    std::size_t index = 0;
    std::vector<Json> axis_values;
    ExperimentConfig config;
    RunSummary summary;
};

struct SweepResult {
    std::vector<std::string> axis_paths;
    std::vector<SweepRun> runs;
};

/// Cartesian product over the axes, first axis varying slowest. Run i uses
/// seed base.seed + i unless "seed" is an axis. Runs go to
/// output_dir/run_NNNN; summary.csv is written after all runs finish.
SweepResult run_sweep(const SweepConfig& sweep, const Overrides& overrides = {},
                      std::ostream* log = nullptr);

std::string summary_csv(const SweepResult& result);

struct LogitHistogram {
    std::vector<double> edges;  // bins + 1 ascending values
    std::vector<std::size_t> counts;
    double mean = 0.0;
    double stddev = 0.0;  // sample standard deviation over all values
};

/// Equal-width bins over [min, max] of all entries, last bin closed. A
/// constant input widens the range to value +- 0.5.
LogitHistogram logit_histogram(const Matrix& logits, int bins);
std::string logit_hist_csv(const LogitHistogram& hist);
std::string tau_curve_csv(const TauCurve& curve);

/// Header "label,l0,...,l{K-1}".
std::string logits_csv(const Matrix& logits, const Labels& labels);
std::pair<Matrix, Labels> read_logits_csv(const std::filesystem::path& path);

Json report_to_json(const CalibrationReport& report);

struct PosthocResult {
    PosthocFit fit;
    CalibrationReport before;
    CalibrationReport after;
};

/// Fits T on `fit_logits` and reports `eval_logits` at the checkpoint's tau
/// before and at tau * T after.
PosthocResult posthoc(const Matrix& fit_logits, const Labels& fit_labels, const Matrix& eval_logits,
                      const Labels& eval_labels, double tau, int bins = kDefaultBins);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace kancal
