#include "kancal/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "kancal/checkpoint.hpp"

namespace kancal {

namespace fs = std::filesystem;

namespace {

// Seed streams derived from the experiment seed.
constexpr std::uint64_t kStreamSynth = 1;
constexpr std::uint64_t kStreamSplit = 2;
constexpr std::uint64_t kStreamInit = 3;
constexpr std::uint64_t kStreamTrain = 4;

/// Strict reader over one JSON object: every key must be consumed.
class Section {
public:
    Section(const Json& json, std::string name) : json_(json), name_(std::move(name)) {
        if (!json_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
    }

    bool has(const std::string& key) {
        used_.insert(key);
        return json_.contains(key) && !json_.at(key).is_null();
    }

    template <typename T>
    void read(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = json_.at(key).get<T>();
        } catch (const Json::exception&) {
            throw ConfigError("config: " + where(key) + " has the wrong type");
        }
    }

    template <typename T>
    void read(const std::string& key, std::optional<T>& out) {
        if (!has(key)) return;
        T value{};
        read(key, value);
        out = value;
    }

    void read_range(const std::string& key, double& lo, double& hi) {
        if (!has(key)) return;
        const Json& v = json_.at(key);
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw ConfigError("config: " + where(key) + " must be [lo, hi]");
        lo = v[0].get<double>();
        hi = v[1].get<double>();
    }

    Section child(const std::string& key) {
        used_.insert(key);
        static const Json empty = Json::object();
        if (!json_.contains(key) || json_.at(key).is_null()) return Section(empty, name_ + "." + key);
        return Section(json_.at(key), name_ + "." + key);
    }

    void finish() const {
        for (const auto& [key, value] : json_.items())
            if (!used_.count(key)) throw ConfigError("config: unknown field " + where(key));
    }

    std::string where(const std::string& key) const { return "'" + name_ + "." + key + "'"; }

private:
    const Json& json_;
    std::string name_;
    std::set<std::string> used_;
};

fs::path resolve_data_path(const ExperimentConfig& config, const std::string& path) {
    fs::path p(path);
    if (p.is_relative() && !config.data_dir.empty()) return fs::path(config.data_dir) / p;
    return p;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string join_widths(const std::vector<int>& widths) {
    std::string out;
    for (std::size_t i = 0; i < widths.size(); ++i) out += (i ? "x" : "") + std::to_string(widths[i]);
    return out;
}

void log_line(std::ostream* log, const std::string& line) {
    if (!log) return;
    static std::mutex mutex;
    std::lock_guard<std::mutex> lock(mutex);
    *log << line << '\n' << std::flush;
}

Json epoch_to_json(const EpochRecord& record) {
    return {{"epoch", record.epoch},
            {"train_loss", record.train_loss},
            {"lr", record.lr},
            {"tau", record.tau},
            {"test", report_to_json(record.report)}};
}

}  // namespace

TrainConfig experiment_train_defaults() {
    TrainConfig t;
    t.epochs = 20;
    t.batch_size = 32;
    t.lr = 1e-2;
    t.lr_after_decay = 1e-3;
    t.decay_epoch = 10;
    return t;
}

void ExperimentConfig::validate() const {
    if (schema_version != kConfigSchemaVersion)
        throw ConfigError("config: unsupported schema_version " + std::to_string(schema_version));
    for (int w : model.hidden)
        if (w < 1) throw ConfigError("config: hidden widths must be >= 1");
    if (model.kind == ModelKind::kan) {
        Spec spec{model.grid_min, model.grid_max, model.grid_size, model.degree};
        spec.validate();
    }
    if (!(model.grid_min < model.grid_max)) throw ConfigError("config: grid_range must have lo < hi");
    train.validate();

    if (data.source == "synthetic") {
        if (data.synth.samples < 1) throw ConfigError("config: data.samples must be >= 1");
    } else if (data.source == "idx") {
        if (data.images.empty() || data.labels.empty())
            throw ConfigError("config: idx data needs 'images' and 'labels'");
        if (data.test_images.empty() != data.test_labels.empty())
            throw ConfigError("config: idx test data needs both 'test_images' and 'test_labels'");
    } else if (data.source == "csv") {
        if (data.path.empty()) throw ConfigError("config: csv data needs 'path'");
    } else {
        throw ConfigError("config: unknown data source '" + data.source + "'");
    }
    data.split.validate();
    if (!(data.val_fraction > 0 && data.val_fraction < 1))
        throw ConfigError("config: data.val_fraction must be in (0, 1)");

    if (eval.bins < 1) throw ConfigError("config: eval.bins must be >= 1");
    if (eval.smece_bandwidth && !(*eval.smece_bandwidth > 0))
        throw ConfigError("config: eval.smece_bandwidth must be positive");
    if (!(eval.tau_curve_min > 0 && eval.tau_curve_min < eval.tau_curve_max))
        throw ConfigError("config: eval.tau_curve_range must satisfy 0 < lo < hi");
    if (eval.tau_curve_points < 2) throw ConfigError("config: eval.tau_curve_points must be >= 2");
    if (eval.logit_bins < 1) throw ConfigError("config: eval.logit_bins must be >= 1");
    if (output_dir.empty()) throw ConfigError("config: output_dir must not be empty");
}

ExperimentConfig config_from_json(const Json& json) {
    ExperimentConfig c;
    Section top(json, "config");
    top.read("schema_version", c.schema_version);
    top.read("seed", c.seed);
    top.read("output_dir", c.output_dir);
    top.read("data_dir", c.data_dir);

    {
        Section m = top.child("model");
        std::string kind = to_string(c.model.kind), shortcut = to_string(c.model.shortcut),
                    activation = to_string(c.model.activation);
        m.read("kind", kind);
        m.read("hidden", c.model.hidden);
        m.read("grid_size", c.model.grid_size);
        m.read("degree", c.model.degree);
        m.read_range("grid_range", c.model.grid_min, c.model.grid_max);
        m.read("shortcut", shortcut);
        m.read("activation", activation);
        m.finish();
        c.model.kind = parse_model_kind(kind);
        c.model.shortcut = parse_shortcut(shortcut);
        c.model.activation = parse_activation(activation);
    }
    {
        Section t = top.child("train");
        t.read("epochs", c.train.epochs);
        t.read("batch_size", c.train.batch_size);
        t.read("lr", c.train.lr);
        t.read("lr_after_decay", c.train.lr_after_decay);
        t.read("decay_epoch", c.train.decay_epoch);
        t.read("lr_tau", c.train.lr_tau);
        t.read("tau0", c.train.tau0);
        t.read("tau_min", c.train.tau_min);
        t.read("tau_max", c.train.tau_max);
        t.read("tsl", c.train.tsl_enabled);
        std::string loss = c.train.loss.name();
        t.read("loss", loss);
        c.train.loss = LossKind::parse(loss);
        t.read("gamma", c.train.loss.gamma);
        t.read("alpha", c.train.loss.alpha);
        t.read("lambda", c.train.loss.lambda);
        t.finish();
    }
    {
        Section d = top.child("data");
        d.read("source", c.data.source);
        d.read("seed", c.data.seed);
        d.read("samples", c.data.synth.samples);
        d.read("features", c.data.synth.features);
        d.read("classes", c.data.synth.classes);
        d.read("priors", c.data.synth.priors);
        d.read("separation", c.data.synth.separation);
        d.read("images", c.data.images);
        d.read("labels", c.data.labels);
        d.read("test_images", c.data.test_images);
        d.read("test_labels", c.data.test_labels);
        d.read("max_samples", c.data.max_samples);
        d.read("test_max_samples", c.data.test_max_samples);
        d.read("path", c.data.path);
        d.read("label_column", c.data.label_column);
        d.read("val_fraction", c.data.val_fraction);
        Section s = d.child("split");
        s.read("train", c.data.split.train);
        s.read("val", c.data.split.val);
        s.read("test", c.data.split.test);
        s.finish();
        d.finish();
    }
    {
        Section e = top.child("eval");
        e.read("bins", c.eval.bins);
        e.read("smece_bandwidth", c.eval.smece_bandwidth);
        e.read("tau_curve", c.eval.tau_curve);
        e.read_range("tau_curve_range", c.eval.tau_curve_min, c.eval.tau_curve_max);
        e.read("tau_curve_points", c.eval.tau_curve_points);
        e.read("logit_bins", c.eval.logit_bins);
        e.finish();
    }
    top.finish();

    c.train.eval_bins = c.eval.bins;
    c.train.eval_smece_bandwidth = c.eval.smece_bandwidth;
    c.validate();
    return c;
}

Json config_to_json(const ExperimentConfig& c) {
    Json j;
    j["schema_version"] = c.schema_version;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["data_dir"] = c.data_dir;
    j["model"] = {{"kind", to_string(c.model.kind)},
                  {"hidden", c.model.hidden},
                  {"grid_size", c.model.grid_size},
                  {"degree", c.model.degree},
                  {"grid_range", {c.model.grid_min, c.model.grid_max}},
                  {"shortcut", to_string(c.model.shortcut)},
                  {"activation", to_string(c.model.activation)}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"lr", c.train.lr},
                  {"lr_after_decay", c.train.lr_after_decay},
                  {"decay_epoch", c.train.decay_epoch},
                  {"lr_tau", c.train.tau_learning_rate()},
                  {"tau0", c.train.tau0},
                  {"tau_min", c.train.tau_min},
                  {"tau_max", c.train.tau_max},
                  {"tsl", c.train.tsl_enabled},
                  {"loss", c.train.loss.name()},
                  {"gamma", c.train.loss.gamma},
                  {"alpha", c.train.loss.alpha},
                  {"lambda", c.train.loss.lambda}};
    Json data = {{"source", c.data.source},
                 {"samples", c.data.synth.samples},
                 {"features", c.data.synth.features},
                 {"classes", c.data.synth.classes},
                 {"priors", c.data.synth.priors},
                 {"separation", c.data.synth.separation},
                 {"images", c.data.images},
                 {"labels", c.data.labels},
                 {"test_images", c.data.test_images},
                 {"test_labels", c.data.test_labels},
                 {"max_samples", c.data.max_samples},
                 {"test_max_samples", c.data.test_max_samples},
                 {"path", c.data.path},
                 {"label_column", c.data.label_column},
                 {"val_fraction", c.data.val_fraction},
                 {"split", {{"train", c.data.split.train}, {"val", c.data.split.val}, {"test", c.data.split.test}}}};
    data["seed"] = c.data.seed ? Json(*c.data.seed) : Json(nullptr);
    j["data"] = data;
    j["eval"] = {{"bins", c.eval.bins},
                 {"smece_bandwidth", c.eval.smece_bandwidth ? Json(*c.eval.smece_bandwidth) : Json(nullptr)},
                 {"tau_curve", c.eval.tau_curve},
                 {"tau_curve_range", {c.eval.tau_curve_min, c.eval.tau_curve_max}},
                 {"tau_curve_points", c.eval.tau_curve_points},
                 {"logit_bins", c.eval.logit_bins}};
    return j;
}

namespace {

Json parse_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
}

}  // namespace

ExperimentConfig load_config(const fs::path& path) { return config_from_json(parse_json_file(path)); }

void apply_overrides(ExperimentConfig& config, const Overrides& overrides) {
    if (overrides.output_dir) config.output_dir = *overrides.output_dir;
    if (overrides.seed) config.seed = *overrides.seed;
    if (overrides.data_dir) config.data_dir = *overrides.data_dir;
    if (config.data_dir.empty())
        if (const char* env = std::getenv(kDataDirEnv)) config.data_dir = env;
    config.validate();
}

DataSplits prepare_data(const ExperimentConfig& config) {
    const std::uint64_t data_seed = config.data.seed.value_or(config.seed);
    const FeatureRange range{config.model.grid_min, config.model.grid_max};
    SplitSpec split_spec = config.data.split;
    split_spec.seed = Rng::derive(data_seed, kStreamSplit);

    if (config.data.source == "synthetic") {
        SynthConfig synth = config.data.synth;
        synth.seed = Rng::derive(data_seed, kStreamSynth);
        Dataset data = synth_classification(synth);
        standardize_to_range(data, range);
        return split(data, split_spec);
    }
    if (config.data.source == "csv") {
        return split(load_csv(resolve_data_path(config, config.data.path), config.data.label_column, range),
                     split_spec);
    }

    Dataset train = load_idx(resolve_data_path(config, config.data.images),
                             resolve_data_path(config, config.data.labels), range, config.data.max_samples);
    if (config.data.test_images.empty()) return split(train, split_spec);
    Dataset test = load_idx(resolve_data_path(config, config.data.test_images),
                            resolve_data_path(config, config.data.test_labels), range,
                            config.data.test_max_samples);
    if (test.dim() != train.dim()) throw DataError("idx: train and test images differ in size");
    const int classes = std::max(train.class_count, test.class_count);
    train.class_count = classes;
    test.class_count = classes;
    auto [fit, val] = split_two(train, 1.0 - config.data.val_fraction, split_spec.seed);
    return {std::move(fit), std::move(val), std::move(test)};
}

Model build_model(const ExperimentConfig& config, int input_dim, int class_count) {
    std::vector<int> widths{input_dim};
    widths.insert(widths.end(), config.model.hidden.begin(), config.model.hidden.end());
    widths.push_back(class_count);
    Rng rng(Rng::derive(config.seed, kStreamInit));
    if (config.model.kind == ModelKind::kan) {
        const Spec spec{config.model.grid_min, config.model.grid_max, config.model.grid_size,
                        config.model.degree};
        return make_kan(widths, spec, config.model.shortcut, rng);
    }
    return make_mlp(widths, config.model.activation, rng);
}

std::string to_string(RunStatus status) {
    switch (status) {
        case RunStatus::ok: return "ok";
        case RunStatus::skipped: return "skipped";
        case RunStatus::failed: return "failed";
    }
    return "unknown";
}

Json report_to_json(const CalibrationReport& r) {
    return {{"accuracy", r.accuracy},      {"ece", r.ece},   {"ada_ece", r.ada_ece},
            {"classwise_ece", r.classwise_ece}, {"mce", r.mce}, {"smece", r.smece},
            {"smece_bandwidth", r.smece_bandwidth}, {"nll", r.nll}, {"brier", r.brier},
            {"bins", r.bins}};
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

PosthocResult posthoc(const Matrix& fit_logits, const Labels& fit_labels, const Matrix& eval_logits,
                      const Labels& eval_labels, double tau, int bins) {
    if (fit_logits.rows() == 0) throw DataError("posthoc: empty fitting set");
    PosthocResult out;
    out.fit = fit_posthoc_temperature(scale_logits(fit_logits, tau), fit_labels);
    out.before = evaluate(EvalSet::from_logits(eval_logits, eval_labels, tau), bins);
    out.after = evaluate(EvalSet::from_logits(eval_logits, eval_labels, tau * out.fit.temperature), bins);
    return out;
}

TrainConfig resolved_train_config(const ExperimentConfig& config) {
    TrainConfig t = config.train;
    t.seed = Rng::derive(config.seed, kStreamTrain);
    t.eval_bins = config.eval.bins;
    t.eval_smece_bandwidth = config.eval.smece_bandwidth;
    return t;
}

RunSummary run_experiment(const ExperimentConfig& config, const RunOptions& options) {
    config.validate();
    const DataSplits data = prepare_data(config);
    const int classes = data.train.class_count;
    Model model = build_model(config, static_cast<int>(data.train.dim()), classes);

    RunSummary summary;
    summary.param_count = param_count(model);
    if (options.max_params && summary.param_count > *options.max_params) {
        summary.status = RunStatus::skipped;
        summary.error = "param_count " + std::to_string(summary.param_count) + " exceeds budget " +
                        std::to_string(*options.max_params);
        return summary;
    }

    const fs::path out = config.output_dir;
    fs::create_directories(out);
    const Json resolved = config_to_json(config);
    write_text(out / "config.json", resolved.dump(2) + "\n");

    const TrainConfig train_config = resolved_train_config(config);

    std::ofstream metrics(out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) throw DataError("cannot write " + (out / "metrics.jsonl").string());
    const auto on_epoch = [&](const EpochRecord& record) {
        metrics << epoch_to_json(record).dump() << '\n' << std::flush;
        if (record.epoch == 1 || record.report.accuracy > summary.best_accuracy) {
            summary.best_accuracy = record.report.accuracy;
            summary.best_accuracy_epoch = record.epoch;
        }
        if (record.epoch == 1 || record.report.ece < summary.min_ece) {
            summary.min_ece = record.report.ece;
            summary.min_ece_epoch = record.epoch;
        }
        char line[160];
        std::snprintf(line, sizeof line, "epoch %d/%d loss=%.5f acc=%.4f ece=%.4f tau=%.4f", record.epoch,
                      config.train.epochs, record.train_loss, record.report.accuracy, record.report.ece,
                      record.tau);
        log_line(options.log, line);
    };
    const TrainResult trained = train(model, data.train, data.test, train_config, {}, on_epoch);
    metrics.close();

    summary.tau = trained.tau;
    summary.final_report = trained.history.epochs.back().report;

    const Matrix test_logits = predict_logits(model, data.test.features);
    const EvalSet test_eval = EvalSet::from_logits(test_logits, data.test.labels, trained.tau);
    write_text(out / "reliability.csv", reliability_csv(bin_stats(test_eval, config.eval.bins)));
    const Matrix val_logits = predict_logits(model, data.val.features);
    if (config.eval.tau_curve) {
        // Raw validation logits: the grid values are absolute temperatures.
        const TauCurve curve =
            tau_sweep(val_logits, data.val.labels,
                      linspace(config.eval.tau_curve_min, config.eval.tau_curve_max, config.eval.tau_curve_points),
                      config.eval.bins);
        write_text(out / "tau_curve.csv", tau_curve_csv(curve));
    }
    write_text(out / "logit_hist.csv", logit_hist_csv(logit_histogram(test_logits, config.eval.logit_bins)));
    write_text(out / "test_logits.csv", logits_csv(scale_logits(test_logits, trained.tau), data.test.labels));

    const PosthocResult ph =
        posthoc(val_logits, data.val.labels, test_logits, data.test.labels, trained.tau, config.eval.bins);
    summary.posthoc_temperature = ph.fit.temperature;
    summary.posthoc_report = ph.after;

    Json report = {{"status", "ok"},
                   {"param_count", summary.param_count},
                   {"tau", summary.tau},
                   {"final", report_to_json(summary.final_report)},
                   {"best", {{"accuracy", summary.best_accuracy},
                             {"accuracy_epoch", summary.best_accuracy_epoch},
                             {"ece", summary.min_ece},
                             {"ece_epoch", summary.min_ece_epoch}}},
                   {"posthoc", {{"temperature", ph.fit.temperature},
                                {"val_nll_before", ph.fit.nll_before},
                                {"val_nll_after", ph.fit.nll_after},
                                {"degenerate", ph.fit.degenerate},
                                {"test_after", report_to_json(ph.after)}}}};
    write_text(out / "report.json", report.dump(2) + "\n");

    Checkpoint cp{model, trained.tau, Json{{"config", resolved}}.dump()};
    save_checkpoint(out / "model.ckpt", cp);
    return summary;
}

SweepConfig sweep_config_from_json(const Json& json) {
    SweepConfig s;
    Section top(json, "sweep");
    int schema_version = kConfigSchemaVersion;
    top.read("schema_version", schema_version);
    if (schema_version != kConfigSchemaVersion) throw ConfigError("sweep: unsupported schema_version");
    top.read("output_dir", s.output_dir);
    top.read("workers", s.workers);
    top.read("budget", s.budget);
    if (top.has("base")) {
        s.base = json.at("base");
        if (!s.base.is_object()) throw ConfigError("sweep: 'base' must be an object");
    }
    if (top.has("axes")) {
        const Json& axes = json.at("axes");
        const auto add = [&](const std::string& path, const Json& values) {
            if (path.empty()) throw ConfigError("sweep: axis path must not be empty");
            if (!values.is_array() || values.empty())
                throw ConfigError("sweep: axis '" + path + "' must be a nonempty list");
            s.axes.emplace_back(path, values);
        };
        if (axes.is_object()) {
            for (const auto& [path, values] : axes.items()) add(path, values);
        } else if (axes.is_array()) {
            for (const Json& axis : axes) {
                if (!axis.is_object() || !axis.contains("path") || !axis.contains("values") ||
                    !axis.at("path").is_string())
                    throw ConfigError("sweep: list axes need 'path' and 'values'");
                add(axis.at("path").get<std::string>(), axis.at("values"));
            }
        } else {
            throw ConfigError("sweep: 'axes' must be an object or a list");
        }
    }
    top.finish();
    if (s.workers < 1) throw ConfigError("sweep: workers must be >= 1");
    return s;
}

SweepConfig load_sweep_config(const fs::path& path) { return sweep_config_from_json(parse_json_file(path)); }

SweepResult run_sweep(const SweepConfig& sweep, const Overrides& overrides, std::ostream* log) {
    SweepResult result;
    bool seed_axis = false;
    std::size_t total = 1;
    for (const auto& [path, values] : sweep.axes) {
        result.axis_paths.push_back(path);
        seed_axis = seed_axis || path == "seed";
        total *= values.size();
    }

    Json base = sweep.base;
    if (overrides.seed) base["seed"] = *overrides.seed;
    const std::uint64_t base_seed = base.value("seed", std::uint64_t{0});
    const fs::path out = overrides.output_dir ? fs::path(*overrides.output_dir) : fs::path(sweep.output_dir);

    // Resolve every child config up front; invalid combinations become failed rows.
    result.runs.resize(total);
    std::vector<std::string> config_errors(total);
    for (std::size_t i = 0; i < total; ++i) {
        SweepRun& run = result.runs[i];
        run.index = i;
        Json child = base;
        std::size_t rem = i;
        std::vector<std::size_t> pick(sweep.axes.size());
        for (std::size_t a = sweep.axes.size(); a-- > 0;) {
            pick[a] = rem % sweep.axes[a].second.size();
            rem /= sweep.axes[a].second.size();
        }
        for (std::size_t a = 0; a < sweep.axes.size(); ++a) {
            const Json& value = sweep.axes[a].second[pick[a]];
            run.axis_values.push_back(value);
            std::string pointer = "/" + sweep.axes[a].first;
            std::replace(pointer.begin(), pointer.end(), '.', '/');
            try {
                child[Json::json_pointer(pointer)] = value;
            } catch (const Json::exception& e) {
                config_errors[i] = "axis '" + sweep.axes[a].first + "': " + e.what();
            }
        }
        if (!seed_axis) child["seed"] = base_seed + i;
        char dir[32];
        std::snprintf(dir, sizeof dir, "run_%04zu", i);
        child["output_dir"] = (out / dir).string();
        if (!config_errors[i].empty()) continue;
        try {
            run.config = config_from_json(child);
            Overrides child_overrides;
            child_overrides.data_dir = overrides.data_dir;
            apply_overrides(run.config, child_overrides);
        } catch (const std::exception& e) {
            config_errors[i] = e.what();
        }
    }

    const std::optional<std::size_t> budget = sweep.budget;
    std::atomic<std::size_t> next{0};
    const auto worker = [&]() {
        for (std::size_t i = next++; i < total; i = next++) {
            SweepRun& run = result.runs[i];
            if (!config_errors[i].empty()) {
                run.summary.status = RunStatus::failed;
                run.summary.error = "ConfigError: " + config_errors[i];
            } else {
                try {
                    run.summary = run_experiment(run.config, RunOptions{budget, nullptr});
                } catch (const ConfigError& e) {
                    run.summary.status = RunStatus::failed;
                    run.summary.error = std::string("ConfigError: ") + e.what();
                } catch (const DataError& e) {
                    run.summary.status = RunStatus::failed;
                    run.summary.error = std::string("DataError: ") + e.what();
                } catch (const DivergenceError& e) {
                    run.summary.status = RunStatus::failed;
                    run.summary.error = std::string("DivergenceError: ") + e.what();
                } catch (const std::exception& e) {
                    run.summary.status = RunStatus::failed;
                    run.summary.error = e.what();
                }
            }
            std::string line = "run " + std::to_string(i + 1) + "/" + std::to_string(total) + " " +
                               to_string(run.summary.status);
            if (run.summary.status == RunStatus::ok)
                line += " acc=" + format_double(run.summary.final_report.accuracy) +
                        " ece=" + format_double(run.summary.final_report.ece);
            else
                line += ": " + run.summary.error;
            log_line(log, line);
        }
    };

    const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(sweep.workers), total));
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    fs::create_directories(out);
    Json snapshot = {{"schema_version", kConfigSchemaVersion},
                     {"output_dir", out.string()},
                     {"workers", sweep.workers},
                     {"budget", budget ? Json(*budget) : Json(nullptr)},
                     {"base", base},
                     {"axes", Json::array()}};
    for (const auto& [path, values] : sweep.axes) snapshot["axes"].push_back({{"path", path}, {"values", values}});
    write_text(out / "sweep.json", snapshot.dump(2) + "\n");
    write_text(out / "summary.csv", summary_csv(result));
    return result;
}

std::string summary_csv(const SweepResult& result) {
    static const char* kColumns[] = {
        "schema_version", "run", "status", "error", "seed", "model_kind", "hidden", "grid_size", "degree",
        "grid_min", "grid_max", "shortcut", "loss", "tsl", "param_count", "tau", "accuracy", "ece",
        "ada_ece", "classwise_ece", "mce", "smece", "nll", "brier", "best_accuracy", "best_accuracy_epoch",
        "min_ece", "min_ece_epoch", "posthoc_temperature", "posthoc_ece"};
    std::ostringstream os;
    bool first = true;
    for (const char* col : kColumns) {
        os << (first ? "" : ",") << col;
        first = false;
    }
    for (const auto& path : result.axis_paths) os << "," << csv_field("axis." + path);
    os << '\n';

    for (const SweepRun& run : result.runs) {
        const RunSummary& s = run.summary;
        const ExperimentConfig& c = run.config;
        const bool ok = s.status == RunStatus::ok;
        const bool configured = ok || s.status == RunStatus::skipped;
        const auto num = [&](double v) { return ok ? format_double(v) : std::string(); };
        std::vector<std::string> f;
        f.push_back(std::to_string(kSummarySchemaVersion));
        f.push_back(std::to_string(run.index));
        f.push_back(to_string(s.status));
        f.push_back(csv_field(s.error));
        if (configured) {
            f.push_back(std::to_string(c.seed));
            f.push_back(to_string(c.model.kind));
            f.push_back(join_widths(c.model.hidden));
            f.push_back(std::to_string(c.model.grid_size));
            f.push_back(std::to_string(c.model.degree));
            f.push_back(format_double(c.model.grid_min));
            f.push_back(format_double(c.model.grid_max));
            f.push_back(to_string(c.model.shortcut));
            f.push_back(c.train.loss.name());
            f.push_back(c.train.tsl_enabled ? "1" : "0");
            f.push_back(std::to_string(s.param_count));
        } else {
            f.insert(f.end(), 11, std::string());
        }
        const CalibrationReport& r = s.final_report;
        for (double v : {s.tau, r.accuracy, r.ece, r.ada_ece, r.classwise_ece, r.mce, r.smece, r.nll, r.brier,
                         s.best_accuracy})
            f.push_back(num(v));
        f.push_back(ok ? std::to_string(s.best_accuracy_epoch) : "");
        f.push_back(num(s.min_ece));
        f.push_back(ok ? std::to_string(s.min_ece_epoch) : "");
        f.push_back(num(s.posthoc_temperature));
        f.push_back(num(s.posthoc_report.ece));
        for (const Json& v : run.axis_values) f.push_back(csv_field(v.is_string() ? v.get<std::string>() : v.dump()));
        for (std::size_t i = 0; i < f.size(); ++i) os << (i ? "," : "") << f[i];
        os << '\n';
    }
    return os.str();
}

LogitHistogram logit_histogram(const Matrix& logits, int bins) {
    if (bins < 1) throw ConfigError("logit_histogram: bins must be >= 1");
    if (logits.size() == 0) throw DataError("logit_histogram: no logits");
    if (!logits.allFinite()) throw DataError("logit_histogram: non-finite logits");
    double lo = logits.minCoeff();
    double hi = logits.maxCoeff();
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    LogitHistogram h;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    const double width = (hi - lo) / bins;
    for (int b = 0; b < bins; ++b) h.edges.push_back(lo + b * width);
    h.edges.push_back(hi);
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double v = logits.data()[i];
        auto b = static_cast<long>(std::floor((v - lo) / width));
        b = std::clamp<long>(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    const auto n = static_cast<double>(logits.size());
    h.mean = logits.mean();
    h.stddev = logits.size() > 1 ? std::sqrt((logits.array() - h.mean).square().sum() / (n - 1.0)) : 0.0;
    return h;
}

std::string logit_hist_csv(const LogitHistogram& h) {
    std::ostringstream os;
    os << "# edges:";
    for (std::size_t i = 0; i < h.edges.size(); ++i) os << (i ? "," : "") << format_double(h.edges[i]);
    os << "\n# mean=" << format_double(h.mean) << " stddev=" << format_double(h.stddev) << '\n';
    os << "bin_lower,bin_upper,count\n";
    for (std::size_t b = 0; b < h.counts.size(); ++b)
        os << format_double(h.edges[b]) << ',' << format_double(h.edges[b + 1]) << ',' << h.counts[b] << '\n';
    return os.str();
}

std::string tau_curve_csv(const TauCurve& curve) {
    std::ostringstream os;
    os << "tau,ece,is_min\n";
    for (std::size_t i = 0; i < curve.taus.size(); ++i)
        os << format_double(curve.taus[i]) << ',' << format_double(curve.eces[i]) << ','
           << (i == curve.argmin ? 1 : 0) << '\n';
    return os.str();
}

std::string logits_csv(const Matrix& logits, const Labels& labels) {
    if (static_cast<std::size_t>(logits.rows()) != labels.size())
        throw ConfigError("logits_csv: label count does not match rows");
    std::ostringstream os;
    os << "label";
    for (Eigen::Index k = 0; k < logits.cols(); ++k) os << ",l" << k;
    os << '\n';
    char buf[32];
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        os << labels[static_cast<std::size_t>(r)];
        for (Eigen::Index k = 0; k < logits.cols(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", logits(r, k));
            os << ',' << buf;
        }
        os << '\n';
    }
    return os.str();
}

std::pair<Matrix, Labels> read_logits_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("logits csv: " + path.string() + " is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto split_line = [](const std::string& s) {
        std::vector<std::string> cells;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!s.empty() && s.back() == ',') cells.emplace_back();
        return cells;
    };
    const auto header = split_line(line);
    if (header.size() < 3 || header[0] != "label")
        throw DataError("logits csv: header must be label,l0,l1,...");
    const std::size_t k = header.size() - 1;

    std::vector<double> values;
    Labels labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != k + 1)
            throw DataError("logits csv: line " + std::to_string(line_no) + " has the wrong column count");
        int label = 0;
        const auto [ptr, ec] = std::from_chars(cells[0].data(), cells[0].data() + cells[0].size(), label);
        if (ec != std::errc() || ptr != cells[0].data() + cells[0].size() || label < 0 ||
            static_cast<std::size_t>(label) >= k)
            throw DataError("logits csv: bad label at line " + std::to_string(line_no));
        labels.push_back(label);
        for (std::size_t c = 1; c <= k; ++c) {
            char* end = nullptr;
            const double v = std::strtod(cells[c].c_str(), &end);
            if (cells[c].empty() || *end != '\0' || !std::isfinite(v))
                throw DataError("logits csv: bad value at line " + std::to_string(line_no));
            values.push_back(v);
        }
    }
    if (labels.empty()) throw DataError("logits csv: " + path.string() + " has no rows");
    Matrix logits(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(k));
    std::copy(values.begin(), values.end(), logits.data());
    return {std::move(logits), std::move(labels)};
}

}  // namespace kancal
