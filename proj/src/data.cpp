#include "kancal/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace kancal {

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw DataError("idx: truncated header in " + path.string());
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
           std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return in;
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

/// Stratified order: within-class shuffle, then interleave classes by
/// relative rank (ties broken by a random key).
std::vector<std::size_t> stratified_order(const Dataset& data, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x5eed));
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.class_count));
    for (std::size_t i = 0; i < data.labels.size(); ++i)
        by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

    struct Keyed {
        double rank;
        double tie;
        std::size_t index;
    };
    std::vector<Keyed> keyed;
    keyed.reserve(data.labels.size());
    for (auto& members : by_class) {
        const auto perm = rng.permutation(members.size());
        for (std::size_t p = 0; p < members.size(); ++p)
            keyed.push_back({(static_cast<double>(p) + 0.5) / static_cast<double>(members.size()),
                             rng.uniform(), members[perm[p]]});
    }
    std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
        if (a.rank != b.rank) return a.rank < b.rank;
        if (a.tie != b.tie) return a.tie < b.tie;
        return a.index < b.index;
    });
    std::vector<std::size_t> order;
    order.reserve(keyed.size());
    for (const auto& k : keyed) order.push_back(k.index);
    return order;
}

void check_part(const Dataset& part, const char* which) {
    if (part.size() < 1) throw ConfigError(std::string("split: ") + which + " part is empty");
    int present = 0;
    for (auto c : part.class_counts())
        if (c > 0) ++present;
    if (present < 2)
        throw ConfigError(std::string("split: ") + which + " part has fewer than 2 classes");
}

}  // namespace

void Dataset::validate() const {
    if (static_cast<Eigen::Index>(labels.size()) != features.rows())
        throw DataError("dataset '" + name + "': label count does not match rows");
    if (class_count < 2) throw DataError("dataset '" + name + "': need at least 2 classes");
    for (int y : labels)
        if (y < 0 || y >= class_count) throw DataError("dataset '" + name + "': label out of range");
    if (!features.allFinite()) throw DataError("dataset '" + name + "': non-finite features");
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.name = name;
    out.class_count = class_count;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
        out.labels[i] = labels[rows[i]];
    }
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(class_count, 0)), 0);
    for (int y : labels) counts[static_cast<std::size_t>(y)] += 1;
    return counts;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 FeatureRange range, std::size_t max_samples) {
    auto img = open_binary(images);
    auto lbl = open_binary(labels);

    const std::uint32_t img_magic = read_be32(img, images);
    if (img_magic != kIdxImageMagic)
        throw DataError("idx: " + images.string() + " is not an image file (bad magic)");
    const std::uint32_t count = read_be32(img, images);
    const std::uint32_t rows = read_be32(img, images);
    const std::uint32_t cols = read_be32(img, images);

    const std::uint32_t lbl_magic = read_be32(lbl, labels);
    if (lbl_magic != kIdxLabelMagic)
        throw DataError("idx: " + labels.string() + " is not a label file (bad magic)");
    const std::uint32_t label_count = read_be32(lbl, labels);
    if (label_count != count)
        throw DataError("idx: image count " + std::to_string(count) + " != label count " +
                        std::to_string(label_count));

    std::size_t n = count;
    if (max_samples > 0) n = std::min(n, max_samples);
    const std::size_t dim = std::size_t{rows} * cols;

    std::vector<unsigned char> pixels(n * dim);
    if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
        throw DataError("idx: truncated image payload in " + images.string());
    std::vector<unsigned char> raw_labels(n);
    if (!lbl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n)))
        throw DataError("idx: truncated label payload in " + labels.string());

    Dataset data;
    data.name = images.stem().string();
    data.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    const double scale = (range.hi - range.lo) / 255.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j)
            data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                range.lo + scale * pixels[i * dim + j];
    data.labels.assign(raw_labels.begin(), raw_labels.end());
    int max_label = 0;
    for (int y : data.labels) max_label = std::max(max_label, y);
    data.class_count = max_label + 1;
    data.validate();
    return data;
}

void standardize_to_range(Dataset& data, FeatureRange range, double clip) {
    const double mid = 0.5 * (range.lo + range.hi);
    const double half = 0.5 * (range.hi - range.lo);
    const auto n = static_cast<double>(data.size());
    for (Eigen::Index j = 0; j < data.features.cols(); ++j) {
        auto col = data.features.col(j);
        const double mean = col.mean();
        const double var = (col.array() - mean).square().sum() / n;
        const double sd = std::max(std::sqrt(var), 1e-12);
        for (Eigen::Index i = 0; i < col.size(); ++i) {
            const double z = std::clamp((col(i) - mean) / sd, -clip, clip);
            col(i) = mid + half * z / clip;
        }
    }
}

Dataset load_csv(const std::filesystem::path& path, const std::string& label_column,
                 FeatureRange range) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("csv: " + path.string() + " is empty");
    const auto header = split_csv_line(line);
    const auto label_it = std::find(header.begin(), header.end(), label_column);
    if (label_it == header.end())
        throw DataError("csv: no column named '" + label_column + "' in " + path.string());
    const auto label_idx = static_cast<std::size_t>(label_it - header.begin());

    std::vector<std::vector<double>> rows;
    std::vector<std::string> raw_labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError("csv: line " + std::to_string(line_no) + " has " +
                            std::to_string(cells.size()) + " cells, expected " +
                            std::to_string(header.size()));
        std::vector<double> row;
        row.reserve(cells.size() - 1);
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (c == label_idx) continue;
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cells[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != cells[c].size() || !std::isfinite(v))
                throw DataError("csv: non-numeric value '" + cells[c] + "' at line " +
                                std::to_string(line_no) + ", column '" + header[c] + "'");
            row.push_back(v);
        }
        rows.push_back(std::move(row));
        raw_labels.push_back(cells[label_idx]);
    }
    if (rows.empty()) throw DataError("csv: " + path.string() + " has no data rows");

    Dataset data;
    data.name = path.stem().string();
    std::map<std::string, int> vocab;
    std::vector<std::string> order;
    for (const auto& raw : raw_labels) {
        auto [it, inserted] = vocab.emplace(raw, static_cast<int>(order.size()));
        if (inserted) order.push_back(raw);
        data.labels.push_back(it->second);
    }
    data.class_count = static_cast<int>(order.size());
    if (data.class_count < 2) throw DataError("csv: " + path.string() + " has a single class");

    data.features.resize(static_cast<Eigen::Index>(rows.size()),
                         static_cast<Eigen::Index>(header.size() - 1));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    standardize_to_range(data, range);
    data.validate();
    return data;
}

Dataset synth_classification(const SynthConfig& config) {
    if (config.classes < 2) throw ConfigError("synth: need at least 2 classes");
    if (config.features < 1) throw ConfigError("synth: need at least 1 feature");
    if (config.samples < static_cast<std::size_t>(config.classes))
        throw ConfigError("synth: need at least one sample per class");
    std::vector<double> priors = config.priors;
    if (priors.empty()) priors.assign(static_cast<std::size_t>(config.classes), 1.0);
    if (priors.size() != static_cast<std::size_t>(config.classes))
        throw ConfigError("synth: prior count must equal class count");
    const double prior_sum = std::accumulate(priors.begin(), priors.end(), 0.0);
    if (!(prior_sum > 0) || std::any_of(priors.begin(), priors.end(), [](double p) { return p < 0; }))
        throw ConfigError("synth: priors must be nonnegative with positive sum");

    // Largest-remainder apportionment of the sample count.
    const auto k = static_cast<std::size_t>(config.classes);
    std::vector<std::size_t> counts(k);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < k; ++c) {
        const double exact = static_cast<double>(config.samples) * priors[c] / prior_sum;
        counts[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[c];
        remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < config.samples; ++i, ++assigned)
        counts[remainders[i % k].second] += 1;

    Rng rng(config.seed);
    const auto d = static_cast<Eigen::Index>(config.features);
    Matrix centers(static_cast<Eigen::Index>(k), d);
    for (std::size_t c = 0; c < k; ++c) {
        auto row = centers.row(static_cast<Eigen::Index>(c));
        for (Eigen::Index j = 0; j < d; ++j) row(j) = rng.normal();
        row *= config.separation / row.norm();
    }

    Labels ordered;
    for (std::size_t c = 0; c < k; ++c) ordered.insert(ordered.end(), counts[c], static_cast<int>(c));
    const auto perm = rng.permutation(ordered.size());

    Dataset data;
    data.name = "synthetic";
    data.class_count = config.classes;
    data.features.resize(static_cast<Eigen::Index>(ordered.size()), d);
    data.labels.resize(ordered.size());
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        const int y = ordered[perm[i]];
        data.labels[i] = y;
        for (Eigen::Index j = 0; j < d; ++j)
            data.features(static_cast<Eigen::Index>(i), j) = centers(y, j) + rng.normal();
    }
    data.validate();
    return data;
}

void SplitSpec::validate() const {
    if (!(train > 0 && val > 0 && test > 0))
        throw ConfigError("split: fractions must be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9)
        throw ConfigError("split: fractions must sum to 1");
}

DataSplits split(const Dataset& data, const SplitSpec& spec) {
    spec.validate();
    const auto n = static_cast<std::size_t>(data.size());
    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.train));
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.val));
    if (n_train + n_val >= n) throw ConfigError("split: test part is empty");

    const auto order = stratified_order(data, spec.seed);
    const auto cut = [&](std::size_t begin, std::size_t end) {
        return data.subset(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                                    order.begin() + static_cast<std::ptrdiff_t>(end)));
    };
    DataSplits parts{cut(0, n_train), cut(n_train, n_train + n_val), cut(n_train + n_val, n)};
    check_part(parts.train, "train");
    check_part(parts.val, "val");
    check_part(parts.test, "test");
    return parts;
}

std::pair<Dataset, Dataset> split_two(const Dataset& data, double first, std::uint64_t seed) {
    if (!(first > 0 && first < 1)) throw ConfigError("split: fraction must be in (0, 1)");
    const auto n = static_cast<std::size_t>(data.size());
    const auto n_first = static_cast<std::size_t>(std::llround(static_cast<double>(n) * first));
    const auto order = stratified_order(data, seed);
    std::pair<Dataset, Dataset> parts{
        data.subset({order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_first)}),
        data.subset({order.begin() + static_cast<std::ptrdiff_t>(n_first), order.end()})};
    check_part(parts.first, "first");
    check_part(parts.second, "second");
    return parts;
}

void write_idx_images(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                      std::uint32_t count, std::uint32_t rows, std::uint32_t cols) {
    if (pixels.size() != std::size_t{count} * rows * cols)
        throw ConfigError("write_idx_images: pixel count mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    write_be32(out, kIdxImageMagic);
    write_be32(out, count);
    write_be32(out, rows);
    write_be32(out, cols);
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    write_be32(out, kIdxLabelMagic);
    write_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

}  // namespace kancal
