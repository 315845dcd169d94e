#pragma once

// Dataset loading (IDX, CSV), the Gaussian-cluster synthetic generator,
// feature mapping into a spline grid range, and seeded stratified splits.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kancal/core.hpp"

namespace kancal {

struct Dataset {
    Matrix features;  // [N x d]
    Labels labels;    // [N], values in [0, class_count)
    int class_count = 0;
    std::string name;

    Eigen::Index size() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }
    void validate() const;

    /// Rows in the given order.
    Dataset subset(const std::vector<std::size_t>& rows) const;
    std::vector<std::size_t> class_counts() const;
};

/// Affine map of [0, 1] onto [lo, hi].
struct FeatureRange {
    double lo = 0.0;
    double hi = 1.0;
};

/// MNIST-family IDX files: images (magic 0x00000803, N x rows x cols
/// unsigned bytes) and labels (magic 0x00000801, N unsigned bytes). Pixels
/// are scaled to [0, 1], then mapped affinely into `range`.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 FeatureRange range = {}, std::size_t max_samples = 0);

/// Rectangular CSV with a header row. Features are z-scored per column
/// (standard deviation floored at 1e-12), clipped to +-3 and mapped affinely
/// into `range`. Labels get indices in order of first appearance.
Dataset load_csv(const std::filesystem::path& path, const std::string& label_column,
                 FeatureRange range = {-1.0, 1.0});

/// Z-score each column, clip to +-clip, and map [-clip, clip] onto range.
void standardize_to_range(Dataset& data, FeatureRange range, double clip = 3.0);

struct SynthConfig {
    std::size_t samples = 500;
    int features = 20;
    int classes = 3;
    std::vector<double> priors = {0.5, 0.3, 0.2};  // empty = balanced
    double separation = 2.0;
    std::uint64_t seed = 0;
};

/// Gaussian clusters: K random unit-norm centres scaled by `separation`,
/// unit isotropic noise, class counts from the priors by largest remainder.
Dataset synth_classification(const SynthConfig& config);

struct SplitSpec {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct DataSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Stratified seeded split: samples are shuffled within each class, ordered
/// by their relative rank inside the class, then cut contiguously.
DataSplits split(const Dataset& data, const SplitSpec& spec);

/// Two-way stratified cut (fractions first, 1 - first) using the same ordering.
std::pair<Dataset, Dataset> split_two(const Dataset& data, double first, std::uint64_t seed);

/// IDX writers, used for fixtures and exports.
void write_idx_images(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                      std::uint32_t count, std::uint32_t rows, std::uint32_t cols);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);

}  // namespace kancal
