#pragma once

// Datasets: IDX files (optionally gzip-compressed), the synthetic 8x8 bar
// task, and seeded labeled/unlabeled/test splits.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lpa3/tensor.hpp"

namespace lpa3 {

struct IdxArray {
    std::uint8_t type = 0x08;  // 0x08 ubyte, 0x0E float64
    std::vector<std::size_t> dims;
    std::vector<double> values;
};

// Reads big-endian IDX (ubyte, signed byte, int32, float32, float64). Plain
// and gzip files are both accepted. Throws std::runtime_error with the path.
IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

inline constexpr std::int64_t kUnlabeled = -1;

struct Dataset {
    Shape item_shape;  // (C, H, W)
    std::vector<double> pixels;
    std::vector<std::int64_t> labels;  // kUnlabeled for unlabeled splits
    std::vector<std::uint64_t> ids;
    std::size_t num_classes = 0;

    std::size_t size() const { return ids.size(); }
    std::size_t item_size() const { return numel(item_shape); }

    // (B, item_shape...) for the given positions.
    Tensor gather(std::span<const std::size_t> positions) const;
    Tensor all() const;
    // Drops labels, keeping ids.
    Dataset without_labels() const;
};

struct Splits {
    Dataset labeled;
    Dataset unlabeled;  // true labels kept in `hidden_labels`
    std::vector<std::int64_t> hidden_labels;
    Dataset test;
};

struct SyntheticSpec {
    std::size_t n = 400;
    std::uint64_t seed = 1;
    double max_background = 0.4;  // nuisance: background intensity in [0, max]
    double noise_std = 0.05;
};

// 8x8 bars: class 0 a vertical bar, class 1 a horizontal bar, drawn at a
// random position over a random uniform background.
Dataset synthetic_bars(const SyntheticSpec& spec);

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels);

struct SplitSpec {
    std::size_t pool = 2000;     // labeled + unlabeled
    std::size_t labeled = 250;   // class balanced
    std::size_t test = 1000;
    std::uint64_t seed = 0;
};

Splits split_dataset(const Dataset& all, const SplitSpec& spec);

struct DatasetSource {
    std::string kind = "synthetic";  // "synthetic" or "idx"
    std::filesystem::path images;
    std::filesystem::path labels;
    SyntheticSpec synthetic;
    SplitSpec split;
};

Splits load_dataset(const DatasetSource& source);

}  // namespace lpa3
