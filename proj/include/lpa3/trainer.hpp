#pragma once

// Semi-supervised training with pseudo-labels and LP-A3 hard positives on the
// TCS-selected part of each unlabeled batch.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lpa3/attack.hpp"
#include "lpa3/data.hpp"
#include "lpa3/metrics.hpp"
#include "lpa3/selection.hpp"

namespace lpa3 {

struct WeakAugSpec {
    std::size_t max_shift = 2;  // pixels, each axis, zero fill
    bool flip = false;          // horizontal flip with probability 1/2
    double noise_std = 0.0;
};

// (B, C, H, W) for shift/flip; any shape when only noise is on.
Tensor weak_augment(const Tensor& x, const WeakAugSpec& spec, std::uint64_t seed);
// out[h][w] = in[h - dy][w - dx], zero outside.
Tensor shift_image(const Tensor& x, long dx, long dy);
Tensor flip_horizontal(const Tensor& x);

enum class NegativeTerm { Off, Subtract, Targeted };
enum class NegativeTarget { Uniform, Argmax };

struct ModelSpec {
    std::string arch = "mlp";  // mlp | conv
    std::vector<std::size_t> hidden{128, 64};
    bool dualnorm = false;
    std::size_t conv_channels = 8;
};

Network build_network(const ModelSpec& spec, const Shape& item_shape, std::size_t classes, std::uint64_t seed);

struct TrainConfig {
    double conf_threshold = 0.95;
    double tau_pct = 90.0;
    double learning_rate = 0.03;
    std::size_t labeled_batch = 32;
    std::size_t unlabeled_batch = 64;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    AttackParams attack;
    WeakAugSpec weak_aug;
    ModelSpec model;

    bool lpa3 = true;
    bool gate_lpa3 = false;  // apply the confidence gate to the LP-A3 term too
    NegativeTerm negative_term = NegativeTerm::Off;
    bool subtract_ack = false;  // required for NegativeTerm::Subtract
    NegativeTarget negative_target = NegativeTarget::Uniform;
    double pseudo_temperature = 0.0;  // 0: one-hot pseudo-labels

    double w_supervised = 1.0;
    double w_pseudo = 1.0;
    double w_lpa3 = 1.0;
    double w_negative = 1.0;

    double gamma_c = 0.9;
    std::size_t tcs_every = 1;      // epochs between TCS refreshes
    std::size_t refresh_every = 1;  // K: epochs an augmentation stays cached
    std::size_t checkpoint_every = 0;

    void validate() const;  // throws std::invalid_argument
};

struct ExampleBatch {
    Tensor x;  // (B, C, H, W); ignored when ids is empty
    std::vector<std::int64_t> labels;
    std::vector<std::uint64_t> ids;
};

struct CachedAugmentation {
    std::size_t epoch = 0;
    std::vector<double> x;
    double lpips = 0.0;
    bool satisfied = false;
};

struct TrainState {
    Network net;
    std::map<std::uint64_t, TCSRecord> tcs;
    std::map<std::uint64_t, CachedAugmentation> cache;
    std::size_t epoch = 0;
    std::size_t step = 0;  // global step counter
};

struct StepMetrics {
    double loss = 0.0;
    double supervised = 0.0;
    double pseudo = 0.0;
    double lpa3 = 0.0;
    double negative = 0.0;
    std::size_t unlabeled = 0;
    std::size_t selected = 0;
    std::size_t masked = 0;     // pseudo-labels passing the confidence gate
    std::size_t augmented = 0;  // LP-A3 samples used
    std::size_t satisfied = 0;  // of those, constraint satisfied
    double lpips_sum = 0.0;
    std::size_t generated = 0;  // fresh attacks this step
    bool aborted = false;
    bool skipped_supervised = false;
};

// One SGD step. The TCS records for every unlabeled id must exist.
StepMetrics semi_supervised_step(TrainState& state, const ExampleBatch& labeled, const ExampleBatch& unlabeled,
                                 const TrainConfig& cfg);

// Reshapes (B, C, H, W) to the network's input shape.
Tensor to_input(const Network& net, const Tensor& images);
double accuracy(const Network& net, const Dataset& data);

// Seeded permutation of n items for (epoch, pass).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::string_view stream, std::size_t epoch,
                                     std::size_t pass = 0);

// Observe predictions on the unlabeled pool and update every TCS record.
void refresh_tcs(TrainState& state, const Dataset& unlabeled, double gamma_c);

struct TrainOutput {
    std::filesystem::path dir;  // empty: no files written
};

struct TrainResult {
    Network net;
    std::vector<Json> epochs;
    TrainState state;
};

inline const std::vector<std::string>& summary_columns() {
    static const std::vector<std::string> cols{"epoch", "loss", "supervised", "pseudo", "lpa3", "negative",
                                               "test_accuracy", "pseudo_accuracy", "mask_rate",
                                               "selected_fraction", "constraint_satisfaction",
                                               "constraint_violation", "mean_lpips", "aborted_steps"};
    return cols;
}

// Runs cfg.epochs epochs over the splits. With an output directory:
// metrics.jsonl (one line per epoch), summary.csv, checkpoint-epochN.bin at
// the configured cadence and final.bin.
TrainResult train(const Splits& splits, const TrainConfig& cfg, const TrainOutput& out = {});

}  // namespace lpa3
