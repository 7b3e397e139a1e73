#pragma once

// Layer-stack classifier F(x) = M(E(x)) exposing logits and the post-relu
// activations consumed by the perceptual distance.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lpa3/tensor.hpp"

namespace lpa3 {

enum class LayerKind : std::uint8_t { Dense = 1, Conv2d = 2, Relu = 3, Flatten = 4, DualNorm = 5 };

std::string to_string(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t in = 0;   // dense: input width; conv2d: input channels; dualnorm: channels
    std::size_t out = 0;  // dense: output width; conv2d: output channels
    std::size_t kernel = 0;
    std::size_t padding = 0;

    static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out, 0, 0}; }
    static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t padding = 0) {
        return {LayerKind::Conv2d, in_channels, out_channels, kernel, padding};
    }
    static LayerSpec relu() { return {LayerKind::Relu, 0, 0, 0, 0}; }
    static LayerSpec flatten() { return {LayerKind::Flatten, 0, 0, 0, 0}; }
    static LayerSpec dualnorm(std::size_t channels) { return {LayerKind::DualNorm, channels, channels, 0, 0}; }

    bool operator==(const LayerSpec&) const = default;
};

// Which running statistics a dualnorm layer uses: clean data or augmented data.
enum class StatsMode { Main, Aug };

struct ActivationDims {
    std::size_t channels = 0;
    std::size_t height = 1;
    std::size_t width = 1;

    bool operator==(const ActivationDims&) const = default;
};

struct ForwardResult {
    Var logits;
    std::vector<Var> activations;  // one per relu layer, in order
};

class Network {
public:
    static constexpr double kNormEps = 1e-5;
    static constexpr double kNormMomentum = 0.1;

    // Kaiming-uniform weights, zero biases, unit dualnorm scale. Throws
    // ShapeError when consecutive layers do not compose.
    static Network init(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed);

    // input -> hidden... -> classes with relu between dense layers.
    static Network mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t classes,
                       std::uint64_t seed, bool dualnorm = false);
    // (C,H,W) -> 3x3 conv (padding 1) -> relu -> flatten -> dense -> classes.
    static Network small_conv(std::size_t channels, std::size_t height, std::size_t width, std::size_t conv_channels,
                              std::size_t classes, std::uint64_t seed);

    const Shape& input_shape() const { return input_shape_; }
    std::size_t input_size() const { return numel(input_shape_); }
    std::size_t num_classes() const { return num_classes_; }
    const std::vector<LayerSpec>& layers() const { return specs_; }
    const std::vector<ActivationDims>& layer_dims() const { return act_dims_; }

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;

    // Frozen forward: parameters enter the tape as constants and running
    // statistics are read only. Safe to call concurrently.
    ForwardResult forward(Tape& tape, Var x, StatsMode mode = StatsMode::Main) const;

    // Training forward: parameters are watched so backward fills their grad
    // buffers; with update_stats the selected dualnorm statistics absorb the
    // batch moments before normalizing.
    ForwardResult forward_train(Tape& tape, Var x, StatsMode mode, bool update_stats);

    // Tape-free conveniences over a batch (B, input_shape...).
    Tensor logits(const Tensor& x, StatsMode mode = StatsMode::Main) const;
    Tensor predict_proba(const Tensor& x, StatsMode mode = StatsMode::Main) const;

    // Versioned binary checkpoint ("LPA3NET1").
    void save(const std::filesystem::path& path) const;
    static Network load(const std::filesystem::path& path);
    void write(std::ostream& os) const;
    static Network read(std::istream& is);

    bool same_parameters(const Network& other) const;

private:
    struct Layer {
        LayerSpec spec;
        std::vector<Tensor> params;
        std::vector<double> mean[2];
        std::vector<double> var[2];
    };

    template <class Self, class ParamFn>
    static ForwardResult run(Self& self, Var x, StatsMode mode, bool update_stats, ParamFn&& param);

    Shape input_shape_;
    std::vector<LayerSpec> specs_;
    std::vector<Layer> layers_;
    std::vector<ActivationDims> act_dims_;
    std::size_t num_classes_ = 0;
};

// Batch dimension check: x must be (B, input_shape...).
void require_batch(const Network& net, const Tensor& x);

}  // namespace lpa3
