#include "lpa3/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>

#include "lpa3/rng.hpp"

namespace lpa3 {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Relu: return "relu";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::DualNorm: return "dualnorm";
    }
    return "unknown";
}

void require_batch(const Network& net, const Tensor& x) {
    const auto& in = net.input_shape();
    const auto& s = x.shape();
    if (s.size() != in.size() + 1 || !std::equal(in.begin(), in.end(), s.begin() + 1)) {
        throw ShapeError("network expects (B," + to_string(in).substr(1) + " input, got " + to_string(s));
    }
}

namespace {

// Per-sample shape after a layer; throws when the layer cannot accept `cur`.
Shape propagate(const LayerSpec& spec, const Shape& cur, std::size_t index) {
    auto fail = [&](const std::string& why) {
        throw ShapeError("layer " + std::to_string(index) + " (" + to_string(spec.kind) + "): " + why +
                         ", incoming shape " + to_string(cur));
    };
    switch (spec.kind) {
        case LayerKind::Dense:
            if (cur.size() != 1 || cur[0] != spec.in) fail("expected width " + std::to_string(spec.in));
            if (spec.out == 0) fail("zero output width");
            return {spec.out};
        case LayerKind::Conv2d: {
            if (cur.size() != 3 || cur[0] != spec.in) fail("expected " + std::to_string(spec.in) + " channels");
            if (spec.kernel == 0 || spec.kernel > 5) fail("kernel must be in [1,5]");
            if (spec.out == 0) fail("zero output channels");
            if (cur[1] + 2 * spec.padding < spec.kernel || cur[2] + 2 * spec.padding < spec.kernel)
                fail("kernel larger than padded input");
            return {spec.out, cur[1] + 2 * spec.padding - spec.kernel + 1, cur[2] + 2 * spec.padding - spec.kernel + 1};
        }
        case LayerKind::Relu: return cur;
        case LayerKind::Flatten:
            if (cur.size() != 3) fail("flatten expects (C,H,W)");
            return {numel(cur)};
        case LayerKind::DualNorm:
            if (cur[0] != spec.in) fail("expected " + std::to_string(spec.in) + " channels");
            return cur;
    }
    fail("unknown layer kind");
    return cur;
}

ActivationDims dims_of(const Shape& s) {
    if (s.size() == 3) return {s[0], s[1], s[2]};
    return {s[0], 1, 1};
}

}  // namespace

Network Network::init(Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed) {
    if (input_shape.empty() || numel(input_shape) == 0) throw ShapeError("empty network input shape");
    if (layers.empty()) throw ShapeError("network needs at least one layer");
    Network net;
    net.input_shape_ = input_shape;
    net.specs_ = layers;
    std::mt19937_64 rng = SeedSequence(seed).stream("init");
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& spec = layers[i];
        Shape next = propagate(spec, cur, i);
        Layer layer;
        layer.spec = spec;
        auto kaiming = [&rng](Shape shape, std::size_t fan_in) {
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> u(-bound, bound);
            Tensor w(std::move(shape));
            for (auto& v : w.data()) v = u(rng);
            return w;
        };
        switch (spec.kind) {
            case LayerKind::Dense:
                layer.params.push_back(kaiming({spec.out, spec.in}, spec.in));
                layer.params.push_back(Tensor({spec.out}, 0.0));
                break;
            case LayerKind::Conv2d:
                layer.params.push_back(
                    kaiming({spec.out, spec.in, spec.kernel, spec.kernel}, spec.in * spec.kernel * spec.kernel));
                layer.params.push_back(Tensor({spec.out}, 0.0));
                break;
            case LayerKind::DualNorm:
                layer.params.push_back(Tensor({spec.in}, 1.0));
                layer.params.push_back(Tensor({spec.in}, 0.0));
                for (int m = 0; m < 2; ++m) {
                    layer.mean[m].assign(spec.in, 0.0);
                    layer.var[m].assign(spec.in, 1.0);
                }
                break;
            case LayerKind::Relu:
                net.act_dims_.push_back(dims_of(next));
                break;
            case LayerKind::Flatten: break;
        }
        for (auto& p : layer.params) p.set_requires_grad(true);
        net.layers_.push_back(std::move(layer));
        cur = std::move(next);
    }
    if (cur.size() != 1) throw ShapeError("network output must be a vector of class scores, got " + to_string(cur));
    net.num_classes_ = cur[0];
    return net;
}

Network Network::mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t classes,
                     std::uint64_t seed, bool dualnorm) {
    std::vector<LayerSpec> spec;
    std::size_t prev = input_dim;
    for (auto h : hidden) {
        spec.push_back(LayerSpec::dense(prev, h));
        if (dualnorm) spec.push_back(LayerSpec::dualnorm(h));
        spec.push_back(LayerSpec::relu());
        prev = h;
    }
    spec.push_back(LayerSpec::dense(prev, classes));
    return init({input_dim}, std::move(spec), seed);
}

Network Network::small_conv(std::size_t channels, std::size_t height, std::size_t width,
                            std::size_t conv_channels, std::size_t classes, std::uint64_t seed) {
    std::vector<LayerSpec> spec{
        LayerSpec::conv2d(channels, conv_channels, 3, 1),
        LayerSpec::relu(),
        LayerSpec::flatten(),
        LayerSpec::dense(conv_channels * height * width, classes),
    };
    return init({channels, height, width}, std::move(spec), seed);
}

std::vector<Tensor*> Network::parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_)
        for (auto& p : l.params) out.push_back(&p);
    return out;
}

std::vector<const Tensor*> Network::parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_)
        for (const auto& p : l.params) out.push_back(&p);
    return out;
}

template <class Self, class ParamFn>
ForwardResult Network::run(Self& self, Var x, StatsMode mode, bool update_stats, ParamFn&& param) {
    require_batch(self, x.value());
    const std::size_t batch = x.shape()[0];
    const int m = mode == StatsMode::Main ? 0 : 1;
    ForwardResult result;
    Var h = x;
    for (std::size_t i = 0; i < self.layers_.size(); ++i) {
        auto& layer = self.layers_[i];
        switch (layer.spec.kind) {
            case LayerKind::Dense: h = ops::linear(h, param(layer, 0), param(layer, 1)); break;
            case LayerKind::Conv2d: h = ops::conv2d(h, param(layer, 0), param(layer, 1), layer.spec.padding); break;
            case LayerKind::Relu:
                h = ops::relu(h);
                result.activations.push_back(h);
                break;
            case LayerKind::Flatten: h = ops::reshape(h, {batch, h.size() / batch}); break;
            case LayerKind::DualNorm: {
                if constexpr (!std::is_const_v<Self>) {
                    if (update_stats) {
                        const std::size_t C = layer.spec.in;
                        const std::size_t inner = h.size() / (batch * C);
                        const Tensor& hv = h.value();
                        for (std::size_t c = 0; c < C; ++c) {
                            double s = 0.0, s2 = 0.0;
                            for (std::size_t b = 0; b < batch; ++b)
                                for (std::size_t p = 0; p < inner; ++p) {
                                    const double v = hv[(b * C + c) * inner + p];
                                    s += v;
                                    s2 += v * v;
                                }
                            const double n = static_cast<double>(batch * inner);
                            const double mu = s / n;
                            const double var = std::max(0.0, s2 / n - mu * mu);
                            layer.mean[m][c] = (1.0 - kNormMomentum) * layer.mean[m][c] + kNormMomentum * mu;
                            layer.var[m][c] = (1.0 - kNormMomentum) * layer.var[m][c] + kNormMomentum * var;
                        }
                    }
                } else {
                    (void)update_stats;
                }
                h = ops::normalize_affine(h, layer.mean[m], layer.var[m], param(layer, 0), param(layer, 1), kNormEps);
                break;
            }
        }
    }
    result.logits = h;
    return result;
}

ForwardResult Network::forward(Tape& tape, Var x, StatsMode mode) const {
    return run(*this, x, mode, false,
               [&tape](const Layer& layer, std::size_t k) { return tape.constant(layer.params[k]); });
}

ForwardResult Network::forward_train(Tape& tape, Var x, StatsMode mode, bool update_stats) {
    return run(*this, x, mode, update_stats,
               [&tape](Layer& layer, std::size_t k) { return tape.watch(layer.params[k]); });
}

Tensor Network::logits(const Tensor& x, StatsMode mode) const {
    Tape tape;
    return forward(tape, tape.constant(x), mode).logits.value();
}

Tensor Network::predict_proba(const Tensor& x, StatsMode mode) const {
    Tape tape;
    return ops::softmax(forward(tape, tape.constant(x), mode).logits).value();
}

bool Network::same_parameters(const Network& other) const {
    if (specs_ != other.specs_ || input_shape_ != other.input_shape_) return false;
    auto a = parameters();
    auto b = other.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i]->values() != b[i]->values()) return false;
    return true;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'L', 'P', 'A', '3', 'N', 'E', 'T', '1'};

template <class T>
void put(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw std::runtime_error("checkpoint truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

void put_block(std::ostream& os, std::span<const double> values) {
    put<std::uint64_t>(os, values.size());
    for (double v : values) put<double>(os, v);
}

void get_block(std::istream& is, std::span<double> dest) {
    const auto n = get<std::uint64_t>(is);
    if (n != dest.size()) throw std::runtime_error("checkpoint parameter block has unexpected length");
    for (auto& v : dest) v = get<double>(is);
}

}  // namespace

void Network::write(std::ostream& os) const {
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(input_shape_.size()));
    for (auto d : input_shape_) put<std::uint64_t>(os, d);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(specs_.size()));
    for (const auto& s : specs_) {
        put<std::uint8_t>(os, static_cast<std::uint8_t>(s.kind));
        put<std::uint64_t>(os, s.in);
        put<std::uint64_t>(os, s.out);
        put<std::uint64_t>(os, s.kernel);
        put<std::uint64_t>(os, s.padding);
    }
    for (const auto& l : layers_) {
        for (const auto& p : l.params) put_block(os, p.data());
        if (l.spec.kind == LayerKind::DualNorm) {
            for (int m = 0; m < 2; ++m) {
                put_block(os, l.mean[m]);
                put_block(os, l.var[m]);
            }
        }
    }
}

Network Network::read(std::istream& is) {
    char magic[8];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("not an LPA3NET1 checkpoint");
    const auto rank = get<std::uint32_t>(is);
    if (rank == 0 || rank > 4) throw std::runtime_error("checkpoint has invalid input rank");
    Shape input(rank);
    for (auto& d : input) d = get<std::uint64_t>(is);
    const auto count = get<std::uint32_t>(is);
    if (count == 0 || count > 1024) throw std::runtime_error("checkpoint has invalid layer count");
    std::vector<LayerSpec> specs(count);
    for (auto& s : specs) {
        const auto kind = get<std::uint8_t>(is);
        if (kind < 1 || kind > 5) throw std::runtime_error("checkpoint has unknown layer kind");
        s.kind = static_cast<LayerKind>(kind);
        s.in = get<std::uint64_t>(is);
        s.out = get<std::uint64_t>(is);
        s.kernel = get<std::uint64_t>(is);
        s.padding = get<std::uint64_t>(is);
    }
    Network net = init(std::move(input), std::move(specs), 0);
    for (auto& l : net.layers_) {
        for (auto& p : l.params) get_block(is, p.data());
        if (l.spec.kind == LayerKind::DualNorm) {
            for (int m = 0; m < 2; ++m) {
                get_block(is, l.mean[m]);
                get_block(is, l.var[m]);
            }
        }
    }
    return net;
}

void Network::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    write(os);
    if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Network Network::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    return read(is);
}

}  // namespace lpa3
