#include "lpa3/perceptual.hpp"

#include <cmath>

namespace lpa3 {

namespace {

Var embed_block(Var act, ChannelNorm norm) {
    const auto& s = act.shape();
    const std::size_t batch = s[0];
    double positions = 1.0;
    if (s.size() == 4) positions = static_cast<double>(s[2] * s[3]);
    else if (s.size() != 2) throw ShapeError("perceptual: unsupported activation shape " + to_string(s));
    Var normed = norm == ChannelNorm::PerPosition ? ops::channel_normalize(act) : ops::sample_normalize(act);
    Var scaled = ops::scale(normed, 1.0 / std::sqrt(positions));
    return ops::reshape(scaled, {batch, act.size() / batch});
}

std::vector<Var> selected(std::span<const Var> activations, const PerceptualOptions& options) {
    std::vector<Var> out;
    if (options.layers.empty()) return {activations.begin(), activations.end()};
    for (auto i : options.layers) {
        if (i >= activations.size()) {
            throw std::out_of_range("perceptual layer index " + std::to_string(i) + " out of range");
        }
        out.push_back(activations[i]);
    }
    return out;
}

}  // namespace

std::size_t PerceptualEmbedding::length() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.dim(1);
    return n;
}

Tensor PerceptualEmbedding::flat() const {
    if (blocks.empty()) throw ShapeError("empty perceptual embedding");
    Tape tape;
    std::vector<Var> parts;
    for (const auto& b : blocks) parts.push_back(tape.constant(b));
    return ops::concat_columns(parts).value();
}

Var embed(std::span<const Var> activations, const PerceptualOptions& options) {
    auto acts = selected(activations, options);
    if (acts.empty()) throw ShapeError("perceptual embedding needs at least one activation layer");
    std::vector<Var> blocks;
    for (const Var& a : acts) blocks.push_back(embed_block(a, options.norm));
    if (blocks.size() == 1) return blocks.front();
    return ops::concat_columns(blocks);
}

Var embed(const Network& net, Tape& tape, Var x, const PerceptualOptions& options) {
    auto out = net.forward(tape, x);
    return embed(out.activations, options);
}

PerceptualEmbedding embed(const Network& net, const Tensor& x, const PerceptualOptions& options) {
    Tape tape;
    auto out = net.forward(tape, tape.constant(x));
    PerceptualEmbedding e;
    for (const Var& a : selected(out.activations, options)) e.blocks.push_back(embed_block(a, options.norm).value());
    if (e.blocks.empty()) throw ShapeError("perceptual embedding needs at least one activation layer");
    return e;
}

Var lpips(Var phi_a, Var phi_b) {
    if (phi_a.shape() != phi_b.shape()) {
        throw ShapeError("lpips: embedding shapes differ " + to_string(phi_a.shape()) + " vs " +
                         to_string(phi_b.shape()));
    }
    return ops::l2_norm(ops::sub(phi_a, phi_b));
}

Tensor lpips(const Network& net, const Tensor& x, const Tensor& x_prime, const PerceptualOptions& options) {
    if (x.shape() != x_prime.shape()) {
        throw ShapeError("lpips: input shapes differ " + to_string(x.shape()) + " vs " + to_string(x_prime.shape()));
    }
    Tape tape;
    Var a = embed(net, tape, tape.constant(x), options);
    Var b = embed(net, tape, tape.constant(x_prime), options);
    return lpips(a, b).value();
}

}  // namespace lpa3
