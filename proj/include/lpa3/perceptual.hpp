#pragma once

// Perceptual embedding phi(x) built from the classifier's own activations and
// the LPIPS-style distance ||phi(x) - phi(x')||_2.
//
// Each selected activation block is normalized to unit L2 norm across
// channels at every spatial position, divided by sqrt(w * h) and flattened;
// dense activations count as one position (w = h = 1). Zero positions stay
// zero.

#include <vector>

#include "lpa3/network.hpp"

namespace lpa3 {

enum class ChannelNorm {
    PerPosition,  // unit norm across channels at each (h, w)
    WholeLayer,   // unit norm over the whole block of a sample
};

struct PerceptualOptions {
    ChannelNorm norm = ChannelNorm::PerPosition;
    // Indices into the network's relu activations; empty selects all.
    std::vector<std::size_t> layers;
};

struct PerceptualEmbedding {
    std::vector<Tensor> blocks;  // each (B, len_l)

    std::size_t length() const;
    Tensor flat() const;  // (B, sum len_l)
};

// phi over already-computed activations; returns (B, total length).
Var embed(std::span<const Var> activations, const PerceptualOptions& options = {});
Var embed(const Network& net, Tape& tape, Var x, const PerceptualOptions& options = {});
PerceptualEmbedding embed(const Network& net, const Tensor& x, const PerceptualOptions& options = {});

// Row-wise distance between two embeddings (B, L) -> (B). The gradient at a
// zero distance is zero.
Var lpips(Var phi_a, Var phi_b);
Tensor lpips(const Network& net, const Tensor& x, const Tensor& x_prime, const PerceptualOptions& options = {});

}  // namespace lpa3
