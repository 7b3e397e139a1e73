#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lpa3/perceptual.hpp"

using namespace lpa3;
using lpa3::testing::random_tensor;

namespace {

Network identity_net() {
    Network net = Network::init({2}, {LayerSpec::dense(2, 2), LayerSpec::relu(), LayerSpec::dense(2, 2)}, 0);
    auto params = net.parameters();
    *params[0] = Tensor({2, 2}, {1, 0, 0, 1});
    *params[1] = Tensor({2}, 0.0);
    return net;
}

// Loop oracle: phi for a dense/relu MLP, one sample.
std::vector<double> loop_phi(const Network& net, std::span<const double> x) {
    std::vector<double> h(x.begin(), x.end()), phi;
    auto params = net.parameters();
    std::size_t p = 0;
    for (const auto& spec : net.layers()) {
        if (spec.kind == LayerKind::Dense) {
            const Tensor& w = *params[p++];
            const Tensor& b = *params[p++];
            std::vector<double> next(spec.out);
            for (std::size_t o = 0; o < spec.out; ++o) {
                double s = b[o];
                for (std::size_t i = 0; i < spec.in; ++i) s += w[o * spec.in + i] * h[i];
                next[o] = s;
            }
            h = std::move(next);
        } else if (spec.kind == LayerKind::Relu) {
            double n2 = 0.0;
            for (auto& v : h) {
                v = std::max(0.0, v);
                n2 += v * v;
            }
            const double n = std::sqrt(n2);
            for (double v : h) phi.push_back(n == 0.0 ? 0.0 : v / n);
        }
    }
    return phi;
}

}  // namespace

TEST_CASE("embed: dense block arithmetic") {
    Network net = identity_net();
    auto e = embed(net, Tensor({1, 2}, {3, 4}));
    REQUIRE(e.blocks.size() == 1);
    CHECK(e.blocks[0][0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(e.blocks[0][1] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(e.length() == 2);

    auto z = embed(net, Tensor({1, 2}, {-3, -4}));
    CHECK(z.blocks[0].values() == std::vector<double>{0, 0});
}

TEST_CASE("embed: conv positions have unit channel norm") {
    // 2 channels on a 2x2 map.
    Network net = Network::init({1, 2, 2}, {LayerSpec::conv2d(1, 2, 1), LayerSpec::relu(), LayerSpec::flatten(),
                                            LayerSpec::dense(8, 2)},
                                5);
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({3, 1, 2, 2}, rng, 0.1, 1.0);
    auto e = embed(net, x);
    const Tensor& block = e.blocks[0];
    REQUIRE(block.shape() == Shape{3, 8});
    const double positions = 4.0;
    for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t p = 0; p < 4; ++p) {
            double n2 = 0.0;
            for (std::size_t c = 0; c < 2; ++c) {
                const double v = block[b * 8 + c * 4 + p] * std::sqrt(positions);
                n2 += v * v;
            }
            const bool zero = n2 == 0.0;
            CHECK((zero || std::abs(std::sqrt(n2) - 1.0) <= 1e-12));
        }
    }
}

TEST_CASE("lpips: identity, symmetry and loop oracle") {
    Network net = Network::mlp(6, {5, 4}, 3, 11);
    std::mt19937_64 rng(2);
    Tensor a = random_tensor({4, 6}, rng, 0, 1);
    Tensor b = random_tensor({4, 6}, rng, 0, 1);
    Tensor self = lpips(net, a, a);
    for (double v : self.data()) CHECK(v == 0.0);
    Tensor ab = lpips(net, a, b), ba = lpips(net, b, a);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(ab[i] - ba[i]) <= 1e-12);
        auto pa = loop_phi(net, a.data().subspan(i * 6, 6));
        auto pb = loop_phi(net, b.data().subspan(i * 6, 6));
        double d2 = 0.0;
        for (std::size_t k = 0; k < pa.size(); ++k) d2 += (pa[k] - pb[k]) * (pa[k] - pb[k]);
        CHECK(std::abs(ab[i] - std::sqrt(d2)) <= 1e-10);
    }
    CHECK_THROWS_AS(lpips(net, a, Tensor({4, 5})), ShapeError);
}

TEST_CASE("property: lpips is a pseudo-metric") {
    Network net = Network::mlp(5, {7, 6}, 3, 3);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor a = random_tensor({1, 5}, rng), b = random_tensor({1, 5}, rng), c = random_tensor({1, 5}, rng);
        const double ab = lpips(net, a, b).item(), bc = lpips(net, b, c).item(), ac = lpips(net, a, c).item();
        CHECK(ab >= 0.0);
        CHECK(ac <= ab + bc + 1e-10);
    }
}

TEST_CASE("property: lpips gradient w.r.t. x' matches finite differences") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Network net = Network::mlp(6, {8, 5}, 3, seed);
        Network conv = Network::init({1, 4, 4}, {LayerSpec::conv2d(1, 3, 3, 1), LayerSpec::relu(),
                                                 LayerSpec::flatten(), LayerSpec::dense(48, 2)},
                                     seed);
        std::mt19937_64 rng(seed);
        for (const Network* n : {&net, &conv}) {
            Shape in{2};
            for (auto d : n->input_shape()) in.push_back(d);
            Tensor x = random_tensor(in, rng, 0, 1);
            Tensor xp = random_tensor(in, rng, 0, 1);
            lpa3::testing::ScalarFn fn = [n](Tape& t, const std::vector<Var>& v) {
                return ops::sum(lpips(embed(*n, t, v[0]), embed(*n, t, v[1])));
            };
            const double err = lpa3::testing::max_gradient_error(fn, {x, xp}, {false, true});
            CHECK_MESSAGE(err <= 1e-4, "seed " << seed << " err " << err);
        }
    }
}
