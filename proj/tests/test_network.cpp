#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lpa3/network.hpp"

using namespace lpa3;
using lpa3::testing::random_tensor;

namespace {

// Independent MLP forward with explicit loops (dense + relu stacks only).
std::vector<double> loop_mlp_logits(const Network& net, std::span<const double> x) {
    std::vector<double> h(x.begin(), x.end());
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
            for (auto& v : h) v = std::max(0.0, v);
        }
    }
    return h;
}

void sgd_steps(Network& net, const Tensor& x, const std::vector<std::size_t>& y, int steps, double lr) {
    for (int s = 0; s < steps; ++s) {
        for (auto* p : net.parameters()) p->zero_grad();
        Tape tape;
        auto out = net.forward_train(tape, tape.constant(x), StatsMode::Main, true);
        Var loss = ops::neg(ops::mean(ops::pick(ops::log_softmax(out.logits), y)));
        tape.backward(loss);
        for (auto* p : net.parameters())
            for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] -= lr * p->grad()[i];
    }
}

}  // namespace

TEST_CASE("forward: identity and zero networks") {
    Network net = Network::init({2}, {LayerSpec::dense(2, 2)}, 1);
    Tensor& w = *net.parameters()[0];
    w = Tensor({2, 2}, {1, 0, 0, 1});
    w.set_requires_grad(true);
    *net.parameters()[1] = Tensor({2}, 0.0);
    Tensor logits = net.logits(Tensor({1, 2}, {1, 2}));
    CHECK(logits.values() == std::vector<double>{1, 2});

    Network zero = Network::mlp(3, {5}, 4, 2);
    for (auto* p : zero.parameters())
        for (auto& v : p->data()) v = 0.0;
    Tensor z = zero.logits(Tensor({1, 3}, {0.3, -2, 7}));
    CHECK(z.values() == std::vector<double>(4, 0.0));
    Tensor pr = zero.predict_proba(Tensor({1, 3}, {0.3, -2, 7}));
    for (double v : pr.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("predict_proba: closed form") {
    Network net = Network::init({1}, {LayerSpec::dense(1, 2)}, 3);
    for (auto& v : net.parameters()[0]->data()) v = 0.0;
    (*net.parameters()[1])[0] = std::log(3.0);
    (*net.parameters()[1])[1] = 0.0;
    Tensor p = net.predict_proba(Tensor({1, 1}, {0.5}));
    CHECK(std::abs(p[0] - 0.75) <= 1e-15);
    CHECK(std::abs(p[1] - 0.25) <= 1e-15);
}

TEST_CASE("forward: deterministic under seed") {
    std::mt19937_64 rng(0);
    Tensor x = random_tensor({3, 6}, rng, 0, 1);
    Network a = Network::mlp(6, {5}, 3, 0);
    Network b = Network::mlp(6, {5}, 3, 0);
    CHECK(a.logits(x).values() == b.logits(x).values());
}

TEST_CASE("predict_proba: trained net matches loop recomputation") {
    std::mt19937_64 rng(4);
    Network net = Network::mlp(8, {6, 5}, 3, 9);
    Tensor x = random_tensor({10, 8}, rng, 0, 1);
    std::vector<std::size_t> y(10);
    for (std::size_t i = 0; i < 10; ++i) y[i] = i % 3;
    sgd_steps(net, x, y, 20, 0.1);

    Tensor held = random_tensor({6, 8}, rng, 0, 1);
    Tensor p = net.predict_proba(held);
    for (std::size_t b = 0; b < 6; ++b) {
        auto logits = loop_mlp_logits(net, held.data().subspan(b * 8, 8));
        const double m = *std::max_element(logits.begin(), logits.end());
        double s = 0.0;
        for (double v : logits) s += std::exp(v - m);
        double total = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(std::abs(p[b * 3 + c] - std::exp(logits[c] - m) / s) <= 1e-12);
            total += p[b * 3 + c];
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
    }
}

TEST_CASE("init: shape contract and seeding") {
    Network net = Network::init({2}, {LayerSpec::dense(2, 3)}, 7);
    CHECK(net.parameters()[0]->shape() == Shape{3, 2});
    CHECK(net.parameters()[1]->shape() == Shape{3});
    for (auto* p : net.parameters()) CHECK(p->requires_grad());
    CHECK(net.num_classes() == 3);

    CHECK(Network::mlp(784, {128, 64}, 10, 5).same_parameters(Network::mlp(784, {128, 64}, 10, 5)));
    CHECK_FALSE(Network::mlp(784, {128, 64}, 10, 5).same_parameters(Network::mlp(784, {128, 64}, 10, 6)));

    CHECK_THROWS_AS(Network::init({4}, {LayerSpec::dense(3, 2)}, 0), ShapeError);
    CHECK_THROWS_AS(Network::init({1, 8, 8}, {LayerSpec::conv2d(1, 2, 3), LayerSpec::dense(72, 2)}, 0), ShapeError);
    CHECK_THROWS_AS(Network::init({1, 8, 8}, {LayerSpec::conv2d(1, 2, 7)}, 0), ShapeError);
}

TEST_CASE("forward: activations and layer dims") {
    Network mlp = Network::mlp(784, {128, 64}, 10, 0);
    CHECK(mlp.layer_dims() == std::vector<ActivationDims>{{128, 1, 1}, {64, 1, 1}});
    Network conv = Network::small_conv(1, 28, 28, 8, 10, 0);
    CHECK(conv.layer_dims() == std::vector<ActivationDims>{{8, 28, 28}});

    std::mt19937_64 rng(2);
    Tape tape;
    auto out = conv.forward(tape, tape.constant(random_tensor({2, 1, 28, 28}, rng, 0, 1)));
    REQUIRE(out.activations.size() == 1);
    CHECK(out.activations[0].shape() == Shape{2, 8, 28, 28});
    CHECK(out.logits.shape() == Shape{2, 10});
    CHECK_THROWS_AS(conv.forward(tape, tape.constant(Tensor({2, 784}))), ShapeError);
}

TEST_CASE("forward: stats modes") {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({4, 6}, rng);
    Network plain = Network::mlp(6, {5}, 3, 1);
    CHECK(plain.logits(x, StatsMode::Main).values() == plain.logits(x, StatsMode::Aug).values());

    Network dual = Network::mlp(6, {5}, 3, 1, true);
    CHECK(dual.logits(x, StatsMode::Main).values() == dual.logits(x, StatsMode::Aug).values());
    {
        Tape tape;
        dual.forward_train(tape, tape.constant(x), StatsMode::Aug, true);
    }
    CHECK(dual.logits(x, StatsMode::Main).values() != dual.logits(x, StatsMode::Aug).values());
}

TEST_CASE("checkpoint: round trip and format") {
    std::mt19937_64 rng(8);
    Network net = Network::mlp(6, {5}, 3, 4, true);
    {
        Tape tape;
        net.forward_train(tape, tape.constant(random_tensor({4, 6}, rng)), StatsMode::Aug, true);
    }
    std::stringstream ss;
    net.write(ss);
    const std::string bytes = ss.str();
    CHECK(bytes.substr(0, 8) == "LPA3NET1");
    Network back = Network::read(ss);
    CHECK(back.same_parameters(net));
    Tensor x = random_tensor({2, 6}, rng);
    CHECK(back.logits(x, StatsMode::Aug).values() == net.logits(x, StatsMode::Aug).values());

    auto path = std::filesystem::temp_directory_path() / "lpa3_net_roundtrip.bin";
    net.save(path);
    CHECK(Network::load(path).same_parameters(net));
    std::filesystem::remove(path);

    std::stringstream bad("LPA3NETX....");
    CHECK_THROWS(Network::read(bad));
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS(Network::read(truncated));
}
