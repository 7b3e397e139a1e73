#pragma once

// Small trained classifiers shared by the attack and trainer tests.

#include <numeric>
#include <random>

#include "lpa3/data.hpp"
#include "lpa3/network.hpp"

namespace lpa3::testing {

inline std::vector<std::size_t> hard_labels(const Dataset& d) {
    return {d.labels.begin(), d.labels.end()};
}

// Minibatch SGD on cross-entropy; inputs are reshaped to the net's input shape.
inline void fit(Network& net, const Dataset& data, int epochs, double lr, std::uint64_t seed, std::size_t batch = 32) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    Shape in{0};
    for (auto d : net.input_shape()) in.push_back(d);
    for (int e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t s = 0; s < order.size(); s += batch) {
            std::vector<std::size_t> idx(order.begin() + s, order.begin() + std::min(order.size(), s + batch));
            std::vector<std::size_t> y;
            for (auto i : idx) y.push_back(static_cast<std::size_t>(data.labels[i]));
            in[0] = idx.size();
            Tensor xb = data.gather(idx).reshaped(in);
            for (auto* p : net.parameters()) p->zero_grad();
            Tape tape;
            auto out = net.forward_train(tape, tape.constant(xb), StatsMode::Main, false);
            tape.backward(ops::neg(ops::mean(ops::pick(ops::log_softmax(out.logits), y))));
            for (auto* p : net.parameters())
                for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] -= lr * p->grad()[i];
        }
    }
}

inline Tensor flat_inputs(const Network& net, const Dataset& d) {
    Shape in{d.size()};
    for (auto s : net.input_shape()) in.push_back(s);
    return d.all().reshaped(in);
}

inline double accuracy(const Network& net, const Dataset& d) {
    Tensor p = net.predict_proba(flat_inputs(net, d));
    const std::size_t c = net.num_classes();
    std::size_t ok = 0;
    for (std::size_t b = 0; b < d.size(); ++b) {
        auto row = p.data().subspan(b * c, c);
        ok += static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin()) == d.labels[b];
    }
    return static_cast<double>(ok) / static_cast<double>(d.size());
}

// MLP 64 -> 16 -> 2 trained on the synthetic bar task.
inline Network trained_bars_net(Dataset* out = nullptr) {
    Dataset d = synthetic_bars({.n = 200, .seed = 3});
    Network net = Network::mlp(64, {16}, 2, 5);
    fit(net, d, 30, 0.1, 1);
    if (out != nullptr) *out = d;
    return net;
}

}  // namespace lpa3::testing
