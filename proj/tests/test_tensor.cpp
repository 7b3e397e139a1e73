#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "lpa3/tensor.hpp"

using namespace lpa3;
using lpa3::testing::max_gradient_error;
using lpa3::testing::random_tensor;

namespace {

// Weighted sum turns any tensor-valued op into a scalar with a generic
// upstream gradient.
Var weighted_sum(Tape& tape, Var v, std::mt19937_64& rng) {
    Tensor w = random_tensor(v.shape(), rng);
    return ops::sum(ops::mul(v, tape.constant(w)));
}

// Values kept away from the relu/clamp kinks by at least `gap`.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.05) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (auto& v : t.data()) v = v >= 0 ? v + gap : v - gap;
    return t;
}

}  // namespace

TEST_CASE("tensor: shape invariants") {
    CHECK(Tensor({2, 3}).size() == 6);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor({4}).reshaped({3}), ShapeError);
    CHECK(Tensor::vector({1, 2, 3, 4}).reshaped({2, 2}).shape() == Shape{2, 2});
}

TEST_CASE("forward primitives: worked values") {
    Tape tape;
    Var r = ops::relu(tape.constant(Tensor::vector({-1, 0, 2})));
    CHECK(r.value().values() == std::vector<double>{0, 0, 2});

    Var s = ops::softmax(tape.constant(Tensor::vector({0, 0})));
    CHECK(s.value()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.value()[1] == doctest::Approx(0.5).epsilon(1e-15));

    Var n = ops::l2_norm(tape.constant(Tensor::vector({3, 4})));
    CHECK(n.value().item() == 5.0);

    Var m = ops::max_last(tape.constant(Tensor({2, 3}, {1, 7, 2, -1, -3, -2})));
    CHECK(m.value().values() == std::vector<double>{7, -1});

    Var c = ops::clamp(tape.constant(Tensor::vector({-2, 0.5, 3})), 0.0, 1.0);
    CHECK(c.value().values() == std::vector<double>{0, 0.5, 1});
}

TEST_CASE("backward: analytic derivatives") {
    SUBCASE("d/dx x^2 at 3") {
        Tape tape;
        Var x = tape.leaf(Tensor::scalar(3.0));
        tape.backward(ops::mul(x, x));
        CHECK(tape.grad(x).item() == 6.0);
    }
    SUBCASE("d/dx sum(relu(x)) at [-1, 2]") {
        Tape tape;
        Var x = tape.leaf(Tensor::vector({-1, 2}));
        tape.backward(ops::sum(ops::relu(x)));
        CHECK(tape.grad(x).values() == std::vector<double>{0, 1});
    }
    SUBCASE("relu derivative at exactly zero is zero") {
        Tape tape;
        Var x = tape.leaf(Tensor::vector({0.0}));
        tape.backward(ops::sum(ops::relu(x)));
        CHECK(tape.grad(x)[0] == 0.0);
    }
    SUBCASE("l2 norm gradient at the zero vector is zero") {
        Tape tape;
        Var x = tape.leaf(Tensor::vector({0.0, 0.0}));
        tape.backward(ops::sum(ops::l2_norm(x)));
        CHECK(tape.grad(x).values() == std::vector<double>{0, 0});
    }
    SUBCASE("watched external tensors accumulate") {
        Tensor w = Tensor::vector({2.0, -1.0});
        w.set_requires_grad(true);
        for (int pass = 0; pass < 2; ++pass) {
            Tape tape;
            Var wv = tape.watch(w);
            tape.backward(ops::sum(ops::mul(wv, wv)));
        }
        CHECK(w.grad()[0] == 8.0);
        CHECK(w.grad()[1] == -4.0);
    }
}

TEST_CASE("backward: error paths") {
    SUBCASE("non-scalar output") {
        Tape tape;
        Var x = tape.leaf(Tensor::vector({1, 2}));
        CHECK_THROWS_AS(tape.backward(ops::relu(x)), TapeError);
    }
    SUBCASE("consumed tape") {
        Tape tape;
        Var x = tape.leaf(Tensor::scalar(1.0));
        Var y = ops::mul(x, x);
        tape.backward(y);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(y), TapeError);
        CHECK_THROWS_AS(ops::add(x, x), TapeError);
    }
    SUBCASE("shape mismatch") {
        Tape tape;
        Var a = tape.constant(Tensor::vector({1, 2}));
        Var b = tape.constant(Tensor::vector({1, 2, 3}));
        CHECK_THROWS_AS(ops::add(a, b), ShapeError);
        CHECK_THROWS_AS(ops::matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))), ShapeError);
    }
    SUBCASE("non-finite result") {
        Tape tape;
        CHECK_THROWS_AS(ops::log(tape.constant(Tensor::vector({-1.0}))), NumericError);
        CHECK_THROWS_AS(ops::exp(tape.constant(Tensor::vector({1000.0}))), NumericError);
    }
    SUBCASE("kernel size limit") {
        Tape tape;
        Var x = tape.constant(Tensor({1, 1, 8, 8}));
        CHECK_THROWS_AS(ops::conv2d(x, tape.constant(Tensor({1, 1, 7, 7})), tape.constant(Tensor({1})), 0),
                        ShapeError);
    }
    SUBCASE("scalar broadcast only") {
        Tape tape;
        Var a = tape.constant(Tensor({2, 2}, 1.0));
        Var s = tape.constant(Tensor::scalar(3.0));
        CHECK(ops::mul(a, s).value().values() == std::vector<double>{3, 3, 3, 3});
        CHECK(ops::sub(s, a).value().values() == std::vector<double>{2, 2, 2, 2});
    }
}

TEST_CASE("property: every primitive matches central finite differences") {
    using lpa3::testing::ScalarFn;
    const double tol = 1e-4;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> dim(1, 8);
        const std::size_t r = dim(rng), c = dim(rng), k = dim(rng);
        std::mt19937_64 wrng(seed + 1000);
        auto wsum = [&wrng](Tape& t, Var v) {
            std::mt19937_64 local = wrng;  // same weights on every FD evaluation
            return weighted_sum(t, v, local);
        };

        std::vector<std::pair<const char*, std::pair<ScalarFn, std::vector<Tensor>>>> cases;
        cases.push_back({"add", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::add(v[0], v[1])); },
                                 {random_tensor({r, c}, rng), random_tensor({r, c}, rng)}}});
        cases.push_back({"sub", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::sub(v[0], v[1])); },
                                 {random_tensor({r, c}, rng), random_tensor({1}, rng)}}});
        cases.push_back({"mul", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::mul(v[0], v[1])); },
                                 {random_tensor({r, c}, rng), random_tensor({r, c}, rng)}}});
        cases.push_back({"matmul",
                         {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::matmul(v[0], v[1])); },
                          {random_tensor({r, k}, rng), random_tensor({k, c}, rng)}}});
        cases.push_back({"linear",
                         {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::linear(v[0], v[1], v[2])); },
                          {random_tensor({r, k}, rng), random_tensor({c, k}, rng), random_tensor({c}, rng)}}});
        {
            const std::size_t ch = 1 + seed % 3, hw = 3 + seed % 4, kk = 1 + 2 * (seed % 2);
            cases.push_back({"conv2d",
                             {[&, kk](Tape& t, const std::vector<Var>& v) {
                                  return wsum(t, ops::conv2d(v[0], v[1], v[2], kk / 2));
                              },
                              {random_tensor({2, ch, hw, hw}, rng), random_tensor({2, ch, kk, kk}, rng),
                               random_tensor({2}, rng)}}});
        }
        cases.push_back({"relu", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::relu(v[0])); },
                                  {away_from_zero({r, c}, rng)}}});
        cases.push_back({"log", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::log(v[0])); },
                                 {random_tensor({r, c}, rng, 0.2, 2.0)}}});
        cases.push_back({"exp", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::exp(v[0])); },
                                 {random_tensor({r, c}, rng)}}});
        cases.push_back({"sum", {[&](Tape&, const std::vector<Var>& v) { return ops::sum(ops::mul(v[0], v[0])); },
                                 {random_tensor({r, c}, rng)}}});
        cases.push_back({"mean", {[&](Tape&, const std::vector<Var>& v) { return ops::mean(ops::mul(v[0], v[0])); },
                                  {random_tensor({r, c}, rng)}}});
        cases.push_back({"l2_norm", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::l2_norm(v[0])); },
                                     {random_tensor({r, c}, rng)}}});
        cases.push_back({"softmax", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::softmax(v[0])); },
                                     {random_tensor({r, c}, rng, -3, 3)}}});
        cases.push_back({"log_softmax",
                         {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::log_softmax(v[0])); },
                          {random_tensor({r, c}, rng, -3, 3)}}});
        {
            // Distinct entries so the argmax is stable under the FD probe.
            Tensor m = random_tensor({r, c}, rng);
            for (std::size_t i = 0; i < m.size(); ++i) m[i] += 0.1 * static_cast<double>(i % c);
            cases.push_back({"max", {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::max_last(v[0])); },
                                     {m}}});
        }
        cases.push_back({"clamp",
                         {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::clamp(v[0], -0.5, 0.5)); },
                          {away_from_zero({r, c}, rng)}}});
        cases.push_back({"channel_normalize_2d",
                         {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::channel_normalize(v[0])); },
                          {random_tensor({r, c}, rng)}}});
        cases.push_back({"channel_normalize_4d",
                         {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::channel_normalize(v[0])); },
                          {random_tensor({2, 3, 2, 2}, rng)}}});
        cases.push_back({"sample_normalize",
                         {[&](Tape& t, const std::vector<Var>& v) { return wsum(t, ops::sample_normalize(v[0])); },
                          {random_tensor({2, 3, 2, 2}, rng)}}});
        {
            std::vector<double> mu{0.1, -0.2, 0.3}, var{0.5, 1.0, 2.0};
            cases.push_back({"normalize_affine",
                             {[&, mu, var](Tape& t, const std::vector<Var>& v) {
                                  return wsum(t, ops::normalize_affine(v[0], mu, var, v[1], v[2], 1e-5));
                              },
                              {random_tensor({r, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)}}});
        }
        {
            std::vector<std::size_t> idx(r);
            for (auto& i : idx) i = std::uniform_int_distribution<std::size_t>(0, c - 1)(rng);
            cases.push_back({"pick", {[&, idx](Tape& t, const std::vector<Var>& v) {
                                          return wsum(t, ops::pick(v[0], idx));
                                      },
                                      {random_tensor({r, c}, rng)}}});
        }
        cases.push_back({"concat",
                         {[&](Tape& t, const std::vector<Var>& v) {
                              std::vector<Var> parts{v[0], v[1]};
                              return wsum(t, ops::concat_columns(parts));
                          },
                          {random_tensor({r, c}, rng), random_tensor({r, k}, rng)}}});
        cases.push_back({"transpose+reshape",
                         {[&](Tape& t, const std::vector<Var>& v) {
                              return wsum(t, ops::reshape(ops::transpose(v[0]), {r * c}));
                          },
                          {random_tensor({r, c}, rng)}}});

        for (auto& [name, fc] : cases) {
            const double err = max_gradient_error(fc.first, fc.second);
            worst = std::max(worst, err);
            CHECK_MESSAGE(err <= tol, name << " seed " << seed << " rel err " << err);
        }
    }
    MESSAGE("worst primitive relative error " << worst);
}

TEST_CASE("property: softmax lies on the simplex") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Tape tape;
        Var p = ops::softmax(tape.constant(random_tensor({3, 7}, rng, -50, 50)));
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                const double v = p.value()[r * 7 + j];
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("property: backward is linear in the loss") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x0 = random_tensor({4, 5}, rng);
        Tensor w = random_tensor({3, 5}, rng);
        Tensor b = random_tensor({3}, rng);
        auto loss1 = [&](Var x) {
            Tape& t = x.tape();
            return ops::sum(ops::log_softmax(ops::linear(x, t.constant(w), t.constant(b))));
        };
        auto loss2 = [](Var x) { return ops::sum(ops::l2_norm(ops::relu(x))); };

        Tape ta;
        Var xa = ta.leaf(x0);
        ta.backward(loss1(xa));
        Tape tb;
        Var xb = tb.leaf(x0);
        tb.backward(loss2(xb));
        Tape tc;
        Var xc = tc.leaf(x0);
        tc.backward(ops::add(loss1(xc), loss2(xc)));

        Tensor ga = ta.grad(xa), gb = tb.grad(xb), gc = tc.grad(xc);
        for (std::size_t i = 0; i < gc.size(); ++i) CHECK(std::abs(gc[i] - (ga[i] + gb[i])) <= 1e-10);
    }
}
