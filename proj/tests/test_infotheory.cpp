#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "lpa3/infotheory.hpp"

using namespace lpa3;

namespace {

DiscreteJoint labeled_x(std::size_t nx, std::size_t ny, std::mt19937_64& rng) {
    // H(Y|X) = 0: each x carries exactly one label, every label used.
    std::vector<double> t(nx * ny, 0.0);
    std::exponential_distribution<double> e(1.0);
    double s = 0.0;
    for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t y = i < ny ? i : rng() % ny;
        s += (t[i * ny + y] = e(rng));
    }
    for (auto& v : t) v /= s;
    return DiscreteJoint({{"X", nx}, {"Y", ny}}, t);
}

// Independent oracle: walk set partitions of X (restricted growth strings)
// with at most k blocks and return the smallest H(Z) among sufficient ones.
struct OracleResult {
    double best = INFINITY;
    std::size_t sufficient_maps = 0;
};

OracleResult partition_oracle(const std::vector<std::vector<double>>& pxy, std::size_t k, double i_xy) {
    const std::size_t nx = pxy.size(), ny = pxy[0].size();
    OracleResult out;
    std::vector<std::size_t> rgs(nx, 0);
    auto visit = [&](std::size_t blocks) {
        std::vector<std::vector<double>> pzy(blocks, std::vector<double>(ny, 0.0));
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t j = 0; j < ny; ++j) pzy[rgs[i]][j] += pxy[i][j];
        double hz = 0.0, i_zy = 0.0;
        std::vector<double> py(ny, 0.0);
        for (const auto& row : pzy)
            for (std::size_t j = 0; j < ny; ++j) py[j] += row[j];
        for (const auto& row : pzy) {
            double pz = 0.0;
            for (double v : row) pz += v;
            if (pz > 0.0) hz -= pz * std::log(pz);
            for (std::size_t j = 0; j < ny; ++j)
                if (row[j] > 0.0) i_zy += row[j] * std::log(row[j] / (pz * py[j]));
        }
        if (std::abs(i_zy - i_xy) <= 1e-9) {
            out.best = std::min(out.best, hz);
            std::size_t labelings = 1;
            for (std::size_t b = 0; b < blocks; ++b) labelings *= k - b;
            out.sufficient_maps += labelings;
        }
    };
    std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t used) {
        if (i == nx) {
            visit(used);
            return;
        }
        for (std::size_t b = 0; b <= used && b < k; ++b) {
            rgs[i] = b;
            rec(i + 1, std::max(used, b + 1));
        }
    };
    rec(0, 0);
    return out;
}

}  // namespace

TEST_CASE("measures: worked examples") {
    DiscreteJoint u({{"A", 4}}, {0.25, 0.25, 0.25, 0.25});
    CHECK(std::abs(entropy(u, {"A"}) - std::log(4.0)) <= 1e-15);

    DiscreteJoint ind({{"X", 2}, {"Y", 3}}, {0.3 * 0.2, 0.3 * 0.5, 0.3 * 0.3, 0.7 * 0.2, 0.7 * 0.5, 0.7 * 0.3});
    CHECK(std::abs(mutual_information(ind, {"X"}, {"Y"})) <= 1e-12);

    DiscreteJoint same({{"X", 2}, {"Y", 2}}, {0.5, 0.0, 0.0, 0.5});
    CHECK(std::abs(mutual_information(same, {"X"}, {"Y"}) - std::log(2.0)) <= 1e-15);
    CHECK(conditional_entropy(same, {"Y"}, {"X"}) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(entropy(same, {}) == 0.0);

    CHECK_THROWS_AS(entropy(same, {"Q"}), std::out_of_range);
    CHECK_THROWS_AS(DiscreteJoint({{"X", 2}}, {0.5, 0.6}), std::invalid_argument);
    CHECK_THROWS_AS(DiscreteJoint({{"X", 2}}, {1.5, -0.5}), std::invalid_argument);
    CHECK_THROWS_AS(DiscreteJoint({{"X", 2}, {"X", 1}}, {0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("property: chain rule, non-negativity and data processing") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 300; ++i) {
        auto j = random_joint({{"A", 1 + rng() % 4}, {"B", 1 + rng() % 4}, {"C", 1 + rng() % 4}}, rng, 0.2);
        const double lhs = mutual_information(j, {"A"}, {"B", "C"});
        const double rhs = mutual_information(j, {"A"}, {"B"}) + conditional_mi(j, {"A"}, {"C"}, {"B"});
        CHECK(std::abs(lhs - rhs) <= 1e-10);
        for (const Names& v : {Names{"A"}, Names{"B", "C"}, Names{"A", "B", "C"}}) CHECK(entropy(j, v) >= 0.0);
        CHECK(mutual_information(j, {"A"}, {"C"}) >= 0.0);
        CHECK(conditional_mi(j, {"A"}, {"B"}, {"C"}) >= 0.0);

        // Z = channel(B): I(Z; A) <= I(B; A)
        const std::size_t nb = j.alphabet("B"), nz = 1 + rng() % 3;
        Channel ch{nb, nz, {}};
        std::exponential_distribution<double> e(1.0);
        for (std::size_t r = 0; r < nb; ++r) {
            std::vector<double> row(nz);
            double s = 0.0;
            for (auto& v : row) s += (v = e(rng));
            for (auto& v : row) ch.table.push_back(v / s);
        }
        auto jz = extend(j, "B", ch, "Z");
        CHECK(mutual_information(jz, {"Z"}, {"A"}) <= mutual_information(jz, {"B"}, {"A"}) + 1e-10);
    }
}

TEST_CASE("task_nuisance_decompose") {
    DiscreteJoint same({{"X", 2}, {"Y", 2}}, {0.4, 0.0, 0.0, 0.6});
    auto d0 = task_nuisance_decompose(same);
    CHECK(d0.ok);
    CHECK(d0.nuisance_size == 1);

    DiscreteJoint ind({{"X", 3}, {"Y", 2}}, {1 / 6.0, 1 / 6.0, 1 / 6.0, 1 / 6.0, 1 / 6.0, 1 / 6.0});
    auto d1 = task_nuisance_decompose(ind);
    CHECK(d1.ok);
    CHECK(entropy(d1.joint, {"N"}) >= entropy(ind, {"X"}) - 1e-12);

    std::mt19937_64 seven(7);
    auto d2 = task_nuisance_decompose(random_joint({{"X", 3}, {"Y", 3}}, seven));
    CHECK(d2.ok);
    CHECK(d2.mi_n_y <= 1e-12);
    CHECK(d2.h_x_given_yn <= 1e-12);

    // a label with zero mass is skipped
    DiscreteJoint gap({{"X", 2}, {"Y", 3}}, {0.2, 0.0, 0.3, 0.1, 0.0, 0.4});
    CHECK(task_nuisance_decompose(gap).ok);

    std::mt19937_64 rng(21);
    for (int i = 0; i < 200; ++i) {
        auto j = random_joint({{"X", 1 + rng() % 6}, {"Y", 1 + rng() % 6}}, rng, 0.3);
        auto d = task_nuisance_decompose(j);
        REQUIRE(d.ok);
        double pn = 0.0;
        for (double p : d.nuisance_probs) pn += p;
        CHECK(std::abs(pn - 1.0) <= 1e-12);
    }
}

TEST_CASE("search_min_sufficient") {
    // X = (Y, N) with Y = x / 3: the projection onto Y is minimal.
    std::vector<double> t(6 * 2, 0.0);
    const double pn[3] = {0.2, 0.3, 0.5}, py[2] = {0.45, 0.55};
    for (std::size_t yv = 0; yv < 2; ++yv)
        for (std::size_t n = 0; n < 3; ++n) t[(yv * 3 + n) * 2 + yv] = py[yv] * pn[n];
    DiscreteJoint prod({{"X", 6}, {"Y", 2}}, t);
    auto cert = search_min_sufficient(prod, 2, 0.0);
    REQUIRE(cert.found);
    CHECK(std::abs(cert.best.i_zx - cert.i_xy) <= 1e-12);
    // the first enumerated of the two labelings wins the tie
    CHECK(cert.best.map == std::vector<std::size_t>{1, 1, 1, 0, 0, 0});
    CHECK(cert.best.index == 7);
    CHECK(cert.ledger.size() == 2);
    CHECK(cert.enumerated == 64);
    CHECK(cert.certified);

    CHECK_FALSE(search_min_sufficient(prod, 1, 0.0).found);
    DiscreteJoint ind({{"X", 2}, {"Y", 2}}, {0.25, 0.25, 0.25, 0.25});
    auto constant = search_min_sufficient(ind, 1, 0.0);
    CHECK(constant.found);
    CHECK(constant.best.i_zx == 0.0);

    CHECK_THROWS_AS(search_min_sufficient(prod, 0, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(search_min_sufficient(prod, 7, 0.0), std::invalid_argument);
    std::mt19937_64 big(1);
    CHECK_THROWS_AS(search_min_sufficient(random_joint({{"X", 9}, {"Y", 2}}, big), 2, 0.0), std::invalid_argument);
}

TEST_CASE("property: search matches partition re-enumeration") {
    std::mt19937_64 three(3);
    for (int inst = 0; inst < 20; ++inst) {
        const std::size_t nx = inst == 0 ? 6 : 3 + three() % 4, ny = inst == 0 ? 2 : 2 + three() % 2;
        const std::size_t k = inst == 0 ? 2 : 2 + three() % (nx - 1);
        DiscreteJoint j = labeled_x(nx, ny, three);
        auto cert = search_min_sufficient(j, k, 1e-6);
        std::vector<std::vector<double>> pxy(nx, std::vector<double>(ny));
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t y = 0; y < ny; ++y) pxy[i][y] = j.table()[i * ny + y];
        auto oracle = partition_oracle(pxy, k, cert.i_xy);
        CHECK(cert.ledger.size() == oracle.sufficient_maps);
        if (oracle.sufficient_maps == 0) {
            CHECK_FALSE(cert.found);
            continue;
        }
        REQUIRE(cert.found);
        CHECK(std::abs(cert.best.i_zx - oracle.best) <= 1e-12);
        CHECK(cert.certified);
        CHECK(cert.epsilon_minimal >= 1);
    }
}

TEST_CASE("check_theorem_conditions") {
    std::mt19937_64 rng(5);
    auto inst = make_additive_instance(3, 4, rng);
    auto r = check_theorem_conditions(inst.joint);
    CHECK(r.assumption_holds);
    CHECK(std::abs(r.cond_a_slack) <= 1e-9);
    CHECK(r.cond_a);
    CHECK(r.epsilon <= 1e-9);
    CHECK(r.residual <= 1e-9);
    CHECK(nuisance_invariant(inst));

    // X' = X
    const std::size_t nx = inst.joint.alphabet("X");
    std::vector<std::size_t> id(nx);
    std::iota(id.begin(), id.end(), 0);
    auto base = inst.joint.marginal({"X", "Y", "N"});
    auto copy = extend(base, "X", Channel::deterministic(id, nx), "X'");
    auto rc = check_theorem_conditions(copy);
    CHECK(std::abs(rc.cond_a_slack) <= 1e-12);
    CHECK(std::abs(rc.epsilon - mutual_information(base, {"X"}, {"N"})) <= 1e-12);
    CHECK(rc.residual <= 1e-12);

    // X' independent of everything
    Channel noise{nx, 2, {}};
    for (std::size_t i = 0; i < nx; ++i) {
        noise.table.push_back(0.3);
        noise.table.push_back(0.7);
    }
    auto ri = check_theorem_conditions(extend(base, "X", noise, "X'"));
    CHECK_FALSE(ri.cond_a);
    CHECK(ri.epsilon <= 1e-12);

    // label noise breaks the assumption and is reported
    auto noisy = random_joint({{"X", 3}, {"Y", 2}, {"N", 2}, {"X'", 2}}, rng);
    CHECK_FALSE(check_theorem_conditions(noisy).assumption_holds);
}

TEST_CASE("check_symmetric_sufficiency") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        std::mt19937_64 rng(seed);
        auto j = random_symmetric_joint(2 + seed % 3, 2 + seed % 4, rng);
        auto r = check_symmetric_sufficiency(j);
        CHECK(r.symmetric);
        CHECK(r.equal_marginals);
        CHECK(r.mi_gap <= 1e-9);
        CHECK(r.sufficient);
    }
    std::mt19937_64 rng(9);
    auto xy = random_joint({{"X", 3}, {"Y", 2}}, rng);
    auto constant = extend(xy, "X", Channel::deterministic({0, 0, 0}, 3), "X'");
    CHECK_FALSE(check_symmetric_sufficiency(constant).symmetric);
    CHECK_FALSE(check_symmetric_sufficiency(constant).sufficient);
}

TEST_CASE("read_joint_text") {
    std::istringstream in("# toy\nX 2 Y 2\n0.1\n0.2\n\n0.3 # note\n0.4\n");
    auto j = read_joint_text(in);
    CHECK(j.variables() == std::vector<Variable>{{"X", 2}, {"Y", 2}});
    CHECK(j.prob({1, 0}) == 0.3);
    std::istringstream bad_sum("X 2\n0.5\n0.6\n");
    CHECK_THROWS_AS(read_joint_text(bad_sum), std::invalid_argument);
    std::istringstream bad_token("X 2\n0.5\nabc\n");
    CHECK_THROWS_AS(read_joint_text(bad_token), std::invalid_argument);
    std::istringstream bad_header("X\n1.0\n");
    CHECK_THROWS_AS(read_joint_text(bad_header), std::invalid_argument);
}
