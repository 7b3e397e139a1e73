#pragma once

// Exact information measures over small discrete joints (nats), plus the
// constructions used to check the task/nuisance statements on toy instances.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

namespace lpa3 {

struct Variable {
    std::string name;
    std::size_t size = 0;

    bool operator==(const Variable&) const = default;
};

using Names = std::vector<std::string>;

// Dense probability table, row-major with the first variable most significant.
class DiscreteJoint {
public:
    static constexpr double kSumTolerance = 1e-12;

    DiscreteJoint() = default;
    // Throws std::invalid_argument on duplicate names, zero-size alphabets,
    // negative entries, a size mismatch or a total off 1 by > 1e-12.
    DiscreteJoint(std::vector<Variable> variables, std::vector<double> table);

    const std::vector<Variable>& variables() const { return vars_; }
    const std::vector<double>& table() const { return table_; }
    std::size_t index_of(const std::string& name) const;  // throws std::out_of_range
    std::size_t alphabet(const std::string& name) const { return vars_[index_of(name)].size; }
    bool has(const std::string& name) const;

    double prob(const std::vector<std::size_t>& assignment) const;
    std::vector<std::size_t> unflatten(std::size_t flat) const;
    std::size_t flatten(const std::vector<std::size_t>& assignment) const;

    // Marginal over `keep`, in the given order.
    DiscreteJoint marginal(const Names& keep) const;

private:
    std::vector<Variable> vars_;
    std::vector<double> table_;
};

// Row-stochastic conditional P(out | in).
struct Channel {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> table;  // in x out

    static Channel deterministic(const std::vector<std::size_t>& map, std::size_t out);
    void validate() const;  // rows sum to 1 within 1e-12
};

// Appends Z = channel(source) as a new variable.
DiscreteJoint extend(const DiscreteJoint& joint, const std::string& source, const Channel& channel,
                     const std::string& name);

// Names may be empty for `given`. 0 log 0 = 0. Mutual informations within
// 1e-12 below zero are returned as 0.
double entropy(const DiscreteJoint& joint, const Names& vars);
double conditional_entropy(const DiscreteJoint& joint, const Names& vars, const Names& given);
double mutual_information(const DiscreteJoint& joint, const Names& a, const Names& b);
double conditional_mi(const DiscreteJoint& joint, const Names& a, const Names& b, const Names& given);

DiscreteJoint random_joint(const std::vector<Variable>& variables, std::mt19937_64& rng, double zero_fraction = 0.0);

struct Decomposition {
    std::size_t nuisance_size = 0;
    std::vector<double> nuisance_probs;
    std::vector<std::size_t> d;  // d[y * nuisance_size + n] = x
    DiscreteJoint joint;         // over (X, Y, N)
    double mi_n_y = 0.0;         // I(N; Y)
    double h_x_given_yn = 0.0;   // H(X | Y, N)
    double marginal_error = 0.0; // max |P'(x, y) - P(x, y)|
    bool ok = false;             // all three within 1e-12
};

// Inverse-CDF coupling: N indexes the cells of the common refinement of the
// conditional CDFs of X given each y, and X = d(Y, N). Rows with zero mass
// are skipped.
Decomposition task_nuisance_decompose(const DiscreteJoint& joint, const std::string& x = "X",
                                      const std::string& y = "Y", const std::string& n = "N");

struct MapScore {
    std::vector<std::size_t> map;  // x -> z
    std::uint64_t index = 0;       // enumeration position
    double i_zy = 0.0;
    double i_zx = 0.0;             // = H(Z) for a deterministic map
};

struct SufficiencyCertificate {
    bool found = false;
    double i_xy = 0.0;
    MapScore best;
    std::vector<MapScore> ledger;     // sufficient maps sorted by (i_zx, index)
    std::uint64_t enumerated = 0;
    double epsilon = 0.0;
    std::size_t epsilon_minimal = 0;  // sufficient maps within epsilon of the best
    bool certified = false;           // best.i_zx <= every sufficient i_zx + epsilon
};

inline constexpr double kSufficiencyTolerance = 1e-9;
inline constexpr std::size_t kMaxSearchAlphabet = 8;

// Enumerates all k^|X| maps (map index m sends x to digit x of m in base k).
// Throws std::invalid_argument when |X| > 8 or k is outside [1, |X|].
SufficiencyCertificate search_min_sufficient(const DiscreteJoint& joint, std::size_t k, double epsilon,
                                             const std::string& x = "X", const std::string& y = "Y");

struct TheoremNames {
    std::string x = "X", y = "Y", n = "N", x_prime = "X'";
};

struct TheoremReport {
    double cond_a_slack = 0.0;  // I(X'; Y) - I(X; Y)
    bool cond_a = false;        // |slack| <= 1e-9
    double epsilon = 0.0;       // I(X'; N)
    double residual = 0.0;      // |I(X'; X) - I(X'; N) - I(X'; Y)|
    double h_y_given_x = 0.0;
    bool assumption_holds = false;  // H(Y | X) <= 1e-9; otherwise the identity is not guaranteed
};

TheoremReport check_theorem_conditions(const DiscreteJoint& joint, const TheoremNames& names = {});

struct SymmetryReport {
    bool symmetric = false;
    bool equal_marginals = false;
    double mi_gap = 0.0;  // |I(X'; Y) - I(X; Y)|
    bool sufficient = false;
};

SymmetryReport check_symmetric_sufficiency(const DiscreteJoint& joint, const std::string& x = "X",
                                           const std::string& x_prime = "X'", const std::string& y = "Y");

// Random P(Y) and exchangeable P(X, X' | Y) over a shared alphabet.
DiscreteJoint random_symmetric_joint(std::size_t ny, std::size_t nx, std::mt19937_64& rng);

// X = h1(Y) + h2(N) with h1(y) = y * nn and h2 values in [0, nn); the
// augmentation X' = h1(Y) + h2(N') resamples the nuisance independently.
struct AdditiveInstance {
    std::vector<std::size_t> h1, h2;
    std::vector<std::size_t> pi;  // x -> y, kNoClass outside the support
    DiscreteJoint joint;          // over (X, Y, N, X')
};

inline constexpr std::size_t kNoClass = static_cast<std::size_t>(-1);

AdditiveInstance make_additive_instance(std::size_t ny, std::size_t nn, std::mt19937_64& rng);

// For every y, n1, n2 with h1(y)+h2(n1) and h1(y)+h2(n2) in the support, pi
// sends both points to y.
bool nuisance_invariant(const AdditiveInstance& instance);

// Text table: first line "name size name size ...", then one probability per
// line in row-major order. Blank lines and '#' comments are ignored.
DiscreteJoint read_joint_text(std::istream& is);

}  // namespace lpa3
