#include "lpa3/infotheory.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lpa3 {

namespace {

constexpr double kMiClamp = 1e-12;
constexpr double kMergeTolerance = 1e-14;

double plogp_sum(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

// Tiny negative round-off on entropies and informations is reported as 0.
double clamp_mi(double v) { return v < 0.0 && v >= -kMiClamp ? 0.0 : v; }

Names join(const Names& a, const Names& b) {
    Names out = a;
    for (const auto& n : b) {
        if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    }
    return out;
}

}  // namespace

DiscreteJoint::DiscreteJoint(std::vector<Variable> variables, std::vector<double> table)
    : vars_(std::move(variables)), table_(std::move(table)) {
    std::size_t n = 1;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        if (vars_[i].size == 0) throw std::invalid_argument("variable '" + vars_[i].name + "' has an empty alphabet");
        for (std::size_t j = 0; j < i; ++j) {
            if (vars_[j].name == vars_[i].name) throw std::invalid_argument("duplicate variable '" + vars_[i].name + "'");
        }
        n *= vars_[i].size;
    }
    if (table_.size() != n) {
        throw std::invalid_argument("joint table has " + std::to_string(table_.size()) + " entries, expected " +
                                    std::to_string(n));
    }
    double total = 0.0;
    for (double v : table_) {
        if (!(v >= 0.0)) throw std::invalid_argument("joint table has a negative or NaN entry");
        total += v;
    }
    if (std::abs(total - 1.0) > kSumTolerance) {
        std::ostringstream os;
        os.precision(17);
        os << "joint table sums to " << total;
        throw std::invalid_argument(os.str());
    }
}

std::size_t DiscreteJoint::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        if (vars_[i].name == name) return i;
    }
    throw std::out_of_range("unknown variable '" + name + "'");
}

bool DiscreteJoint::has(const std::string& name) const {
    return std::any_of(vars_.begin(), vars_.end(), [&](const Variable& v) { return v.name == name; });
}

std::size_t DiscreteJoint::flatten(const std::vector<std::size_t>& a) const {
    if (a.size() != vars_.size()) throw std::invalid_argument("assignment rank mismatch");
    std::size_t flat = 0;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        if (a[i] >= vars_[i].size) throw std::out_of_range("assignment outside alphabet of '" + vars_[i].name + "'");
        flat = flat * vars_[i].size + a[i];
    }
    return flat;
}

std::vector<std::size_t> DiscreteJoint::unflatten(std::size_t flat) const {
    std::vector<std::size_t> a(vars_.size());
    for (std::size_t i = vars_.size(); i-- > 0;) {
        a[i] = flat % vars_[i].size;
        flat /= vars_[i].size;
    }
    return a;
}

double DiscreteJoint::prob(const std::vector<std::size_t>& assignment) const { return table_[flatten(assignment)]; }

DiscreteJoint DiscreteJoint::marginal(const Names& keep) const {
    std::vector<std::size_t> idx;
    std::vector<Variable> out_vars;
    for (const auto& name : keep) {
        const std::size_t i = index_of(name);
        if (std::find(idx.begin(), idx.end(), i) != idx.end()) throw std::invalid_argument("duplicate variable '" + name + "'");
        idx.push_back(i);
        out_vars.push_back(vars_[i]);
    }
    // stride of each kept variable in the output table
    std::vector<std::size_t> stride(vars_.size(), 0);
    std::size_t s = 1;
    for (std::size_t k = idx.size(); k-- > 0;) {
        stride[idx[k]] = s;
        s *= vars_[idx[k]].size;
    }
    std::vector<double> out(s, 0.0);
    std::vector<std::size_t> digit(vars_.size(), 0);
    std::size_t pos = 0;
    for (double p : table_) {
        out[pos] += p;
        for (std::size_t i = vars_.size(); i-- > 0;) {
            pos += stride[i];
            if (++digit[i] < vars_[i].size) break;
            pos -= stride[i] * digit[i];
            digit[i] = 0;
        }
    }
    DiscreteJoint m;
    m.vars_ = std::move(out_vars);
    m.table_ = std::move(out);
    return m;
}

Channel Channel::deterministic(const std::vector<std::size_t>& map, std::size_t out) {
    Channel c{map.size(), out, std::vector<double>(map.size() * out, 0.0)};
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (map[i] >= out) throw std::out_of_range("deterministic channel output out of range");
        c.table[i * out + map[i]] = 1.0;
    }
    return c;
}

void Channel::validate() const {
    if (table.size() != in * out) throw std::invalid_argument("channel table size mismatch");
    for (std::size_t i = 0; i < in; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < out; ++j) {
            if (!(table[i * out + j] >= 0.0)) throw std::invalid_argument("channel has a negative entry");
            s += table[i * out + j];
        }
        if (std::abs(s - 1.0) > DiscreteJoint::kSumTolerance) throw std::invalid_argument("channel row does not sum to 1");
    }
}

DiscreteJoint extend(const DiscreteJoint& joint, const std::string& source, const Channel& channel,
                     const std::string& name) {
    channel.validate();
    const std::size_t src = joint.index_of(source);
    if (joint.variables()[src].size != channel.in) throw std::invalid_argument("channel input size does not match '" + source + "'");
    auto vars = joint.variables();
    vars.push_back({name, channel.out});
    std::vector<double> table;
    table.reserve(joint.table().size() * channel.out);
    for (std::size_t f = 0; f < joint.table().size(); ++f) {
        const std::size_t v = joint.unflatten(f)[src];
        for (std::size_t z = 0; z < channel.out; ++z) table.push_back(joint.table()[f] * channel.table[v * channel.out + z]);
    }
    return DiscreteJoint(std::move(vars), std::move(table));
}

double entropy(const DiscreteJoint& joint, const Names& vars) {
    if (vars.empty()) return 0.0;
    return clamp_mi(plogp_sum(joint.marginal(vars).table()));
}

double conditional_entropy(const DiscreteJoint& joint, const Names& vars, const Names& given) {
    return clamp_mi(entropy(joint, join(given, vars)) - entropy(joint, given));
}

double mutual_information(const DiscreteJoint& joint, const Names& a, const Names& b) {
    return clamp_mi(entropy(joint, a) + entropy(joint, b) - entropy(joint, join(a, b)));
}

double conditional_mi(const DiscreteJoint& joint, const Names& a, const Names& b, const Names& given) {
    return clamp_mi(entropy(joint, join(a, given)) + entropy(joint, join(b, given)) -
                    entropy(joint, join(join(a, b), given)) - entropy(joint, given));
}

DiscreteJoint random_joint(const std::vector<Variable>& variables, std::mt19937_64& rng, double zero_fraction) {
    std::size_t n = 1;
    for (const auto& v : variables) n *= v.size;
    std::exponential_distribution<double> e(1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> t(n);
    double s = 0.0;
    for (auto& v : t) {
        v = u(rng) < zero_fraction ? 0.0 : e(rng);
        s += v;
    }
    if (s == 0.0) {
        t[0] = 1.0;
        s = 1.0;
    }
    for (auto& v : t) v /= s;
    return DiscreteJoint(variables, std::move(t));
}

Decomposition task_nuisance_decompose(const DiscreteJoint& joint, const std::string& x, const std::string& y,
                                      const std::string& n) {
    const DiscreteJoint xy = joint.marginal({x, y});
    const std::size_t nx = xy.variables()[0].size, ny = xy.variables()[1].size;
    const auto& t = xy.table();
    std::vector<double> py(ny, 0.0);
    for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t j = 0; j < ny; ++j) py[j] += t[i * ny + j];

    // conditional CDFs and their common refinement
    std::vector<std::vector<double>> cdf(ny, std::vector<double>(nx, 0.0));
    std::vector<double> points;
    for (std::size_t j = 0; j < ny; ++j) {
        if (py[j] <= 0.0) continue;
        double acc = 0.0;
        for (std::size_t i = 0; i < nx; ++i) {
            acc += t[i * ny + j] / py[j];
            cdf[j][i] = acc;
            if (acc > kMergeTolerance) points.push_back(std::min(acc, 1.0));
        }
        cdf[j][nx - 1] = 1.0;
    }
    points.push_back(1.0);
    std::sort(points.begin(), points.end());
    std::vector<double> cuts{0.0};
    for (double p : points) {
        if (p - cuts.back() > kMergeTolerance) cuts.push_back(p);
    }
    cuts.back() = 1.0;

    Decomposition dec;
    dec.nuisance_size = cuts.size() - 1;
    const std::size_t nn = dec.nuisance_size;
    for (std::size_t k = 0; k < nn; ++k) dec.nuisance_probs.push_back(cuts[k + 1] - cuts[k]);
    dec.d.assign(ny * nn, 0);
    for (std::size_t j = 0; j < ny; ++j) {
        if (py[j] <= 0.0) continue;
        for (std::size_t k = 0; k < nn; ++k) {
            const double mid = 0.5 * (cuts[k] + cuts[k + 1]);
            std::size_t i = 0;
            while (i + 1 < nx && cdf[j][i] < mid) ++i;
            dec.d[j * nn + k] = i;
        }
    }

    std::vector<double> table(nx * ny * nn, 0.0);
    for (std::size_t j = 0; j < ny; ++j)
        for (std::size_t k = 0; k < nn; ++k) table[(dec.d[j * nn + k] * ny + j) * nn + k] += py[j] * dec.nuisance_probs[k];
    const Variable xv = xy.variables()[0], yv = xy.variables()[1];
    dec.joint = DiscreteJoint({xv, yv, {n, nn}}, std::move(table));

    dec.mi_n_y = mutual_information(dec.joint, {n}, {y});
    dec.h_x_given_yn = conditional_entropy(dec.joint, {x}, {y, n});
    const DiscreteJoint back = dec.joint.marginal({x, y});
    for (std::size_t f = 0; f < t.size(); ++f) dec.marginal_error = std::max(dec.marginal_error, std::abs(back.table()[f] - t[f]));
    dec.ok = std::abs(dec.mi_n_y) <= 1e-12 && std::abs(dec.h_x_given_yn) <= 1e-12 && dec.marginal_error <= 1e-12;
    return dec;
}

SufficiencyCertificate search_min_sufficient(const DiscreteJoint& joint, std::size_t k, double epsilon,
                                             const std::string& x, const std::string& y) {
    const DiscreteJoint xy = joint.marginal({x, y});
    const std::size_t nx = xy.variables()[0].size, ny = xy.variables()[1].size;
    if (nx > kMaxSearchAlphabet) {
        throw std::invalid_argument("search_min_sufficient: |X| = " + std::to_string(nx) + " exceeds the cap of 8");
    }
    if (k < 1 || k > nx) throw std::invalid_argument("search_min_sufficient: k must lie in [1, |X|]");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("search_min_sufficient: epsilon must be >= 0");
    const auto& t = xy.table();

    SufficiencyCertificate cert;
    cert.epsilon = epsilon;
    cert.i_xy = mutual_information(xy, {x}, {y});
    std::vector<double> py(ny, 0.0);
    for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t j = 0; j < ny; ++j) py[j] += t[i * ny + j];
    const double hy = plogp_sum(py);

    std::uint64_t total = 1;
    for (std::size_t i = 0; i < nx; ++i) total *= k;
    std::vector<std::size_t> digit(nx, 0);
    std::vector<double> pz(k), pzy(k * ny);
    for (std::uint64_t m = 0; m < total; ++m) {
        std::fill(pz.begin(), pz.end(), 0.0);
        std::fill(pzy.begin(), pzy.end(), 0.0);
        for (std::size_t i = 0; i < nx; ++i) {
            for (std::size_t j = 0; j < ny; ++j) {
                pzy[digit[i] * ny + j] += t[i * ny + j];
                pz[digit[i]] += t[i * ny + j];
            }
        }
        const double hz = plogp_sum(pz);
        const double i_zy = clamp_mi(hz + hy - plogp_sum(pzy));
        if (std::abs(i_zy - cert.i_xy) <= kSufficiencyTolerance) {
            cert.ledger.push_back({digit, m, i_zy, hz});
            if (!cert.found || hz < cert.best.i_zx - kMiClamp) {
                cert.best = cert.ledger.back();
                cert.found = true;
            }
        }
        for (std::size_t i = 0; i < nx; ++i) {
            if (++digit[i] < k) break;
            digit[i] = 0;
        }
    }
    cert.enumerated = total;
    std::sort(cert.ledger.begin(), cert.ledger.end(), [](const MapScore& a, const MapScore& b) {
        return a.i_zx < b.i_zx || (a.i_zx == b.i_zx && a.index < b.index);
    });
    cert.certified = cert.found;
    for (const auto& e : cert.ledger) {
        if (e.i_zx <= cert.best.i_zx + epsilon) ++cert.epsilon_minimal;
        if (cert.best.i_zx > e.i_zx + epsilon) cert.certified = false;
    }
    return cert;
}

TheoremReport check_theorem_conditions(const DiscreteJoint& joint, const TheoremNames& v) {
    TheoremReport r;
    const double i_xy = mutual_information(joint, {v.x}, {v.y});
    const double i_py = mutual_information(joint, {v.x_prime}, {v.y});
    r.cond_a_slack = i_py - i_xy;
    r.cond_a = std::abs(r.cond_a_slack) <= kSufficiencyTolerance;
    r.epsilon = mutual_information(joint, {v.x_prime}, {v.n});
    r.residual = std::abs(mutual_information(joint, {v.x_prime}, {v.x}) - r.epsilon - i_py);
    r.h_y_given_x = conditional_entropy(joint, {v.y}, {v.x});
    r.assumption_holds = r.h_y_given_x <= kSufficiencyTolerance;
    return r;
}

SymmetryReport check_symmetric_sufficiency(const DiscreteJoint& joint, const std::string& x,
                                           const std::string& x_prime, const std::string& y) {
    SymmetryReport r;
    r.mi_gap = std::abs(mutual_information(joint, {x_prime}, {y}) - mutual_information(joint, {x}, {y}));
    const DiscreteJoint m = joint.marginal({y, x, x_prime});
    const std::size_t ny = m.variables()[0].size, nx = m.variables()[1].size;
    if (nx != m.variables()[2].size) return r;
    const auto& t = m.table();
    r.symmetric = r.equal_marginals = true;
    for (std::size_t j = 0; j < ny; ++j) {
        double pyj = 0.0;
        for (std::size_t f = 0; f < nx * nx; ++f) pyj += t[j * nx * nx + f];
        if (pyj <= 0.0) continue;
        for (std::size_t u = 0; u < nx; ++u) {
            double row = 0.0, col = 0.0;
            for (std::size_t w = 0; w < nx; ++w) {
                const double a = t[(j * nx + u) * nx + w] / pyj, b = t[(j * nx + w) * nx + u] / pyj;
                if (std::abs(a - b) > 1e-12) r.symmetric = false;
                row += a;
                col += b;
            }
            if (std::abs(row - col) > 1e-12) r.equal_marginals = false;
        }
    }
    r.sufficient = r.symmetric && r.equal_marginals && r.mi_gap <= kSufficiencyTolerance;
    return r;
}

DiscreteJoint random_symmetric_joint(std::size_t ny, std::size_t nx, std::mt19937_64& rng) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> py(ny);
    double s = 0.0;
    for (auto& v : py) s += (v = e(rng));
    for (auto& v : py) v /= s;
    std::vector<double> t(nx * nx * ny, 0.0);  // (X, X', Y)
    for (std::size_t j = 0; j < ny; ++j) {
        std::vector<double> a(nx * nx);
        for (auto& v : a) v = e(rng);
        double z = 0.0;
        for (std::size_t u = 0; u < nx; ++u)
            for (std::size_t w = 0; w < nx; ++w) z += a[u * nx + w] + a[w * nx + u];
        for (std::size_t u = 0; u < nx; ++u)
            for (std::size_t w = 0; w < nx; ++w) t[(u * nx + w) * ny + j] = py[j] * (a[u * nx + w] + a[w * nx + u]) / z;
    }
    double total = std::accumulate(t.begin(), t.end(), 0.0);
    for (auto& v : t) v /= total;
    return DiscreteJoint({{"X", nx}, {"X'", nx}, {"Y", ny}}, std::move(t));
}

AdditiveInstance make_additive_instance(std::size_t ny, std::size_t nn, std::mt19937_64& rng) {
    if (ny == 0 || nn == 0) throw std::invalid_argument("additive instance needs non-empty alphabets");
    AdditiveInstance inst;
    std::uniform_int_distribution<std::size_t> pick(0, nn - 1);
    for (std::size_t j = 0; j < ny; ++j) inst.h1.push_back(j * nn);
    for (std::size_t k = 0; k < nn; ++k) inst.h2.push_back(pick(rng));
    std::exponential_distribution<double> e(1.0);
    auto simplex = [&](std::size_t k) {
        std::vector<double> p(k);
        double s = 0.0;
        for (auto& v : p) s += (v = e(rng));
        for (auto& v : p) v /= s;
        return p;
    };
    const auto py = simplex(ny), pn = simplex(nn);
    const std::size_t nx = ny * nn;
    // (X, Y, N, X')
    std::vector<double> t(nx * ny * nn * nx, 0.0);
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t k = 0; k < nn; ++k) {
            const std::size_t xv = inst.h1[j] + inst.h2[k];
            for (std::size_t k2 = 0; k2 < nn; ++k2) {
                const std::size_t xp = inst.h1[j] + inst.h2[k2];
                t[((xv * ny + j) * nn + k) * nx + xp] += py[j] * pn[k] * pn[k2];
            }
        }
    }
    inst.joint = DiscreteJoint({{"X", nx}, {"Y", ny}, {"N", nn}, {"X'", nx}}, std::move(t));

    const DiscreteJoint xy = inst.joint.marginal({"X", "Y"});
    inst.pi.assign(nx, kNoClass);
    for (std::size_t xv = 0; xv < nx; ++xv) {
        for (std::size_t j = 0; j < ny; ++j) {
            if (xy.table()[xv * ny + j] > 0.0) inst.pi[xv] = inst.pi[xv] == kNoClass ? j : kNoClass - 1;
        }
    }
    return inst;
}

bool nuisance_invariant(const AdditiveInstance& inst) {
    for (std::size_t j = 0; j < inst.h1.size(); ++j) {
        for (std::size_t a : inst.h2) {
            for (std::size_t b : inst.h2) {
                const std::size_t x1 = inst.h1[j] + a, x2 = inst.h1[j] + b;
                if (x1 >= inst.pi.size() || x2 >= inst.pi.size()) return false;
                if (inst.pi[x1] == kNoClass || inst.pi[x2] == kNoClass) continue;  // outside the support
                if (inst.pi[x1] != j || inst.pi[x2] != j) return false;
            }
        }
    }
    return true;
}

DiscreteJoint read_joint_text(std::istream& is) {
    std::string line;
    std::vector<Variable> vars;
    std::vector<double> probs;
    bool header = false;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string tok;
        if (!(ls >> tok)) continue;
        if (!header) {
            do {
                std::size_t size = 0;
                if (!(ls >> size)) throw std::invalid_argument("joint header: variable '" + tok + "' lacks a size");
                vars.push_back({tok, size});
            } while (ls >> tok);
            header = true;
            continue;
        }
        std::size_t used = 0;
        double p = 0.0;
        try {
            p = std::stod(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        std::string rest;
        if (used != tok.size() || (ls >> rest)) {
            throw std::invalid_argument("joint table line " + std::to_string(lineno) + ": expected one probability");
        }
        probs.push_back(p);
    }
    if (!header) throw std::invalid_argument("joint table: missing header");
    return DiscreteJoint(std::move(vars), std::move(probs));
}

}  // namespace lpa3
