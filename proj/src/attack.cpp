#include "lpa3/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>

#include "lpa3/rng.hpp"

namespace lpa3 {

namespace {

std::size_t worker_count() {
    const char* env = std::getenv("LPA3_WORKERS");
    if (env == nullptr) return 1;
    const long n = std::strtol(env, nullptr, 10);
    return n > 1 ? static_cast<std::size_t>(n) : 1;
}

Tensor rows(const Tensor& t, std::size_t begin, std::size_t end) {
    Shape s = t.shape();
    const std::size_t width = t.size() / s[0];
    s[0] = end - begin;
    auto d = t.data();
    return Tensor(s, std::vector<double>(d.begin() + begin * width, d.begin() + end * width));
}

void check_labels(const Network& net, const Tensor& x, std::span<const std::size_t> y) {
    require_batch(net, x);
    if (y.size() != x.dim(0)) throw ShapeError("attack: label count does not match batch size");
    for (auto c : y) {
        if (c >= net.num_classes()) throw std::out_of_range("attack: class index " + std::to_string(c) + " out of range");
    }
}

enum class Kind { Positive, Negative };

constexpr std::size_t kMaxHalvings = 20;

// One attack over a contiguous block of samples.
AttackResult attack_block(const Network& net, const Tensor& x, const Tensor& start, std::span<const std::size_t> y,
                          const AttackParams& params, Kind kind) {
    const std::size_t batch = x.dim(0);
    const std::size_t width = x.size() / batch;
    const std::size_t classes = net.num_classes();

    const Tensor phi_x = embed(net, x, params.perceptual).flat();
    const Tensor p_x = net.predict_proba(x);
    Tensor logp_x = p_x;
    for (auto& v : logp_x.data()) v = std::log(std::max(v, kProbFloor));
    Tensor logp_x_y({batch});
    for (std::size_t b = 0; b < batch; ++b) logp_x_y[b] = logp_x[b * classes + y[b]];

    AttackResult result{start, std::vector<SampleDiagnostics>(batch)};
    Tensor& cur = result.x;
    std::vector<bool> active(batch, true);

    for (std::size_t t = 1; t <= params.steps; ++t) {
        const double lambda = lambda_at(params, t);
        const double gamma = gamma_at(params, t);

        Tape tape;
        Var xp = tape.leaf(cur);
        auto out = net.forward(tape, xp);
        Var lp = lpips(tape.constant(phi_x), embed(out.activations, params.perceptual));
        Var logp = clamped_log_softmax(out.logits);
        Var penalty, objective;
        if (kind == Kind::Positive) {
            Var drop = ops::sub(tape.constant(logp_x_y), ops::pick(logp, y));
            penalty = ops::relu(ops::add_scalar(drop, -params.sigma));
            objective = ops::sub(ops::scale(penalty, lambda), lp);
        } else {
            Var kl = ops::sum_last(ops::mul(ops::softmax(out.logits), ops::sub(logp, tape.constant(logp_x))));
            penalty = ops::relu(ops::add_scalar(ops::neg(kl), params.sigma_neg));
            objective = ops::add(lp, ops::scale(penalty, lambda));
        }
        const Tensor obj_v = objective.value(), lp_v = lp.value(), pen_v = penalty.value();
        tape.backward(ops::sum(objective));
        Tensor dir = tape.grad(xp);

        Tensor probe = cur;
        std::vector<double> norms(batch, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            double n2 = 0.0;
            for (std::size_t i = 0; i < width; ++i) {
                double& d = dir[b * width + i];
                d = -d;
                if (!std::isfinite(d)) {
                    throw NumericError("attack: non-finite gradient for sample " + std::to_string(b) + " at step " +
                                       std::to_string(t));
                }
                n2 += d * d;
            }
            norms[b] = std::sqrt(n2);
            if (norms[b] == 0.0) active[b] = false;
            if (!active[b]) continue;
            for (std::size_t i = 0; i < width; ++i) {
                dir[b * width + i] /= norms[b];
                probe[b * width + i] += params.fd_step * dir[b * width + i];
            }
        }
        const Tensor p_probe = net.predict_proba(probe);

        std::vector<double> steps(batch, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
            IterationRecord rec;
            rec.lambda = lambda;
            rec.gamma = gamma;
            rec.objective = obj_v[b];
            rec.objective_appendix = -obj_v[b];
            rec.lpips = lp_v[b];
            rec.hinge = pen_v[b];
            if (active[b]) {
                const std::size_t c = y[b];
                const double m = (p_x[b * classes + c] - p_probe[b * classes + c]) / params.fd_step;
                rec.slope = m;
                steps[b] = gamma / std::max(std::abs(m), kSlopeFloor);
            }
            result.samples[b].trace.push_back(rec);
        }

        Tensor next = cur;
        auto place = [&](std::size_t b) {
            const Tensor& base = params.literal_update ? x : cur;
            for (std::size_t i = 0; i < width; ++i) {
                const double v = base[b * width + i] + steps[b] * dir[b * width + i];
                next[b * width + i] = std::clamp(v, params.pixel_min, params.pixel_max);
            }
        };
        for (std::size_t b = 0; b < batch; ++b) {
            if (active[b]) place(b);
        }

        if (kind == Kind::Negative) {
            // Backtrack until the penalized objective does not increase.
            std::vector<bool> pending = active;
            for (std::size_t halving = 0;; ++halving) {
                const Tensor lp_next = lpips(net, x, next, params.perceptual);
                const auto kl_next = kl_rows(net.predict_proba(next), p_x);
                bool retry = false;
                for (std::size_t b = 0; b < batch; ++b) {
                    if (!pending[b]) continue;
                    const double value = lp_next[b] + lambda * std::max(0.0, params.sigma_neg - kl_next[b]);
                    if (value <= obj_v[b]) {
                        pending[b] = false;
                    } else if (halving == kMaxHalvings) {
                        steps[b] = 0.0;
                        std::copy_n(cur.data().begin() + b * width, width, next.data().begin() + b * width);
                        pending[b] = false;
                    } else {
                        steps[b] *= 0.5;
                        place(b);
                        retry = true;
                    }
                }
                if (!retry) break;
            }
        }

        for (std::size_t b = 0; b < batch; ++b) {
            if (active[b] && steps[b] > 0.0) ++result.samples[b].iterations;
        }
        cur = std::move(next);
    }

    const Tensor lp_final = lpips(net, x, cur, params.perceptual);
    const Tensor p_final = net.predict_proba(cur);
    std::vector<double> kl;
    if (kind == Kind::Negative) kl = kl_rows(p_final, p_x);
    for (std::size_t b = 0; b < batch; ++b) {
        auto& s = result.samples[b];
        s.lpips = lp_final[b];
        if (kind == Kind::Positive) {
            const double logp = std::log(std::max(p_final[b * classes + y[b]], kProbFloor));
            s.slack = logp - logp_x_y[b] + params.sigma;
        } else {
            s.slack = kl[b] - params.sigma_neg;
        }
        s.satisfied = s.slack >= 0.0;
    }
    return result;
}

AttackResult run_attack(const Network& net, const Tensor& x, std::span<const std::size_t> y,
                        const AttackParams& params, std::uint64_t seed, Kind kind) {
    params.validate();
    for (double v : x.data()) {
        if (!(v >= params.pixel_min && v <= params.pixel_max)) throw std::invalid_argument("attack: input outside pixel bounds");
    }
    const std::size_t batch = x.dim(0);

    // Initial noise is drawn for the whole batch so the split never changes it.
    Tensor start = x;
    auto rng = SeedSequence(seed).stream("attack");
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : start.data()) v = std::clamp(v + params.noise_scale * normal(rng), params.pixel_min, params.pixel_max);

    const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(batch, 1));
    if (workers <= 1) return attack_block(net, x, start, y, params, kind);

    std::vector<AttackResult> parts(workers);
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    const std::size_t chunk = (batch + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = std::min(batch, w * chunk), hi = std::min(batch, lo + chunk);
        if (lo == hi) continue;
        threads.emplace_back([&, w, lo, hi] {
            try {
                parts[w] = attack_block(net, rows(x, lo, hi), rows(start, lo, hi), y.subspan(lo, hi - lo), params, kind);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : threads) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    AttackResult merged{x, {}};
    std::size_t offset = 0;
    for (auto& part : parts) {
        if (part.samples.empty()) continue;
        std::copy(part.x.data().begin(), part.x.data().end(), merged.x.data().begin() + offset);
        offset += part.x.size();
        for (auto& s : part.samples) merged.samples.push_back(std::move(s));
    }
    return merged;
}

}  // namespace

void AttackParams::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("attack params: " + what); };
    if (!(sigma >= 0.0)) fail("sigma must be >= 0");
    if (!(sigma_neg >= 0.0)) fail("sigma_neg must be >= 0");
    if (steps < 1) fail("steps must be >= 1");
    if (!(epsilon > 0.0)) fail("epsilon must be > 0");
    if (!(fd_step > 0.0)) fail("fd_step must be > 0");
    if (!(lambda_min > 0.0) || !(lambda_max >= lambda_min)) fail("need lambda_max >= lambda_min > 0");
    if (!(noise_scale >= 0.0)) fail("noise_scale must be >= 0");
    if (!(epsilon_max >= 0.0)) fail("epsilon_max must be >= 0");
    if (!(eta >= 0.0)) fail("eta must be >= 0");
    if (!(pixel_max > pixel_min)) fail("pixel bounds are empty");
}

double lambda_at(const AttackParams& params, std::size_t t) {
    const double frac = static_cast<double>(t) / static_cast<double>(params.steps);
    return params.lambda_min * std::pow(params.lambda_max / params.lambda_min, frac);
}

double gamma_at(const AttackParams& params, std::size_t t) {
    const double frac = static_cast<double>(t) / static_cast<double>(params.steps);
    return params.epsilon * std::pow(0.1, frac);
}

Var clamped_log_softmax(Var logits) {
    return ops::log(ops::clamp(ops::softmax(logits), kProbFloor, 1.0));
}

Var lagrangian_objective(const Network& net, Tape& tape, const Tensor& x, Var x_prime,
                         std::span<const std::size_t> y, double lambda, double sigma,
                         const PerceptualOptions& perceptual) {
    check_labels(net, x, y);
    if (x_prime.shape() != x.shape()) throw ShapeError("lagrangian_objective: x and x' shapes differ");
    auto ref = net.forward(tape, tape.constant(x));
    auto out = net.forward(tape, x_prime);
    Var lp = lpips(embed(ref.activations, perceptual), embed(out.activations, perceptual));
    Var drop = ops::sub(ops::pick(clamped_log_softmax(ref.logits), y), ops::pick(clamped_log_softmax(out.logits), y));
    Var hinge = ops::relu(ops::add_scalar(drop, -sigma));
    return ops::sub(ops::scale(hinge, lambda), lp);
}

Tensor lagrangian_objective(const Network& net, const Tensor& x, const Tensor& x_prime,
                            std::span<const std::size_t> y, double lambda, double sigma,
                            const PerceptualOptions& perceptual) {
    Tape tape;
    return lagrangian_objective(net, tape, x, tape.constant(x_prime), y, lambda, sigma, perceptual).value();
}

AttackResult fast_lagrangian_attack(const Network& net, const Tensor& x, std::span<const std::size_t> y,
                                    const AttackParams& params, std::uint64_t seed) {
    check_labels(net, x, y);
    return run_attack(net, x, y, params, seed, Kind::Positive);
}

AttackResult negative_attack(const Network& net, const Tensor& x, const AttackParams& params, std::uint64_t seed) {
    require_batch(net, x);
    const Tensor p = net.predict_proba(x);
    const std::size_t classes = net.num_classes();
    std::vector<std::size_t> y(x.dim(0));
    for (std::size_t b = 0; b < y.size(); ++b) {
        auto row = p.data().subspan(b * classes, classes);
        y[b] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return run_attack(net, x, y, params, seed, Kind::Negative);
}

std::vector<double> kl_rows(const Tensor& p, const Tensor& q) {
    if (p.shape() != q.shape() || p.rank() != 2) throw ShapeError("kl_rows: need two (B, C) tensors of equal shape");
    const std::size_t batch = p.dim(0), classes = p.dim(1);
    std::vector<double> out(batch, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        double s = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double pv = p[b * classes + c];
            if (pv <= 0.0) continue;
            s += pv * (std::log(std::max(pv, kProbFloor)) - std::log(std::max(q[b * classes + c], kProbFloor)));
        }
        out[b] = s;
    }
    return out;
}

Tensor sharpen(const Tensor& logits, const Sharpening& sharpening) {
    if (logits.rank() != 2) throw ShapeError("sharpen: logits must be (B, C)");
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    Tensor out(logits.shape(), 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = logits.data().subspan(b * classes, classes);
        if (sharpening.temperature == 0.0) {
            out[b * classes + static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())] = 1.0;
            continue;
        }
        const double m = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp((row[c] - m) / sharpening.temperature);
        for (std::size_t c = 0; c < classes; ++c) out[b * classes + c] = std::exp((row[c] - m) / sharpening.temperature) / z;
    }
    return out;
}

AdaptiveEpsResult adaptive_epsilon_step(const Network& net, const Tensor& x, const Tensor& weak_aug_x,
                                        std::span<const AdaptiveEpsState> states, double sigma, double eta,
                                        double epsilon_max, const AttackParams& params,
                                        const Sharpening& sharpening) {
    require_batch(net, x);
    if (weak_aug_x.shape() != x.shape()) throw ShapeError("adaptive_epsilon_step: x and s(x) shapes differ");
    const std::size_t batch = x.dim(0), width = x.size() / batch;
    if (states.size() != batch) throw ShapeError("adaptive_epsilon_step: one state per sample required");
    if (!(sigma >= 0.0) || !(eta >= 0.0) || !(epsilon_max >= 0.0)) {
        throw std::invalid_argument("adaptive_epsilon_step: sigma, eta and epsilon_max must be >= 0");
    }
    for (const auto& s : states) {
        if (!(s.epsilon >= 0.0 && s.epsilon <= epsilon_max)) {
            throw std::invalid_argument("adaptive_epsilon_step: epsilon_i outside [0, epsilon_max]");
        }
    }

    Tape tape;
    Var phi_x = tape.constant(embed(net, x, params.perceptual).flat());
    Var s = tape.leaf(weak_aug_x);
    tape.backward(ops::sum(lpips(phi_x, embed(net, tape, s, params.perceptual))));
    const Tensor g = tape.grad(s);

    AdaptiveEpsResult result{weak_aug_x, {states.begin(), states.end()}, {}};
    for (std::size_t b = 0; b < batch; ++b) {
        const double e = states[b].epsilon;
        if (e == 0.0) continue;
        for (std::size_t i = 0; i < width; ++i) {
            const double gi = g[b * width + i];
            if (!std::isfinite(gi)) throw NumericError("adaptive_epsilon_step: non-finite gradient");
            const double sign = gi > 0.0 ? 1.0 : (gi < 0.0 ? -1.0 : 0.0);
            double& v = result.x_prime[b * width + i];
            v = std::clamp(v + e * sign, params.pixel_min, params.pixel_max);
        }
    }

    result.kl = kl_rows(sharpen(net.logits(result.x_prime), sharpening), sharpen(net.logits(x), sharpening));
    for (std::size_t b = 0; b < batch; ++b) {
        double& e = result.states[b].epsilon;
        e += result.kl[b] <= sigma ? eta : -eta;
        e = std::clamp(e, 0.0, epsilon_max);
    }
    return result;
}

}  // namespace lpa3
