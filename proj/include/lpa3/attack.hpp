#pragma once

// Augmentation generators: the label-preserving hard positive x' (fast
// Lagrangian attack), the perceptually close negative x'' and the
// adaptive-epsilon signed-gradient variant.

#include <cstdint>
#include <vector>

#include "lpa3/perceptual.hpp"

namespace lpa3 {

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kSlopeFloor = 1e-3;

struct AttackParams {
    double sigma = 0.02;      // allowed drop of log F[y], nats
    double sigma_neg = 0.5;   // required KL shift for negatives, nats
    std::size_t steps = 5;
    double epsilon = 0.01;    // step scale: gamma_t = epsilon * 0.1^(t/T)
    double noise_scale = 0.01;
    double fd_step = 1.0;     // probe length h along the unit direction
    double lambda_min = 1.0;
    double lambda_max = 10.0;
    double pixel_min = 0.0;
    double pixel_max = 1.0;
    double eta = 0.01;
    double epsilon_max = 0.1;
    // x' <- x + (gamma/m) d instead of x' <- x' + (gamma/m) d.
    bool literal_update = false;
    PerceptualOptions perceptual;

    // Throws std::invalid_argument on out-of-range fields.
    void validate() const;
};

// lambda_t = lambda_min * (lambda_max/lambda_min)^(t/T), t = 1..T.
double lambda_at(const AttackParams& params, std::size_t t);
double gamma_at(const AttackParams& params, std::size_t t);

struct IterationRecord {
    double lambda = 0.0;
    double gamma = 0.0;
    double objective = 0.0;           // -lpips + lambda * hinge (minimized)
    double objective_appendix = 0.0;  // lpips - lambda * hinge
    double lpips = 0.0;
    double hinge = 0.0;
    double slope = 0.0;               // probe m before flooring
};

struct SampleDiagnostics {
    double lpips = 0.0;  // at the returned point
    // Positive attack: log F(x')[y] - log F(x)[y] + sigma.
    // Negative attack: KL(F(x'')||F(x)) - sigma_neg.
    double slack = 0.0;
    bool satisfied = false;
    std::size_t iterations = 0;  // updates applied
    std::vector<IterationRecord> trace;
};

struct AttackResult {
    Tensor x;  // same shape as the input batch
    std::vector<SampleDiagnostics> samples;
};

// Per-sample objective (B): -lpips(x, x') + lambda * max(0, log F(x)[y] - log F(x')[y] - sigma).
Var lagrangian_objective(const Network& net, Tape& tape, const Tensor& x, Var x_prime,
                         std::span<const std::size_t> y, double lambda, double sigma,
                         const PerceptualOptions& perceptual = {});
Tensor lagrangian_objective(const Network& net, const Tensor& x, const Tensor& x_prime,
                            std::span<const std::size_t> y, double lambda, double sigma,
                            const PerceptualOptions& perceptual = {});

// Log-probabilities with the 1e-12 floor, (B, C).
Var clamped_log_softmax(Var logits);

// Samples are independent; LPA3_WORKERS > 1 splits the batch across threads
// and the result does not depend on the split.
AttackResult fast_lagrangian_attack(const Network& net, const Tensor& x, std::span<const std::size_t> y,
                                    const AttackParams& params, std::uint64_t seed);

// min lpips(x, x'') + lambda * max(0, sigma_neg - KL(F(x'')||F(x))).
AttackResult negative_attack(const Network& net, const Tensor& x, const AttackParams& params, std::uint64_t seed);

// KL(p||q) per row with the probability floor; p, q are (B, C).
std::vector<double> kl_rows(const Tensor& p, const Tensor& q);

// Sharpening applied before the adaptive-epsilon KL test. temperature == 0
// gives the one-hot argmax; otherwise softmax(logits / temperature).
struct Sharpening {
    double temperature = 0.0;
};
Tensor sharpen(const Tensor& logits, const Sharpening& sharpening);

struct AdaptiveEpsState {
    std::uint64_t id = 0;
    double epsilon = 0.0;
};

struct AdaptiveEpsResult {
    Tensor x_prime;
    std::vector<AdaptiveEpsState> states;
    std::vector<double> kl;
};

// x' = s(x) + eps_i * sign(grad_delta lpips(x, s(x) + delta)); eps_i moves by
// +eta when KL(sharp F(x') || sharp F(x)) <= sigma, by -eta otherwise, and is
// clamped to [0, epsilon_max].
AdaptiveEpsResult adaptive_epsilon_step(const Network& net, const Tensor& x, const Tensor& weak_aug_x,
                                        std::span<const AdaptiveEpsState> states, double sigma, double eta,
                                        double epsilon_max, const AttackParams& params = {},
                                        const Sharpening& sharpening = {});

}  // namespace lpa3
