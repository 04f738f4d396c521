#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "fcil/data.hpp"
#include "fcil/nn.hpp"

namespace fcil {

// Accuracy of the global model at one round, split into previous-class,
// current-class and all-seen-class views. acc_previous is absent while the
// first task is active.
struct AccuracySnapshot {
    int round = 0;
    int task = 0;
    std::optional<double> acc_previous;
    double acc_current = 0.0;
    double acc_all = 0.0;
};

// Per-round traffic and compute cost; communication time is simulated from
// exact byte counts over a configured bandwidth.
struct EfficiencyLedger {
    struct Row {
        std::size_t bytes_up = 0;
        std::size_t bytes_down = 0;
        double compute_seconds = 0.0;
    };
    std::vector<Row> rounds;
    double bandwidth_bytes_per_sec = 1e6;
};

struct AttackResult {
    std::size_t client = 0;
    int round = 0;
    Tensor reconstructed_input;
    Tensor ground_truth;
    double mse = 0.0;
    int iterations_used = 0;
    double final_attack_loss = 0.0;
};

struct TrustReport {
    double utility = 0.0;             // stability/plasticity blend at the final round
    double privacy = 0.0;             // reconstruction-gap score of the leakage channel
    double efficiency_seconds = 0.0;  // per-round communication + compute time
    double lambda = 0.5;
    std::vector<AccuracySnapshot> series;
};

// Top-1 accuracy over the test samples whose label falls in class_filter;
// predictions range over every allocated head row, not just the filter.
double evaluate(const ModelParams& params, std::span<const LabeledSample> test_samples,
                const std::set<int>& class_filter);

// lambda * previous + (1 - lambda) * current.
double continual_utility(double acc_previous, double acc_current, double lambda);

// 1 - 1/(1 + mse): 0 at perfect reconstruction, approaching 1 as the
// reconstruction drifts from the ground truth.
double privacy_score(double mse);

// (tau1 + tau2) / R with tau1 the simulated transmission time of all bytes
// and tau2 the summed compute time.
double efficiency_score(const EfficiencyLedger& ledger, int rounds);

double mean_squared_error(const Tensor& a, const Tensor& b);

struct AttackSettings {
    int iterations = 400;
    double learning_rate = 0.1;
    std::uint64_t seed = 0;
    // Match extractor gradient blocks too; off when the observed update only
    // carries classifier gradients (frozen extractor).
    bool match_extractor_grads = true;
    double init_scale = 1.0;   // dummy input drawn uniform(-s, s)
    double fd_epsilon = 1e-6;  // directional-difference step in parameter space
};

// Gradient-matching inversion: starting from a seeded random dummy input,
// minimize || grads(dummy) - observed ||^2 by gradient descent on the dummy.
// The descent direction is obtained by differencing the network's input
// gradient at parameter-space shifts along the residual direction; steps are
// halved until the attack loss does not increase. Deterministic per seed.
// ground_truth is used only to score the reconstruction.
AttackResult gradient_inversion_attack(const ModelParams& params, const GradientSet& observed,
                                       int label, const AttackSettings& settings,
                                       const Tensor& ground_truth);

// Feature-space inversion of prototype traffic: minimize
// 0.5 * || F(dummy) - target ||^2 with the analytic input gradient. Scores
// the best dummy against a representative real sample of the class.
AttackResult prototype_inversion_attack(const ModelParams& params, const Tensor& target_prototype,
                                        const AttackSettings& settings, const Tensor& ground_truth);

}  // namespace fcil
