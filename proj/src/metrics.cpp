#include "fcil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "fcil/errors.hpp"
#include "fcil/rng.hpp"

namespace fcil {

double evaluate(const ModelParams& params, std::span<const LabeledSample> test_samples,
                const std::set<int>& class_filter) {
    if (class_filter.empty()) {
        throw ArgumentError("evaluate: empty class filter");
    }
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < test_samples.size(); ++i) {
        if (class_filter.count(test_samples[i].label) > 0) {
            kept.push_back(i);
        }
    }
    if (kept.empty()) {
        throw ArgumentError("evaluate: no test samples match the class filter");
    }
    const std::size_t dim = test_samples[kept.front()].features.size();
    Tensor batch({kept.size(), dim});
    for (std::size_t r = 0; r < kept.size(); ++r) {
        for (std::size_t j = 0; j < dim; ++j) {
            batch(r, j) = test_samples[kept[r]].features(j);
        }
    }
    const Tensor logits = forward_logits(params, forward_features(params, batch));
    std::size_t correct = 0;
    for (std::size_t r = 0; r < kept.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits(r, c) > logits(r, best)) {
                best = c;
            }
        }
        if (static_cast<int>(best) == test_samples[kept[r]].label) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(kept.size());
}

double continual_utility(double acc_previous, double acc_current, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ArgumentError("continual_utility: lambda must be in [0, 1]");
    }
    if (!(acc_previous >= 0.0 && acc_previous <= 1.0) ||
        !(acc_current >= 0.0 && acc_current <= 1.0)) {
        throw ArgumentError("continual_utility: accuracies must be in [0, 1]");
    }
    return lambda * acc_previous + (1.0 - lambda) * acc_current;
}

double privacy_score(double mse) {
    if (!(mse >= 0.0)) {
        throw ArgumentError("privacy_score: mse must be >= 0");
    }
    return 1.0 - 1.0 / (1.0 + mse);
}

double efficiency_score(const EfficiencyLedger& ledger, int rounds) {
    if (rounds < 1) {
        throw ArgumentError("efficiency_score: rounds must be >= 1");
    }
    if (ledger.rounds.size() != static_cast<std::size_t>(rounds)) {
        throw ArgumentError("efficiency_score: ledger covers " +
                            std::to_string(ledger.rounds.size()) + " rounds, expected " +
                            std::to_string(rounds));
    }
    if (!(ledger.bandwidth_bytes_per_sec > 0.0)) {
        throw ArgumentError("efficiency_score: bandwidth must be > 0");
    }
    std::size_t total_bytes = 0;
    double compute = 0.0;
    for (const EfficiencyLedger::Row& row : ledger.rounds) {
        total_bytes += row.bytes_up + row.bytes_down;
        compute += row.compute_seconds;
    }
    const double tau1 = static_cast<double>(total_bytes) / ledger.bandwidth_bytes_per_sec;
    return (tau1 + compute) / static_cast<double>(rounds);
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("mean_squared_error: shapes " + shape_string(a) + " vs " +
                             shape_string(b));
    }
    if (a.size() == 0) {
        throw ArgumentError("mean_squared_error: empty tensors");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

namespace {

// Shared descent loop: starts from a seeded dummy, takes gradient steps with
// halve-on-increase backtracking, tracks the best iterate. loss_of and
// grad_of evaluate the attack objective and its input-space gradient.
struct DescentResult {
    Tensor best;
    double best_loss = 0.0;
    int iterations = 0;
};

DescentResult descend(Tensor dummy, int iterations, double initial_step,
                      const std::function<double(const Tensor&)>& loss_of,
                      const std::function<Tensor(const Tensor&)>& grad_of) {
    DescentResult result;
    double loss = loss_of(dummy);
    if (!std::isfinite(loss)) {
        throw NumericError("attack: non-finite loss at iteration 0");
    }
    result.best = dummy;
    result.best_loss = loss;
    double step = initial_step;
    for (int iter = 0; iter < iterations; ++iter) {
        if (loss == 0.0) {
            break;
        }
        const Tensor grad = grad_of(dummy);
        double grad_norm2 = 0.0;
        for (double g : grad.data()) {
            grad_norm2 += g * g;
        }
        if (!(grad_norm2 > 0.0)) {
            break;  // stationary
        }
        bool accepted = false;
        for (int halving = 0; halving < 40; ++halving) {
            Tensor candidate = dummy;
            for (std::size_t i = 0; i < candidate.data().size(); ++i) {
                candidate.data()[i] -= step * grad.data()[i];
            }
            const double candidate_loss = loss_of(candidate);
            if (!std::isfinite(candidate_loss)) {
                throw NumericError("attack: non-finite loss at iteration " +
                                   std::to_string(iter + 1));
            }
            if (candidate_loss <= loss) {
                dummy = std::move(candidate);
                loss = candidate_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        result.iterations = iter + 1;
        if (!accepted) {
            break;  // step underflow, nothing left to gain
        }
        if (loss < result.best_loss) {
            result.best = dummy;
            result.best_loss = loss;
        }
        step *= 1.25;  // recover step size after successful moves
    }
    return result;
}

Tensor seeded_dummy(std::size_t dim, double scale, std::uint64_t seed) {
    Rng rng(seed);
    Tensor dummy({1, dim});
    for (double& v : dummy.data()) {
        v = rng.uniform(-scale, scale);
    }
    return dummy;
}

double block_residual_norm2(const ParamBlock& a, const ParamBlock& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.weights.data().size(); ++i) {
        const double d = a.weights.data()[i] - b.weights.data()[i];
        acc += d * d;
    }
    for (std::size_t i = 0; i < a.bias.data().size(); ++i) {
        const double d = a.bias.data()[i] - b.bias.data()[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace

AttackResult gradient_inversion_attack(const ModelParams& params, const GradientSet& observed,
                                       int label, const AttackSettings& settings,
                                       const Tensor& ground_truth) {
    params.validate();
    ground_truth.require_rank(1, "gradient_inversion_attack: ground truth");
    const std::size_t dim = params.input_dim();
    if (ground_truth.size() != dim) {
        throw DimensionError("gradient_inversion_attack: ground truth width " +
                             std::to_string(ground_truth.size()) +
                             " does not match network input width " + std::to_string(dim));
    }
    if (settings.iterations < 0 || !(settings.learning_rate > 0.0)) {
        throw ArgumentError("gradient_inversion_attack: need iterations >= 0 and learning_rate > 0");
    }
    const bool match_extractor = settings.match_extractor_grads && !params.extractor.empty();
    if (match_extractor && observed.extractor.size() != params.extractor.size()) {
        throw DimensionError("gradient_inversion_attack: observed extractor gradients do not match");
    }
    const std::vector<int> labels{label};

    auto grads_of = [&](const Tensor& dummy) {
        return loss_and_grads(params, dummy, labels, true, false).grads;
    };
    auto attack_loss = [&](const Tensor& dummy) {
        const GradientSet g = grads_of(dummy);
        double acc = block_residual_norm2(g.classifier, observed.classifier);
        if (match_extractor) {
            for (std::size_t i = 0; i < g.extractor.size(); ++i) {
                acc += block_residual_norm2(g.extractor[i], observed.extractor[i]);
            }
        }
        return acc;
    };

    // d(attack loss)/d(dummy) = d/d(dummy) <2 * residual, grads(dummy)>.
    // The inner product against a fixed parameter direction v equals the
    // derivative of the loss along v, so its input gradient is recovered by
    // central-differencing the network's input gradient at params +- eps*v.
    auto attack_grad = [&](const Tensor& dummy) {
        const GradientSet g = grads_of(dummy);
        GradientSet residual = g;
        auto subtract = [](ParamBlock& r, const ParamBlock& o) {
            for (std::size_t i = 0; i < r.weights.data().size(); ++i) {
                r.weights.data()[i] -= o.weights.data()[i];
            }
            for (std::size_t i = 0; i < r.bias.data().size(); ++i) {
                r.bias.data()[i] -= o.bias.data()[i];
            }
        };
        subtract(residual.classifier, observed.classifier);
        double norm2 = 0.0;
        for (double v : residual.classifier.weights.data()) {
            norm2 += v * v;
        }
        for (double v : residual.classifier.bias.data()) {
            norm2 += v * v;
        }
        if (match_extractor) {
            for (std::size_t i = 0; i < residual.extractor.size(); ++i) {
                subtract(residual.extractor[i], observed.extractor[i]);
                for (double v : residual.extractor[i].weights.data()) {
                    norm2 += v * v;
                }
                for (double v : residual.extractor[i].bias.data()) {
                    norm2 += v * v;
                }
            }
        }
        const double norm = std::sqrt(norm2);
        if (!(norm > 0.0)) {
            return Tensor({1, dim});
        }

        const double eps = settings.fd_epsilon;
        auto shifted = [&](double sign) {
            ModelParams shifted_params = params;
            auto add_block = [&](ParamBlock& p, const ParamBlock& r) {
                for (std::size_t i = 0; i < p.weights.data().size(); ++i) {
                    p.weights.data()[i] += sign * eps * r.weights.data()[i] / norm;
                }
                for (std::size_t i = 0; i < p.bias.data().size(); ++i) {
                    p.bias.data()[i] += sign * eps * r.bias.data()[i] / norm;
                }
            };
            add_block(shifted_params.classifier, residual.classifier);
            if (match_extractor) {
                for (std::size_t i = 0; i < shifted_params.extractor.size(); ++i) {
                    add_block(shifted_params.extractor[i], residual.extractor[i]);
                }
            }
            return loss_and_grads(shifted_params, dummy, labels, true, true)
                .grads.input_gradient.value();
        };
        const Tensor plus = shifted(1.0);
        const Tensor minus = shifted(-1.0);
        Tensor grad({1, dim});
        for (std::size_t j = 0; j < dim; ++j) {
            grad(0, j) = 2.0 * norm * (plus(0, j) - minus(0, j)) / (2.0 * eps);
        }
        return grad;
    };

    const DescentResult run =
        descend(seeded_dummy(dim, settings.init_scale, settings.seed), settings.iterations,
                settings.learning_rate, attack_loss, attack_grad);

    AttackResult result;
    result.reconstructed_input = run.best.row(0);
    result.ground_truth = ground_truth;
    result.mse = mean_squared_error(result.reconstructed_input, ground_truth);
    result.iterations_used = run.iterations;
    result.final_attack_loss = run.best_loss;
    return result;
}

AttackResult prototype_inversion_attack(const ModelParams& params, const Tensor& target_prototype,
                                        const AttackSettings& settings, const Tensor& ground_truth) {
    params.validate();
    target_prototype.require_rank(1, "prototype_inversion_attack: target");
    ground_truth.require_rank(1, "prototype_inversion_attack: ground truth");
    if (target_prototype.size() != params.feature_dim()) {
        throw DimensionError("prototype_inversion_attack: target width " +
                             std::to_string(target_prototype.size()) +
                             " does not match feature width " +
                             std::to_string(params.feature_dim()));
    }
    const std::size_t dim = params.input_dim();
    if (ground_truth.size() != dim) {
        throw DimensionError("prototype_inversion_attack: ground truth width " +
                             std::to_string(ground_truth.size()) +
                             " does not match network input width " + std::to_string(dim));
    }
    if (settings.iterations < 0 || !(settings.learning_rate > 0.0)) {
        throw ArgumentError("prototype_inversion_attack: need iterations >= 0 and learning_rate > 0");
    }

    auto loss_of = [&](const Tensor& dummy) {
        const Tensor f = forward_features(params, dummy);
        double acc = 0.0;
        for (std::size_t j = 0; j < f.cols(); ++j) {
            const double d = f(0, j) - target_prototype(j);
            acc += d * d;
        }
        return 0.5 * acc;
    };
    auto grad_of = [&](const Tensor& dummy) {
        const Tensor f = forward_features(params, dummy);
        Tensor cot({1, f.cols()});
        for (std::size_t j = 0; j < f.cols(); ++j) {
            cot(0, j) = f(0, j) - target_prototype(j);
        }
        return extractor_input_gradient(params, dummy, cot);
    };

    const DescentResult run =
        descend(seeded_dummy(dim, settings.init_scale, settings.seed), settings.iterations,
                settings.learning_rate, loss_of, grad_of);

    AttackResult result;
    result.reconstructed_input = run.best.row(0);
    result.ground_truth = ground_truth;
    result.mse = mean_squared_error(result.reconstructed_input, ground_truth);
    result.iterations_used = run.iterations;
    result.final_attack_loss = run.best_loss;
    return result;
}

}  // namespace fcil
