#pragma once

// Test-side oracles: deliberately plain, scalar-loop reimplementations of
// the arithmetic under test. They share no code with the library paths they
// check beyond the public data types.

#include <cmath>
#include <cstddef>
#include <map>
#include <vector>

#include "fcil/nn.hpp"
#include "fcil/rng.hpp"

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const fcil::Tensor& t) {
    Rows rows(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i) {
        for (std::size_t j = 0; j < t.cols(); ++j) {
            rows[i][j] = t(i, j);
        }
    }
    return rows;
}

// Affine + rectification chain, one element at a time.
inline Rows forward_features(const fcil::ModelParams& params, const Rows& batch) {
    Rows current = batch;
    for (const fcil::ParamBlock& layer : params.extractor) {
        Rows next(current.size(), std::vector<double>(layer.weights.rows()));
        for (std::size_t b = 0; b < current.size(); ++b) {
            for (std::size_t o = 0; o < layer.weights.rows(); ++o) {
                double acc = layer.bias(o);
                for (std::size_t j = 0; j < layer.weights.cols(); ++j) {
                    acc += current[b][j] * layer.weights(o, j);
                }
                next[b][o] = acc > 0.0 ? acc : 0.0;
            }
        }
        current = next;
    }
    return current;
}

inline Rows forward_logits(const fcil::ModelParams& params, const Rows& features) {
    Rows logits(features.size(), std::vector<double>(params.classifier.weights.rows()));
    for (std::size_t b = 0; b < features.size(); ++b) {
        for (std::size_t o = 0; o < params.classifier.weights.rows(); ++o) {
            double acc = params.classifier.bias(o);
            for (std::size_t j = 0; j < params.classifier.weights.cols(); ++j) {
                acc += features[b][j] * params.classifier.weights(o, j);
            }
            logits[b][o] = acc;
        }
    }
    return logits;
}

// Elementwise mean of parameter sets.
inline fcil::ModelParams mean_params(const std::vector<fcil::ModelParams>& models) {
    fcil::ModelParams mean = models.front();
    auto mean_block = [&models](auto getter) {
        fcil::ParamBlock acc = getter(models.front());
        for (double& v : acc.weights.data()) {
            v = 0.0;
        }
        for (double& v : acc.bias.data()) {
            v = 0.0;
        }
        for (const fcil::ModelParams& m : models) {
            const fcil::ParamBlock& block = getter(m);
            for (std::size_t i = 0; i < acc.weights.data().size(); ++i) {
                acc.weights.data()[i] += block.weights.data()[i];
            }
            for (std::size_t i = 0; i < acc.bias.data().size(); ++i) {
                acc.bias.data()[i] += block.bias.data()[i];
            }
        }
        const double n = static_cast<double>(models.size());
        for (double& v : acc.weights.data()) {
            v /= n;
        }
        for (double& v : acc.bias.data()) {
            v /= n;
        }
        return acc;
    };
    for (std::size_t layer = 0; layer < mean.extractor.size(); ++layer) {
        mean.extractor[layer] =
            mean_block([layer](const fcil::ModelParams& m) { return m.extractor[layer]; });
    }
    mean.classifier = mean_block([](const fcil::ModelParams& m) { return m.classifier; });
    return mean;
}

// Per-class mean of feature rows.
inline std::map<int, std::vector<double>> class_means(const Rows& features,
                                                      const std::vector<int>& labels) {
    std::map<int, std::vector<double>> sums;
    std::map<int, std::size_t> counts;
    for (std::size_t i = 0; i < features.size(); ++i) {
        auto& sum = sums[labels[i]];
        if (sum.empty()) {
            sum.assign(features[i].size(), 0.0);
        }
        for (std::size_t j = 0; j < features[i].size(); ++j) {
            sum[j] += features[i][j];
        }
        counts[labels[i]] += 1;
    }
    for (auto& [label, sum] : sums) {
        for (double& v : sum) {
            v /= static_cast<double>(counts[label]);
        }
    }
    return sums;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Central finite difference of a scalar function of one mutable double.
template <typename LossFn>
double central_difference(double& slot, double h, LossFn loss) {
    const double saved = slot;
    slot = saved + h;
    const double up = loss();
    slot = saved - h;
    const double down = loss();
    slot = saved;
    return (up - down) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Smallest |pre-activation| across the extractor for a given batch; used to
// keep finite-difference probes away from rectifier kinks.
inline double min_preactivation_margin(const fcil::ModelParams& params, const fcil::Tensor& batch) {
    Rows current = to_rows(batch);
    double margin = 1e300;
    for (const fcil::ParamBlock& layer : params.extractor) {
        Rows next(current.size(), std::vector<double>(layer.weights.rows()));
        for (std::size_t b = 0; b < current.size(); ++b) {
            for (std::size_t o = 0; o < layer.weights.rows(); ++o) {
                double acc = layer.bias(o);
                for (std::size_t j = 0; j < layer.weights.cols(); ++j) {
                    acc += current[b][j] * layer.weights(o, j);
                }
                margin = std::min(margin, std::abs(acc));
                next[b][o] = acc > 0.0 ? acc : 0.0;
            }
        }
        current = next;
    }
    return margin;
}

}  // namespace oracle
