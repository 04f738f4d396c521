#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fcil/tensor.hpp"

namespace fcil {

// A single affine layer: weights (out, in) row-major plus bias (out).
struct ParamBlock {
    Tensor weights;
    Tensor bias;

    friend bool operator==(const ParamBlock&, const ParamBlock&) = default;
};

// Two-part network: feature extractor (rectified-linear MLP, possibly empty
// in which case inputs already are features) and a linear classifier head.
// Value object; every operation below returns fresh instances.
struct ModelParams {
    std::vector<ParamBlock> extractor;
    ParamBlock classifier;

    std::size_t num_classes() const { return classifier.weights.rows(); }
    std::size_t feature_dim() const { return classifier.weights.cols(); }
    std::size_t input_dim() const {
        return extractor.empty() ? feature_dim() : extractor.front().weights.cols();
    }

    // Checks layer chaining and the classifier/extractor seam.
    void validate() const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Shape-congruent with the ModelParams it was computed from. The optional
// input gradient is the derivative of the loss w.r.t. the batch passed in.
struct GradientSet {
    std::vector<ParamBlock> extractor;
    ParamBlock classifier;
    std::optional<Tensor> input_gradient;
};

// Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.
ModelParams make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                     std::size_t feature_dim, std::size_t num_classes, std::uint64_t seed);

// Rectified-linear activation after every extractor layer. An empty
// extractor returns the batch unchanged.
Tensor forward_features(const ModelParams& params, const Tensor& batch);

// Linear head on a (batch, feature_dim) matrix; shared entry point for real
// features and translated pseudo features.
Tensor forward_logits(const ModelParams& params, const Tensor& features);

struct LossGrads {
    double loss = 0.0;
    GradientSet grads;
};

// Mean softmax cross-entropy with analytically derived gradients.
// train_extractor=true treats `batch` as raw inputs and backpropagates
// through the whole network; train_extractor=false treats `batch` as
// features, trains the head only and zero-fills extractor gradients.
// want_input_grad attaches d(loss)/d(batch).
LossGrads loss_and_grads(const ModelParams& params, const Tensor& batch,
                         const std::vector<int>& labels, bool train_extractor,
                         bool want_input_grad);

// p' = p - lr * g, elementwise. lr must be >= 0.
ModelParams apply_sgd(const ModelParams& params, const GradientSet& grads, double lr);

// Unweighted elementwise mean; all entries must be shape-congruent.
ModelParams average_params(std::span<const ModelParams> models);

// Convex combination with explicit weights (normalized internally).
ModelParams average_params_weighted(std::span<const ModelParams> models,
                                    std::span<const double> weights);

// Wire format, little-endian throughout:
//   u32 extractor layer count
//   per extractor layer: u32 out_dim, u32 in_dim
//   u32 classifier out_dim (num_classes), u32 classifier in_dim (feature_dim)
//   f64 payload: per extractor layer weights row-major then bias;
//                classifier weights row-major then bias.
std::vector<std::uint8_t> serialize_params(const ModelParams& params);
ModelParams deserialize_params(std::span<const std::uint8_t> bytes);

// Extends the head to new_num_classes rows. Existing rows and biases are
// preserved bit-exactly; new rows are seeded uniform(-init_scale, init_scale)
// with zero biases. init_scale == 0 draws nothing from the generator.
ModelParams grow_classifier(const ModelParams& params, std::size_t new_num_classes,
                            double init_scale, std::uint64_t rng_seed);

// Vector-Jacobian product of the extractor: gradient of
// sum(cotangent * F(input)) w.r.t. input. Backs feature-space inversion.
Tensor extractor_input_gradient(const ModelParams& params, const Tensor& input,
                                const Tensor& cotangent);

}  // namespace fcil
