#include "fcil/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "fcil/errors.hpp"
#include "fcil/rng.hpp"
#include "fcil/wire.hpp"

namespace fcil {

namespace {

// y = x * W^T + b for a (batch, in) matrix against an (out, in) layer.
Tensor affine(const Tensor& x, const ParamBlock& layer, const std::string& where) {
    const std::size_t out_dim = layer.weights.rows();
    const std::size_t in_dim = layer.weights.cols();
    if (x.rank() != 2 || x.cols() != in_dim) {
        throw DimensionError(where + ": input " + shape_string(x) + " does not match layer (" +
                             std::to_string(out_dim) + ", " + std::to_string(in_dim) + ")");
    }
    if (layer.bias.rank() != 1 || layer.bias.size() != out_dim) {
        throw DimensionError(where + ": bias length " + std::to_string(layer.bias.size()) +
                             " does not match " + std::to_string(out_dim) + " outputs");
    }
    const std::size_t batch = x.rows();
    Tensor y({batch, out_dim});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = layer.bias(o);
            for (std::size_t j = 0; j < in_dim; ++j) {
                acc += x(b, j) * layer.weights(o, j);
            }
            y(b, o) = acc;
        }
    }
    return y;
}

Tensor relu(Tensor t) {
    for (double& v : t.data()) {
        v = v > 0.0 ? v : 0.0;
    }
    return t;
}

// Forward pass through the extractor keeping post-activation values of every
// layer. activations[0] is the input, activations[i] the output of layer i-1.
// With the max(0, .) convention an activation is positive iff its
// pre-activation was, so the stored values double as the backward mask.
std::vector<Tensor> extractor_forward_tape(const ModelParams& params, const Tensor& batch) {
    std::vector<Tensor> activations;
    activations.reserve(params.extractor.size() + 1);
    activations.push_back(batch);
    for (std::size_t i = 0; i < params.extractor.size(); ++i) {
        activations.push_back(relu(affine(activations.back(), params.extractor[i],
                                          "extractor layer " + std::to_string(i))));
    }
    return activations;
}

ParamBlock zeros_like(const ParamBlock& p) {
    return ParamBlock{Tensor::zeros(p.weights.shape()), Tensor::zeros(p.bias.shape())};
}

// d(loss)/d(layer input) given d(loss)/d(layer output); optionally also
// accumulates the layer's parameter gradients.
Tensor affine_backward(const Tensor& input, const ParamBlock& layer, const Tensor& d_out,
                       ParamBlock* d_layer) {
    const std::size_t batch = input.rows();
    const std::size_t out_dim = layer.weights.rows();
    const std::size_t in_dim = layer.weights.cols();
    if (d_layer != nullptr) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            double bias_acc = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                bias_acc += d_out(b, o);
            }
            d_layer->bias(o) = bias_acc;
            for (std::size_t j = 0; j < in_dim; ++j) {
                double acc = 0.0;
                for (std::size_t b = 0; b < batch; ++b) {
                    acc += d_out(b, o) * input(b, j);
                }
                d_layer->weights(o, j) = acc;
            }
        }
    }
    Tensor d_in({batch, in_dim});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < in_dim; ++j) {
            double acc = 0.0;
            for (std::size_t o = 0; o < out_dim; ++o) {
                acc += d_out(b, o) * layer.weights(o, j);
            }
            d_in(b, j) = acc;
        }
    }
    return d_in;
}

void mask_by_activation(Tensor& d, const Tensor& activation) {
    for (std::size_t i = 0; i < d.data().size(); ++i) {
        if (!(activation.data()[i] > 0.0)) {
            d.data()[i] = 0.0;
        }
    }
}

void require_congruent(const ParamBlock& p, const ParamBlock& g, const std::string& where) {
    if (!p.weights.same_shape(g.weights) || !p.bias.same_shape(g.bias)) {
        throw DimensionError(where + ": gradient shape does not match parameters");
    }
}

}  // namespace

void ModelParams::validate() const {
    std::size_t width = input_dim();
    for (std::size_t i = 0; i < extractor.size(); ++i) {
        const ParamBlock& layer = extractor[i];
        layer.weights.require_rank(2, "extractor layer " + std::to_string(i) + " weights");
        layer.bias.require_rank(1, "extractor layer " + std::to_string(i) + " bias");
        if (layer.weights.cols() != width) {
            throw DimensionError("extractor layer " + std::to_string(i) + ": expects input width " +
                                 std::to_string(layer.weights.cols()) + " but receives " +
                                 std::to_string(width));
        }
        if (layer.bias.size() != layer.weights.rows()) {
            throw DimensionError("extractor layer " + std::to_string(i) + ": bias/weight row mismatch");
        }
        width = layer.weights.rows();
    }
    classifier.weights.require_rank(2, "classifier weights");
    classifier.bias.require_rank(1, "classifier bias");
    if (classifier.weights.cols() != width) {
        throw DimensionError("classifier: expects feature width " +
                             std::to_string(classifier.weights.cols()) + " but extractor yields " +
                             std::to_string(width));
    }
    if (classifier.bias.size() != classifier.weights.rows()) {
        throw DimensionError("classifier: bias/weight row mismatch");
    }
}

ModelParams make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden_dims,
                     std::size_t feature_dim, std::size_t num_classes, std::uint64_t seed) {
    if (input_dim == 0 || feature_dim == 0 || num_classes == 0) {
        throw ArgumentError("make_mlp: dimensions must be >= 1");
    }
    for (std::size_t h : hidden_dims) {
        if (h == 0) {
            throw ArgumentError("make_mlp: hidden widths must be >= 1");
        }
    }
    Rng rng(seed);
    auto init_layer = [&rng](std::size_t out_dim, std::size_t in_dim) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
        ParamBlock layer{Tensor({out_dim, in_dim}), Tensor({out_dim})};
        for (double& w : layer.weights.data()) {
            w = rng.uniform(-scale, scale);
        }
        return layer;
    };
    ModelParams params;
    std::size_t width = input_dim;
    for (std::size_t h : hidden_dims) {
        params.extractor.push_back(init_layer(h, width));
        width = h;
    }
    params.extractor.push_back(init_layer(feature_dim, width));
    params.classifier = init_layer(num_classes, feature_dim);
    params.validate();
    return params;
}

Tensor forward_features(const ModelParams& params, const Tensor& batch) {
    params.validate();
    batch.require_rank(2, "forward_features: batch");
    if (params.extractor.empty()) {
        if (batch.cols() != params.feature_dim()) {
            throw DimensionError("forward_features: batch width " + std::to_string(batch.cols()) +
                                 " does not match feature width " +
                                 std::to_string(params.feature_dim()));
        }
        batch.require_finite("forward_features");
        return batch;
    }
    Tensor out = extractor_forward_tape(params, batch).back();
    out.require_finite("forward_features");
    return out;
}

Tensor forward_logits(const ModelParams& params, const Tensor& features) {
    params.validate();
    features.require_rank(2, "forward_logits: features");
    Tensor logits = affine(features, params.classifier, "classifier");
    logits.require_finite("forward_logits");
    return logits;
}

LossGrads loss_and_grads(const ModelParams& params, const Tensor& batch,
                         const std::vector<int>& labels, bool train_extractor,
                         bool want_input_grad) {
    params.validate();
    batch.require_rank(2, "loss_and_grads: batch");
    const std::size_t n = batch.rows();
    if (n == 0 || labels.empty()) {
        throw ArgumentError("loss_and_grads: empty batch");
    }
    if (labels.size() != n) {
        throw DimensionError("loss_and_grads: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " rows");
    }
    const std::size_t num_classes = params.num_classes();
    for (int label : labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
            throw LabelError("loss_and_grads: label " + std::to_string(label) +
                             " outside [0, " + std::to_string(num_classes) + ")");
        }
    }

    std::vector<Tensor> tape;
    Tensor features;
    if (train_extractor) {
        if (batch.cols() != params.input_dim()) {
            throw DimensionError("loss_and_grads: raw batch width " + std::to_string(batch.cols()) +
                                 " does not match network input width " +
                                 std::to_string(params.input_dim()));
        }
        tape = extractor_forward_tape(params, batch);
        features = tape.back();
    } else {
        if (batch.cols() != params.feature_dim()) {
            throw DimensionError("loss_and_grads: feature batch width " +
                                 std::to_string(batch.cols()) + " does not match feature width " +
                                 std::to_string(params.feature_dim()));
        }
        features = batch;
    }

    const Tensor logits = affine(features, params.classifier, "classifier");
    logits.require_finite("loss_and_grads: logits");

    // Mean cross-entropy via a stable log-sum-exp; d_logits = (softmax - onehot)/n.
    double loss = 0.0;
    Tensor d_logits({n, num_classes});
    for (std::size_t b = 0; b < n; ++b) {
        double max_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < num_classes; ++c) {
            max_logit = std::max(max_logit, logits(b, c));
        }
        double sum_exp = 0.0;
        for (std::size_t c = 0; c < num_classes; ++c) {
            sum_exp += std::exp(logits(b, c) - max_logit);
        }
        const double log_sum = max_logit + std::log(sum_exp);
        loss += log_sum - logits(b, static_cast<std::size_t>(labels[b]));
        for (std::size_t c = 0; c < num_classes; ++c) {
            const double p = std::exp(logits(b, c) - max_logit) / sum_exp;
            d_logits(b, c) = (p - (static_cast<std::size_t>(labels[b]) == c ? 1.0 : 0.0)) /
                             static_cast<double>(n);
        }
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) {
        throw NumericError("loss_and_grads: non-finite loss");
    }

    LossGrads result;
    result.loss = loss;
    result.grads.classifier = zeros_like(params.classifier);
    Tensor d_features =
        affine_backward(features, params.classifier, d_logits, &result.grads.classifier);

    result.grads.extractor.reserve(params.extractor.size());
    for (const ParamBlock& layer : params.extractor) {
        result.grads.extractor.push_back(zeros_like(layer));
    }

    if (train_extractor) {
        Tensor d = std::move(d_features);
        for (std::size_t i = params.extractor.size(); i-- > 0;) {
            mask_by_activation(d, tape[i + 1]);
            d = affine_backward(tape[i], params.extractor[i], d, &result.grads.extractor[i]);
        }
        if (want_input_grad) {
            result.grads.input_gradient = std::move(d);
        }
    } else if (want_input_grad) {
        result.grads.input_gradient = std::move(d_features);
    }

    result.grads.classifier.weights.require_finite("loss_and_grads: classifier gradient");
    for (const ParamBlock& g : result.grads.extractor) {
        g.weights.require_finite("loss_and_grads: extractor gradient");
    }
    if (result.grads.input_gradient) {
        result.grads.input_gradient->require_finite("loss_and_grads: input gradient");
    }
    return result;
}

ModelParams apply_sgd(const ModelParams& params, const GradientSet& grads, double lr) {
    if (lr < 0.0 || !std::isfinite(lr)) {
        throw ArgumentError("apply_sgd: learning rate must be finite and >= 0");
    }
    if (grads.extractor.size() != params.extractor.size()) {
        throw DimensionError("apply_sgd: gradient has " + std::to_string(grads.extractor.size()) +
                             " extractor layers, parameters have " +
                             std::to_string(params.extractor.size()));
    }
    auto step_block = [lr](const ParamBlock& p, const ParamBlock& g, const std::string& where) {
        require_congruent(p, g, where);
        if (!g.weights.all_finite() || !g.bias.all_finite()) {
            throw NumericError(where + ": non-finite gradient");
        }
        ParamBlock out = p;
        for (std::size_t i = 0; i < out.weights.data().size(); ++i) {
            out.weights.data()[i] -= lr * g.weights.data()[i];
        }
        for (std::size_t i = 0; i < out.bias.data().size(); ++i) {
            out.bias.data()[i] -= lr * g.bias.data()[i];
        }
        return out;
    };
    ModelParams next;
    next.extractor.reserve(params.extractor.size());
    for (std::size_t i = 0; i < params.extractor.size(); ++i) {
        next.extractor.push_back(step_block(params.extractor[i], grads.extractor[i],
                                            "apply_sgd: extractor layer " + std::to_string(i)));
    }
    next.classifier = step_block(params.classifier, grads.classifier, "apply_sgd: classifier");
    return next;
}

ModelParams average_params_weighted(std::span<const ModelParams> models,
                                    std::span<const double> weights) {
    if (models.empty()) {
        throw ArgumentError("average_params: empty model list");
    }
    if (weights.size() != models.size()) {
        throw ArgumentError("average_params: " + std::to_string(weights.size()) + " weights for " +
                            std::to_string(models.size()) + " models");
    }
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw ArgumentError("average_params: weights must be finite and >= 0");
        }
        total += w;
    }
    if (!(total > 0.0)) {
        throw ArgumentError("average_params: weights sum to zero");
    }

    const ModelParams& first = models.front();
    for (std::size_t m = 1; m < models.size(); ++m) {
        if (models[m].extractor.size() != first.extractor.size()) {
            throw DimensionError("average_params: model " + std::to_string(m) +
                                 " has a different extractor depth");
        }
        for (std::size_t i = 0; i < first.extractor.size(); ++i) {
            require_congruent(first.extractor[i], models[m].extractor[i],
                              "average_params: extractor layer " + std::to_string(i));
        }
        require_congruent(first.classifier, models[m].classifier, "average_params: classifier");
    }

    // A convex combination of identical inputs is that input; returning it
    // directly keeps the mean bit-exact in that case.
    bool all_same = true;
    for (std::size_t m = 1; m < models.size() && all_same; ++m) {
        all_same = models[m] == first;
    }
    if (all_same) {
        return first;
    }

    // Per slot: collect the weighted contributions, sort, then run a
    // compensated sum. Sorting pins the summation order to the value set,
    // making the mean invariant to the order the models arrive in.
    std::vector<double> normalized(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
        normalized[m] = weights[m] / total;
    }
    std::vector<double> contributions(models.size());
    auto mean_slot = [&](auto slot_of) {
        for (std::size_t m = 0; m < models.size(); ++m) {
            contributions[m] = normalized[m] * slot_of(models[m]);
        }
        std::sort(contributions.begin(), contributions.end());
        double sum = 0.0;
        double compensation = 0.0;
        for (double value : contributions) {
            const double t = sum + value;
            if (std::abs(sum) >= std::abs(value)) {
                compensation += (sum - t) + value;
            } else {
                compensation += (value - t) + sum;
            }
            sum = t;
        }
        return sum + compensation;
    };

    ModelParams mean;
    mean.extractor.reserve(first.extractor.size());
    for (std::size_t l = 0; l < first.extractor.size(); ++l) {
        ParamBlock block = zeros_like(first.extractor[l]);
        for (std::size_t i = 0; i < block.weights.data().size(); ++i) {
            block.weights.data()[i] =
                mean_slot([&](const ModelParams& m) { return m.extractor[l].weights.data()[i]; });
        }
        for (std::size_t i = 0; i < block.bias.data().size(); ++i) {
            block.bias.data()[i] =
                mean_slot([&](const ModelParams& m) { return m.extractor[l].bias.data()[i]; });
        }
        mean.extractor.push_back(std::move(block));
    }
    mean.classifier = zeros_like(first.classifier);
    for (std::size_t i = 0; i < mean.classifier.weights.data().size(); ++i) {
        mean.classifier.weights.data()[i] =
            mean_slot([&](const ModelParams& m) { return m.classifier.weights.data()[i]; });
    }
    for (std::size_t i = 0; i < mean.classifier.bias.data().size(); ++i) {
        mean.classifier.bias.data()[i] =
            mean_slot([&](const ModelParams& m) { return m.classifier.bias.data()[i]; });
    }
    mean.classifier.weights.require_finite("average_params");
    return mean;
}

ModelParams average_params(std::span<const ModelParams> models) {
    std::vector<double> uniform(models.size(), 1.0);
    return average_params_weighted(models, uniform);
}

std::vector<std::uint8_t> serialize_params(const ModelParams& params) {
    params.validate();
    std::vector<std::uint8_t> out;
    wire::put_u32(out, static_cast<std::uint32_t>(params.extractor.size()));
    for (const ParamBlock& layer : params.extractor) {
        wire::put_u32(out, static_cast<std::uint32_t>(layer.weights.rows()));
        wire::put_u32(out, static_cast<std::uint32_t>(layer.weights.cols()));
    }
    wire::put_u32(out, static_cast<std::uint32_t>(params.classifier.weights.rows()));
    wire::put_u32(out, static_cast<std::uint32_t>(params.classifier.weights.cols()));
    auto put_block = [&out](const ParamBlock& layer) {
        for (double v : layer.weights.data()) {
            wire::put_f64(out, v);
        }
        for (double v : layer.bias.data()) {
            wire::put_f64(out, v);
        }
    };
    for (const ParamBlock& layer : params.extractor) {
        put_block(layer);
    }
    put_block(params.classifier);
    return out;
}

ModelParams deserialize_params(std::span<const std::uint8_t> bytes) {
    wire::Reader reader(bytes);
    constexpr std::uint32_t dim_cap = 1u << 20;

    const std::uint32_t layer_count = reader.u32("params header");
    if (layer_count > dim_cap) {
        reader.fail("params header: implausible layer count " + std::to_string(layer_count));
    }
    std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
    shapes.reserve(layer_count + 1);
    for (std::uint32_t i = 0; i <= layer_count; ++i) {
        const std::uint32_t out_dim = reader.u32("params shape");
        const std::uint32_t in_dim = reader.u32("params shape");
        if (out_dim == 0 || in_dim == 0 || out_dim > dim_cap || in_dim > dim_cap) {
            reader.fail("params shape: invalid dimensions " + std::to_string(out_dim) + "x" +
                        std::to_string(in_dim));
        }
        shapes.emplace_back(out_dim, in_dim);
    }

    auto read_block = [&reader](std::uint32_t out_dim, std::uint32_t in_dim) {
        ParamBlock layer{Tensor({out_dim, in_dim}), Tensor({out_dim})};
        for (double& v : layer.weights.data()) {
            const std::size_t at = reader.offset();
            v = reader.f64("params payload");
            if (!std::isfinite(v)) {
                throw FormatError("params payload: non-finite value at byte offset " +
                                  std::to_string(at));
            }
        }
        for (double& v : layer.bias.data()) {
            const std::size_t at = reader.offset();
            v = reader.f64("params payload");
            if (!std::isfinite(v)) {
                throw FormatError("params payload: non-finite value at byte offset " +
                                  std::to_string(at));
            }
        }
        return layer;
    };

    ModelParams params;
    params.extractor.reserve(layer_count);
    for (std::uint32_t i = 0; i < layer_count; ++i) {
        params.extractor.push_back(read_block(shapes[i].first, shapes[i].second));
    }
    params.classifier = read_block(shapes[layer_count].first, shapes[layer_count].second);
    reader.expect_end("params");
    try {
        params.validate();
    } catch (const DimensionError& e) {
        throw FormatError(std::string("params: inconsistent shapes (") + e.what() +
                          ") at byte offset " + std::to_string(reader.offset()));
    }
    return params;
}

ModelParams grow_classifier(const ModelParams& params, std::size_t new_num_classes,
                            double init_scale, std::uint64_t rng_seed) {
    params.validate();
    const std::size_t current = params.num_classes();
    if (new_num_classes < current) {
        throw ArgumentError("grow_classifier: cannot shrink head from " + std::to_string(current) +
                            " to " + std::to_string(new_num_classes) + " classes");
    }
    if (init_scale < 0.0 || !std::isfinite(init_scale)) {
        throw ArgumentError("grow_classifier: init_scale must be finite and >= 0");
    }
    if (new_num_classes == current) {
        return params;
    }
    const std::size_t width = params.feature_dim();
    ModelParams grown = params;
    grown.classifier.weights = Tensor({new_num_classes, width});
    grown.classifier.bias = Tensor({new_num_classes});
    for (std::size_t r = 0; r < current; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
            grown.classifier.weights(r, c) = params.classifier.weights(r, c);
        }
        grown.classifier.bias(r) = params.classifier.bias(r);
    }
    if (init_scale > 0.0) {
        Rng rng(rng_seed);
        for (std::size_t r = current; r < new_num_classes; ++r) {
            for (std::size_t c = 0; c < width; ++c) {
                grown.classifier.weights(r, c) = rng.uniform(-init_scale, init_scale);
            }
        }
    }
    return grown;
}

Tensor extractor_input_gradient(const ModelParams& params, const Tensor& input,
                                const Tensor& cotangent) {
    params.validate();
    input.require_rank(2, "extractor_input_gradient: input");
    cotangent.require_rank(2, "extractor_input_gradient: cotangent");
    if (cotangent.rows() != input.rows() || cotangent.cols() != params.feature_dim()) {
        throw DimensionError("extractor_input_gradient: cotangent " + shape_string(cotangent) +
                             " does not match (batch, feature_dim)");
    }
    if (params.extractor.empty()) {
        return cotangent;
    }
    if (input.cols() != params.input_dim()) {
        throw DimensionError("extractor_input_gradient: input width " +
                             std::to_string(input.cols()) + " does not match network input width " +
                             std::to_string(params.input_dim()));
    }
    const std::vector<Tensor> tape = extractor_forward_tape(params, input);
    Tensor d = cotangent;
    for (std::size_t i = params.extractor.size(); i-- > 0;) {
        mask_by_activation(d, tape[i + 1]);
        d = affine_backward(tape[i], params.extractor[i], d, nullptr);
    }
    d.require_finite("extractor_input_gradient");
    return d;
}

}  // namespace fcil
