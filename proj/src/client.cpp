#include "fcil/client.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>

#include "fcil/errors.hpp"
#include "fcil/rng.hpp"

namespace fcil {

namespace {

Tensor stack_features(std::span<const LabeledSample> samples) {
    if (samples.empty()) {
        throw ArgumentError("stack: empty sample list");
    }
    const std::size_t dim = samples.front().features.size();
    Tensor batch({samples.size(), dim});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].features.size() != dim) {
            throw DimensionError("stack: mixed sample widths");
        }
        for (std::size_t j = 0; j < dim; ++j) {
            batch(i, j) = samples[i].features(j);
        }
    }
    return batch;
}

void scale_block(ParamBlock& block, double s) {
    for (double& v : block.weights.data()) {
        v *= s;
    }
    for (double& v : block.bias.data()) {
        v *= s;
    }
}

void add_scaled_block(ParamBlock& acc, const ParamBlock& in, double s) {
    for (std::size_t i = 0; i < acc.weights.data().size(); ++i) {
        acc.weights.data()[i] += s * in.weights.data()[i];
    }
    for (std::size_t i = 0; i < acc.bias.data().size(); ++i) {
        acc.bias.data()[i] += s * in.bias.data()[i];
    }
}

}  // namespace

PrototypeList compute_prototypes(const ModelParams& params,
                                 std::span<const LabeledSample> samples, int task_index) {
    if (samples.empty()) {
        throw ArgumentError("compute_prototypes: empty sample list");
    }
    const Tensor features = forward_features(params, stack_features(samples));
    const std::size_t dim = features.cols();

    std::map<int, std::pair<Tensor, std::size_t>> sums;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto [it, inserted] = sums.try_emplace(samples[i].label, Tensor({dim}), 0);
        for (std::size_t j = 0; j < dim; ++j) {
            it->second.first(j) += features(i, j);
        }
        it->second.second += 1;
    }

    PrototypeList list;
    for (auto& [class_id, sum_count] : sums) {
        Tensor mean = std::move(sum_count.first);
        for (double& v : mean.data()) {
            v /= static_cast<double>(sum_count.second);
        }
        list.upsert(PrototypeEntry{class_id, std::move(mean), sum_count.second, task_index});
    }
    return list;
}

double cosine_relation(const Tensor& a, const Tensor& b) {
    a.require_rank(1, "cosine_relation: a");
    b.require_rank(1, "cosine_relation: b");
    if (a.size() != b.size()) {
        throw DimensionError("cosine_relation: lengths " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a(i) * b(i);
        na += a(i) * a(i);
        nb += b(i) * b(i);
    }
    if (!(na > 0.0) || !(nb > 0.0)) {
        throw NumericError("cosine_relation: zero vector has no direction");
    }
    const double value = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::clamp(value, -1.0, 1.0);
}

int select_base_class(const Tensor& prev_prototype, const PrototypeList& new_prototypes,
                      BaseClassRule rule) {
    if (new_prototypes.empty()) {
        throw ArgumentError("select_base_class: no candidate prototypes");
    }
    int best_id = -1;
    double best_score = 0.0;
    for (const auto& [class_id, entry] : new_prototypes.entries()) {
        const double score = cosine_relation(prev_prototype, entry.prototype);
        const bool better = best_id < 0 || (rule == BaseClassRule::MaxSimilarity
                                                ? score > best_score
                                                : score < best_score);
        if (better) {
            best_id = class_id;
            best_score = score;
        }
    }
    return best_id;
}

Tensor translate_features(const Tensor& real_base_features, const Tensor& mu_base,
                          const Tensor& mu_previous) {
    real_base_features.require_rank(2, "translate_features: features");
    mu_base.require_rank(1, "translate_features: mu_base");
    mu_previous.require_rank(1, "translate_features: mu_previous");
    const std::size_t dim = real_base_features.cols();
    if (mu_base.size() != dim || mu_previous.size() != dim) {
        throw DimensionError("translate_features: prototype width does not match feature width " +
                             std::to_string(dim));
    }
    Tensor out({real_base_features.rows(), dim});
    for (std::size_t i = 0; i < real_base_features.rows(); ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
            out(i, j) = real_base_features(i, j) + mu_previous(j) - mu_base(j);
        }
    }
    out.require_finite("translate_features");
    return out;
}

LocalRoundResult local_train_round(ClientState state, std::span<const LabeledSample> task_samples,
                                   const PrototypeList& global_prototypes,
                                   const TrainOptions& options) {
    if (task_samples.empty()) {
        throw ArgumentError("local_train_round: empty task");
    }
    if (options.epochs < 1 || options.batch_size < 1) {
        throw ArgumentError("local_train_round: epochs and batch_size must be >= 1");
    }
    const int t = state.current_task;
    Rng rng(options.rng_seed);

    std::set<int> current_classes;
    for (const LabeledSample& s : task_samples) {
        current_classes.insert(s.label);
    }
    for (int c : current_classes) {
        if (c < 0 || static_cast<std::size_t>(c) >= state.params.num_classes()) {
            throw LabelError("local_train_round: class " + std::to_string(c) +
                             " outside the classifier head of " +
                             std::to_string(state.params.num_classes()) + " rows");
        }
    }

    // Incoming global knowledge replaces local entries before anything else.
    if (options.track_prototypes && options.accept_global_prototypes) {
        state.prototypes.merge_from(global_prototypes);
    }

    // Previous classes eligible for replay: everything with a stored
    // prototype that is not part of the current task. Classes this client
    // has learned must have one; losing a prototype is a bookkeeping bug.
    std::vector<int> replay_classes;
    std::map<int, int> base_of;
    PrototypeList fresh_prototypes;
    const bool replay_active = options.enable_translation && t > 1;
    if (replay_active) {
        for (int c : state.seen_classes) {
            if (current_classes.count(c) == 0 && !state.prototypes.contains(c)) {
                throw InvariantError("local_train_round: previous class " + std::to_string(c) +
                                     " has no stored prototype");
            }
        }
        for (int c : state.prototypes.class_ids()) {
            if (current_classes.count(c) == 0) {
                replay_classes.push_back(c);
            }
        }
    }
    if (replay_active && !replay_classes.empty()) {
        // Prototypes of the current task under the frozen extractor, needed
        // as translation bases before training starts.
        fresh_prototypes = compute_prototypes(state.params, task_samples, t);
        for (int p : replay_classes) {
            base_of[p] = select_base_class(state.prototypes.at(p).prototype, fresh_prototypes,
                                           options.base_rule);
        }
    }

    // Real data, grouped once. With a frozen extractor the features are
    // fixed for the whole round.
    const Tensor raw_batch = stack_features(task_samples);
    std::vector<int> real_labels(task_samples.size());
    for (std::size_t i = 0; i < task_samples.size(); ++i) {
        real_labels[i] = task_samples[i].label;
    }
    const Tensor real_features = forward_features(state.params, raw_batch);
    std::map<int, std::vector<std::size_t>> rows_of_class;
    for (std::size_t i = 0; i < real_labels.size(); ++i) {
        rows_of_class[real_labels[i]].push_back(i);
    }
    const std::size_t real_per_class_avg =
        std::max<std::size_t>(1, (task_samples.size() + current_classes.size() - 1) /
                                     current_classes.size());

    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        // Pseudo features are rebuilt from scratch every epoch.
        std::vector<std::size_t> pseudo_src_rows;
        std::vector<int> pseudo_labels;
        for (int p : replay_classes) {
            const std::vector<std::size_t>& base_rows = rows_of_class.at(base_of.at(p));
            std::size_t want = options.pseudo_per_class < 0
                                   ? real_per_class_avg
                                   : static_cast<std::size_t>(options.pseudo_per_class);
            want = std::min(want, base_rows.size());
            if (want == 0) {
                continue;
            }
            if (want == base_rows.size()) {
                for (std::size_t r : base_rows) {
                    pseudo_src_rows.push_back(r);
                    pseudo_labels.push_back(p);
                }
            } else {
                for (std::size_t pick : rng.choose(base_rows.size(), want)) {
                    pseudo_src_rows.push_back(base_rows[pick]);
                    pseudo_labels.push_back(p);
                }
            }
        }
        Tensor pseudo_features({pseudo_labels.size(), state.params.feature_dim()});
        if (!pseudo_labels.empty()) {
            // Translate row by row: each pseudo row is its source row plus
            // (mu_previous - mu_base) for its class pair.
            const Tensor& feats = options.train_extractor
                                      ? forward_features(state.params, raw_batch)
                                      : real_features;
            for (std::size_t i = 0; i < pseudo_labels.size(); ++i) {
                const int p = pseudo_labels[i];
                const Tensor& mu_prev = state.prototypes.at(p).prototype;
                const Tensor& mu_base = fresh_prototypes.at(base_of.at(p)).prototype;
                for (std::size_t j = 0; j < pseudo_features.cols(); ++j) {
                    pseudo_features(i, j) =
                        feats(pseudo_src_rows[i], j) + mu_prev(j) - mu_base(j);
                }
            }
        }
        for (int p : pseudo_labels) {
            if (static_cast<std::size_t>(p) >= state.params.num_classes()) {
                throw InvariantError("local_train_round: pseudo class " + std::to_string(p) +
                                     " outside the classifier head");
            }
        }

        // Mini-batch SGD over the shuffled union of real and pseudo rows.
        // Indices below num_real refer to real samples, the rest to pseudo.
        const std::size_t num_real = task_samples.size();
        std::vector<std::size_t> pool(num_real + pseudo_labels.size());
        for (std::size_t i = 0; i < pool.size(); ++i) {
            pool[i] = i;
        }
        rng.shuffle(pool);

        for (std::size_t start = 0; start < pool.size(); start += options.batch_size) {
            const std::size_t end = std::min(pool.size(), start + options.batch_size);
            std::vector<std::size_t> real_idx;
            std::vector<std::size_t> pseudo_idx;
            for (std::size_t i = start; i < end; ++i) {
                if (pool[i] < num_real) {
                    real_idx.push_back(pool[i]);
                } else {
                    pseudo_idx.push_back(pool[i] - num_real);
                }
            }

            if (!options.train_extractor) {
                // Head-only step: real and pseudo rows share the feature path.
                Tensor batch({real_idx.size() + pseudo_idx.size(), state.params.feature_dim()});
                std::vector<int> labels;
                labels.reserve(real_idx.size() + pseudo_idx.size());
                std::size_t row = 0;
                for (std::size_t i : real_idx) {
                    for (std::size_t j = 0; j < batch.cols(); ++j) {
                        batch(row, j) = real_features(i, j);
                    }
                    labels.push_back(real_labels[i]);
                    ++row;
                }
                for (std::size_t i : pseudo_idx) {
                    for (std::size_t j = 0; j < batch.cols(); ++j) {
                        batch(row, j) = pseudo_features(i, j);
                    }
                    labels.push_back(pseudo_labels[i]);
                    ++row;
                }
                const LossGrads lg = loss_and_grads(state.params, batch, labels, false, false);
                state.params = apply_sgd(state.params, lg.grads, options.learning_rate);
                continue;
            }

            // Extractor training: real rows flow end to end, pseudo rows are
            // feature-space constants entering the head only. Gradients are
            // combined as the batch-size-weighted mean of the two parts.
            GradientSet combined;
            double real_weight =
                static_cast<double>(real_idx.size()) / static_cast<double>(real_idx.size() + pseudo_idx.size());
            bool have_combined = false;
            if (!real_idx.empty()) {
                Tensor batch({real_idx.size(), raw_batch.cols()});
                std::vector<int> labels;
                labels.reserve(real_idx.size());
                for (std::size_t r = 0; r < real_idx.size(); ++r) {
                    for (std::size_t j = 0; j < raw_batch.cols(); ++j) {
                        batch(r, j) = raw_batch(real_idx[r], j);
                    }
                    labels.push_back(real_labels[real_idx[r]]);
                }
                combined = loss_and_grads(state.params, batch, labels, true, false).grads;
                for (ParamBlock& g : combined.extractor) {
                    scale_block(g, real_weight);
                }
                scale_block(combined.classifier, real_weight);
                have_combined = true;
            }
            if (!pseudo_idx.empty()) {
                Tensor batch({pseudo_idx.size(), state.params.feature_dim()});
                std::vector<int> labels;
                labels.reserve(pseudo_idx.size());
                for (std::size_t r = 0; r < pseudo_idx.size(); ++r) {
                    for (std::size_t j = 0; j < batch.cols(); ++j) {
                        batch(r, j) = pseudo_features(pseudo_idx[r], j);
                    }
                    labels.push_back(pseudo_labels[pseudo_idx[r]]);
                }
                const GradientSet head =
                    loss_and_grads(state.params, batch, labels, false, false).grads;
                if (!have_combined) {
                    combined = head;
                    scale_block(combined.classifier, 1.0 - real_weight);
                } else {
                    add_scaled_block(combined.classifier, head.classifier, 1.0 - real_weight);
                }
            }
            state.params = apply_sgd(state.params, combined, options.learning_rate);
        }
    }

    // Refresh prototypes from the post-training extractor; for a frozen
    // extractor this reproduces the pre-training values bit-exactly.
    PrototypeList upload;
    if (options.track_prototypes) {
        upload = compute_prototypes(state.params, task_samples, t);
        state.prototypes.merge_from(upload);
    }

    for (int c : current_classes) {
        if (!std::binary_search(state.seen_classes.begin(), state.seen_classes.end(), c)) {
            state.seen_classes.insert(
                std::upper_bound(state.seen_classes.begin(), state.seen_classes.end(), c), c);
        }
    }

    ClientUpdate update;
    update.params = state.params;
    update.num_samples = task_samples.size();
    if (options.upload_prototypes && options.track_prototypes) {
        update.prototypes = upload;
    }
    update.bytes_uploaded =
        serialize_params(update.params).size() + prototype_wire_bytes(update.prototypes);

    return LocalRoundResult{std::move(state), std::move(update)};
}

}  // namespace fcil
