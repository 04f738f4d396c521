#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fcil/data.hpp"
#include "fcil/nn.hpp"
#include "fcil/prototypes.hpp"

namespace fcil {

// How the geometric base class of a feature translation is picked among the
// current task's classes: most cosine-similar prototype (nearest in angle)
// or least similar (kept for comparison runs).
enum class BaseClassRule { MaxSimilarity, MinSimilarity };

struct ClientState {
    std::size_t client_id = 0;
    ModelParams params;
    PrototypeList prototypes;
    std::vector<int> seen_classes;  // sorted, classes of completed rounds
    int current_task = 0;
};

struct ClientUpdate {
    ModelParams params;
    PrototypeList prototypes;       // current-task classes only; may be empty
    std::size_t num_samples = 0;
    std::size_t bytes_uploaded = 0;
};

// Per-class mean feature vector of the given samples under the current
// extractor. Classes absent from the samples are simply absent.
PrototypeList compute_prototypes(const ModelParams& params,
                                 std::span<const LabeledSample> samples, int task_index);

// a.b / (|a| |b|), clamped into [-1, 1]. Zero vectors have no direction.
double cosine_relation(const Tensor& a, const Tensor& b);

// The candidate class whose prototype scores best under the rule; ties break
// to the smallest class id.
int select_base_class(const Tensor& prev_prototype, const PrototypeList& new_prototypes,
                      BaseClassRule rule);

// Pseudo features of a previous class: every row of real base-class features
// shifted by (mu_previous - mu_base). A pure translation, so within-class
// geometry is preserved exactly.
Tensor translate_features(const Tensor& real_base_features, const Tensor& mu_base,
                          const Tensor& mu_previous);

struct TrainOptions {
    int epochs = 1;
    double learning_rate = 0.1;
    std::size_t batch_size = 32;
    // Pseudo features generated per previous class and epoch: < 0 follows the
    // per-class size of the real current-task data (capped at the base
    // class's sample count), 0 disables replay.
    int pseudo_per_class = -1;
    bool enable_translation = true;   // off for the no-feature-translation ablation
    bool track_prototypes = true;     // off for plain federated averaging
    bool accept_global_prototypes = true;  // off for the no-fusion ablation
    bool upload_prototypes = true;         // off when the server does not fuse
    bool train_extractor = false;     // true while the extractor is still learning
    BaseClassRule base_rule = BaseClassRule::MaxSimilarity;
    std::uint64_t rng_seed = 0;
};

struct LocalRoundResult {
    ClientState state;
    ClientUpdate update;
};

// One communication round on one client: take over the distributed global
// prototypes, translate previous classes into pseudo features, train the
// local model on real + pseudo data, refresh prototypes, and package the
// upload with exact byte counts.
LocalRoundResult local_train_round(ClientState state, std::span<const LabeledSample> task_samples,
                                   const PrototypeList& global_prototypes,
                                   const TrainOptions& options);

}  // namespace fcil
