#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fcil/client.hpp"
#include "fcil/data.hpp"

namespace fcil {

// The four runnable methods: the full algorithm, its two ablations, and
// plain federated averaging.
enum class Variant { FedProK, NoFeatureTranslation, NoKnowledgeFusion, FedAvg };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Seeds for each randomized component, derived from the master seed unless
// overridden. Keeping them separate lets one component change without
// disturbing the streams of the others.
struct ComponentSeeds {
    std::optional<std::uint64_t> dataset;
    std::optional<std::uint64_t> partition;
    std::optional<std::uint64_t> model_init;
    std::optional<std::uint64_t> training;
    std::optional<std::uint64_t> attack;
};

struct AttackConfig {
    int iterations = 400;
    double learning_rate = 0.25;
    std::size_t samples = 2;  // samples attacked when building the trust report
};

// Complete identity of one experiment. Everything a run does is a pure
// function of this struct.
struct ExperimentConfig {
    DatasetSpec dataset;          // dataset.seed is derived; see resolved_* below
    PartitionConfig partition;
    int rounds = 1;
    int local_epochs = 1;
    double learning_rate = 0.1;
    std::size_t batch_size = 32;
    int pseudo_per_class = -1;    // <0: follow real per-class counts; 0: none
    double beta = 0.5;            // temporal fusion blend
    double lambda = 0.5;          // stability/plasticity blend
    Variant variant = Variant::FedProK;
    bool freeze_extractor = true;  // train the extractor on the first task only
    BaseClassRule base_class_rule = BaseClassRule::MaxSimilarity;
    bool sample_weighted_fedavg = false;
    double bandwidth_bytes_per_sec = 1e6;
    std::vector<std::size_t> hidden_dims{32};
    std::size_t feature_dim = 16;
    std::uint64_t seed = 0;       // master seed
    ComponentSeeds component_seeds;
    AttackConfig attack;

    std::uint64_t resolved_dataset_seed() const;
    std::uint64_t resolved_partition_seed() const;
    std::uint64_t resolved_model_init_seed() const;
    std::uint64_t resolved_training_seed() const;
    std::uint64_t resolved_attack_seed() const;

    // Cross-module validation; everything a run needs must hold before it
    // starts.
    void validate() const;
};

// Strict JSON codec: unknown keys are rejected at every level so a config
// file is always the complete experiment identity.
ExperimentConfig parse_config_json(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);

}  // namespace fcil
