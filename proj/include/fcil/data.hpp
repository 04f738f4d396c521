#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fcil/tensor.hpp"

namespace fcil {

struct LabeledSample {
    Tensor features;  // rank 1, input_dim
    int label = 0;

    friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

// Synthetic Gaussian-cluster data: one seeded random center per class,
// samples are center plus isotropic noise. A desk-scale, fully
// deterministic stand-in for image benchmarks.
struct DatasetSpec {
    std::size_t num_classes = 0;
    std::size_t input_dim = 0;
    std::size_t train_per_class = 0;
    std::size_t test_per_class = 0;
    double class_center_scale = 1.0;
    double within_class_stddev = 0.1;
    std::uint64_t seed = 0;

    void validate() const;

    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct Dataset {
    std::vector<LabeledSample> train;
    std::vector<LabeledSample> test;
    Tensor class_centers;  // (num_classes, input_dim)

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset generate_dataset(const DatasetSpec& spec);

enum class PartitionMode { Synchronous, Asynchronous };

// Heterogeneity control: synchronous mode skews per-class sample shares by
// a Dirichlet(alpha) draw; asynchronous mode splits the label space into
// classes common to all clients and pools unique to one client, governed by
// the consensus rate gamma.
struct PartitionConfig {
    PartitionMode mode = PartitionMode::Synchronous;
    double alpha = 1.0;   // synchronous only, > 0
    double gamma = 1.0;   // asynchronous only, in [0, 1]
    std::size_t num_clients = 2;
    std::size_t num_tasks = 1;
    std::uint64_t seed = 0;

    void validate(std::size_t num_classes) const;
};

std::vector<std::vector<LabeledSample>> partition_synchronous(
    const std::vector<LabeledSample>& train, const PartitionConfig& cfg, std::size_t num_classes);

std::vector<std::vector<LabeledSample>> partition_asynchronous(
    const std::vector<LabeledSample>& train, const PartitionConfig& cfg, std::size_t num_classes);

// The deterministic common/unique class split behind asynchronous mode;
// exposed so stream construction and tests agree with the partition.
struct AsyncClassSplit {
    std::vector<int> common;                   // seeded order
    std::vector<std::vector<int>> unique;      // one pool per client
};
AsyncClassSplit async_class_split(const PartitionConfig& cfg, std::size_t num_classes);

struct Task {
    int index = 0;               // 1-based
    std::vector<int> classes;    // sorted
    std::vector<LabeledSample> samples;
};

// Per-client schedule of incremental tasks. Tasks have pairwise disjoint
// class sets; each stays active for rounds_per_task consecutive rounds.
struct TaskStream {
    std::size_t client_id = 0;
    std::vector<Task> tasks;
    std::size_t rounds_per_task = 1;

    const Task& task(int index) const;  // 1-based
};

TaskStream build_task_stream(std::size_t client_id, const std::vector<LabeledSample>& client_samples,
                             const PartitionConfig& cfg, std::size_t num_classes,
                             std::size_t rounds_per_task);

// Maps a 1-based round to its 1-based task: t = (r-1) / (R/T) + 1.
// Requires R divisible by T and 1 <= r <= R.
int round_to_task(int round, int total_rounds, int num_tasks);

// Pinned binary snapshot (little-endian u32/f64) so a run's exact data can
// be moved across machines.
void dump_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace fcil
