#include "fcil/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "fcil/errors.hpp"
#include "fcil/rng.hpp"
#include "fcil/wire.hpp"

namespace fcil {

namespace {

// Stream tags keep the generator, partitioner and stream builder on
// independent substreams of the same seed.
constexpr std::uint64_t kCentersTag = 0x11;
constexpr std::uint64_t kTrainTag = 0x22;
constexpr std::uint64_t kTestTag = 0x33;
constexpr std::uint64_t kDirichletTag = 0x44;
constexpr std::uint64_t kAssignTag = 0x55;
constexpr std::uint64_t kAsyncSplitTag = 0x66;
constexpr std::uint64_t kAsyncSamplesTag = 0x77;
constexpr std::uint64_t kClassOrderTag = 0x88;

std::vector<std::vector<std::size_t>> indices_by_class(const std::vector<LabeledSample>& samples,
                                                       std::size_t num_classes) {
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const int label = samples[i].label;
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
            throw LabelError("partition: sample label " + std::to_string(label) + " outside [0, " +
                             std::to_string(num_classes) + ")");
        }
        by_class[static_cast<std::size_t>(label)].push_back(i);
    }
    return by_class;
}

// Integer allocation of n slots to the given proportions: floor first, then
// hand remaining slots to the largest fractional parts (ties to the lower
// index).
std::vector<std::size_t> allocate_counts(const std::vector<double>& proportions, std::size_t n) {
    const std::size_t k = proportions.size();
    std::vector<std::size_t> counts(k);
    std::vector<std::pair<double, std::size_t>> fractional(k);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const double exact = proportions[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        fractional[i] = {exact - std::floor(exact), i};
        assigned += counts[i];
    }
    std::sort(fractional.begin(), fractional.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return a.second < b.second;
    });
    for (std::size_t j = 0; assigned < n; ++j, ++assigned) {
        counts[fractional[j % k].second] += 1;
    }
    return counts;
}

}  // namespace

void DatasetSpec::validate() const {
    if (num_classes < 1 || input_dim < 1 || train_per_class < 1 || test_per_class < 1) {
        throw ConfigError("dataset spec: all counts must be >= 1");
    }
    if (!(within_class_stddev > 0.0) || !std::isfinite(within_class_stddev)) {
        throw ConfigError("dataset spec: within_class_stddev must be > 0");
    }
    if (!std::isfinite(class_center_scale)) {
        throw ConfigError("dataset spec: class_center_scale must be finite");
    }
}

Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset out;
    out.class_centers = Tensor({spec.num_classes, spec.input_dim});

    Rng center_rng(mix_seed(spec.seed, kCentersTag));
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t d = 0; d < spec.input_dim; ++d) {
            out.class_centers(c, d) =
                center_rng.uniform(-spec.class_center_scale, spec.class_center_scale);
        }
    }

    auto draw_split = [&](std::uint64_t tag, std::size_t per_class,
                          std::vector<LabeledSample>& sink) {
        sink.reserve(spec.num_classes * per_class);
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            Rng rng(mix_seed(spec.seed, tag, static_cast<std::uint64_t>(c)));
            for (std::size_t i = 0; i < per_class; ++i) {
                Tensor x({spec.input_dim});
                for (std::size_t d = 0; d < spec.input_dim; ++d) {
                    x(d) = out.class_centers(c, d) + rng.normal(0.0, spec.within_class_stddev);
                }
                sink.push_back(LabeledSample{std::move(x), static_cast<int>(c)});
            }
        }
    };
    draw_split(kTrainTag, spec.train_per_class, out.train);
    draw_split(kTestTag, spec.test_per_class, out.test);
    return out;
}

void PartitionConfig::validate(std::size_t num_classes) const {
    if (num_clients < 2) {
        throw ConfigError("partition: need at least 2 clients");
    }
    if (num_tasks < 1) {
        throw ConfigError("partition: need at least 1 task");
    }
    if (mode == PartitionMode::Synchronous) {
        if (!(alpha > 0.0) || !std::isfinite(alpha)) {
            throw ConfigError("partition: synchronous mode needs alpha > 0");
        }
        if (num_classes % num_tasks != 0) {
            throw ConfigError("partition: " + std::to_string(num_classes) +
                              " classes not divisible into " + std::to_string(num_tasks) + " tasks");
        }
    } else {
        if (!(gamma >= 0.0 && gamma <= 1.0)) {
            throw ConfigError("partition: asynchronous mode needs gamma in [0, 1]");
        }
        const auto common = static_cast<std::size_t>(
            std::llround(gamma * static_cast<double>(num_classes)));
        const std::size_t rest = num_classes - common;
        if (rest % num_clients != 0) {
            throw ConfigError(
                "partition: consensus split leaves " + std::to_string(rest) +
                " unique classes, not divisible by " + std::to_string(num_clients) +
                " clients; required: (num_classes - round(gamma * num_classes)) % num_clients == 0");
        }
        const std::size_t per_client = common + rest / num_clients;
        if (per_client == 0) {
            throw ConfigError("partition: clients would hold no classes");
        }
        if (per_client % num_tasks != 0) {
            throw ConfigError("partition: per-client class count " + std::to_string(per_client) +
                              " not divisible into " + std::to_string(num_tasks) + " tasks");
        }
    }
}

std::vector<std::vector<LabeledSample>> partition_synchronous(
    const std::vector<LabeledSample>& train, const PartitionConfig& cfg, std::size_t num_classes) {
    if (cfg.mode != PartitionMode::Synchronous) {
        throw ConfigError("partition_synchronous: config is not in synchronous mode");
    }
    cfg.validate(num_classes);
    const std::size_t k = cfg.num_clients;
    const auto by_class = indices_by_class(train, num_classes);

    std::vector<std::vector<LabeledSample>> clients(k);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t n = by_class[c].size();
        if (n < k) {
            throw ConfigError("partition: class " + std::to_string(c) + " has " + std::to_string(n) +
                              " samples, fewer than " + std::to_string(k) + " clients");
        }
        Rng dir_rng(mix_seed(cfg.seed, kDirichletTag, static_cast<std::uint64_t>(c)));
        std::vector<std::size_t> counts;
        // Redraw the class's Dirichlet proportions until everyone gets at
        // least one sample.
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 100000) {
                throw ConfigError("partition: could not allocate >= 1 sample per client for class " +
                                  std::to_string(c));
            }
            counts = allocate_counts(dir_rng.dirichlet(cfg.alpha, k), n);
            if (*std::min_element(counts.begin(), counts.end()) >= 1) {
                break;
            }
        }
        std::vector<std::size_t> order = by_class[c];
        Rng assign_rng(mix_seed(cfg.seed, kAssignTag, static_cast<std::uint64_t>(c)));
        assign_rng.shuffle(order);
        std::size_t cursor = 0;
        for (std::size_t client = 0; client < k; ++client) {
            for (std::size_t i = 0; i < counts[client]; ++i) {
                clients[client].push_back(train[order[cursor++]]);
            }
        }
    }
    return clients;
}

AsyncClassSplit async_class_split(const PartitionConfig& cfg, std::size_t num_classes) {
    const auto common_count =
        static_cast<std::size_t>(std::llround(cfg.gamma * static_cast<double>(num_classes)));
    const std::size_t rest = num_classes - common_count;
    if (rest % cfg.num_clients != 0) {
        throw ConfigError(
            "partition: consensus split leaves " + std::to_string(rest) +
            " unique classes, not divisible by " + std::to_string(cfg.num_clients) +
            " clients; required: (num_classes - round(gamma * num_classes)) % num_clients == 0");
    }
    const std::size_t per_pool = rest / cfg.num_clients;

    std::vector<int> perm(num_classes);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix_seed(cfg.seed, kAsyncSplitTag));
    rng.shuffle(perm);

    AsyncClassSplit split;
    split.common.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(common_count));
    split.unique.resize(cfg.num_clients);
    for (std::size_t client = 0; client < cfg.num_clients; ++client) {
        const std::size_t begin = common_count + client * per_pool;
        split.unique[client].assign(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                                    perm.begin() + static_cast<std::ptrdiff_t>(begin + per_pool));
    }
    return split;
}

std::vector<std::vector<LabeledSample>> partition_asynchronous(
    const std::vector<LabeledSample>& train, const PartitionConfig& cfg, std::size_t num_classes) {
    if (cfg.mode != PartitionMode::Asynchronous) {
        throw ConfigError("partition_asynchronous: config is not in asynchronous mode");
    }
    cfg.validate(num_classes);
    const AsyncClassSplit split = async_class_split(cfg, num_classes);
    const auto by_class = indices_by_class(train, num_classes);

    std::vector<std::vector<LabeledSample>> clients(cfg.num_clients);
    // Samples of common classes spread round-robin in seeded order.
    for (int c : split.common) {
        std::vector<std::size_t> order = by_class[static_cast<std::size_t>(c)];
        Rng rng(mix_seed(cfg.seed, kAsyncSamplesTag, static_cast<std::uint64_t>(c)));
        rng.shuffle(order);
        for (std::size_t i = 0; i < order.size(); ++i) {
            clients[i % cfg.num_clients].push_back(train[order[i]]);
        }
    }
    // Unique classes go wholly to their owner.
    for (std::size_t client = 0; client < cfg.num_clients; ++client) {
        for (int c : split.unique[client]) {
            for (std::size_t idx : by_class[static_cast<std::size_t>(c)]) {
                clients[client].push_back(train[idx]);
            }
        }
    }
    return clients;
}

const Task& TaskStream::task(int index) const {
    if (index < 1 || static_cast<std::size_t>(index) > tasks.size()) {
        throw ArgumentError("task stream: task index " + std::to_string(index) + " outside [1, " +
                            std::to_string(tasks.size()) + "]");
    }
    return tasks[static_cast<std::size_t>(index - 1)];
}

TaskStream build_task_stream(std::size_t client_id, const std::vector<LabeledSample>& client_samples,
                             const PartitionConfig& cfg, std::size_t num_classes,
                             std::size_t rounds_per_task) {
    cfg.validate(num_classes);
    if (client_id >= cfg.num_clients) {
        throw ArgumentError("build_task_stream: client id " + std::to_string(client_id) +
                            " outside [0, " + std::to_string(cfg.num_clients) + ")");
    }
    if (rounds_per_task < 1) {
        throw ConfigError("build_task_stream: rounds_per_task must be >= 1");
    }

    // Class order: one global seeded permutation in synchronous mode (every
    // client sees identical task class sets); common classes first, then the
    // client's own unique pool, in asynchronous mode.
    std::vector<int> order;
    if (cfg.mode == PartitionMode::Synchronous) {
        order.resize(num_classes);
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix_seed(cfg.seed, kClassOrderTag));
        rng.shuffle(order);
    } else {
        const AsyncClassSplit split = async_class_split(cfg, num_classes);
        order = split.common;
        order.insert(order.end(), split.unique[client_id].begin(), split.unique[client_id].end());
    }

    if (order.size() % cfg.num_tasks != 0) {
        throw ConfigError("build_task_stream: class set size " + std::to_string(order.size()) +
                          " not divisible into " + std::to_string(cfg.num_tasks) + " tasks");
    }
    const std::size_t per_task = order.size() / cfg.num_tasks;

    TaskStream stream;
    stream.client_id = client_id;
    stream.rounds_per_task = rounds_per_task;
    stream.tasks.resize(cfg.num_tasks);
    std::vector<int> class_to_task(num_classes, -1);
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
        Task& task = stream.tasks[t];
        task.index = static_cast<int>(t + 1);
        task.classes.assign(order.begin() + static_cast<std::ptrdiff_t>(t * per_task),
                            order.begin() + static_cast<std::ptrdiff_t>((t + 1) * per_task));
        std::sort(task.classes.begin(), task.classes.end());
        for (int c : task.classes) {
            class_to_task[static_cast<std::size_t>(c)] = static_cast<int>(t);
        }
    }
    for (const LabeledSample& sample : client_samples) {
        if (sample.label < 0 || static_cast<std::size_t>(sample.label) >= num_classes) {
            throw LabelError("build_task_stream: label " + std::to_string(sample.label) +
                             " outside [0, " + std::to_string(num_classes) + ")");
        }
        const int t = class_to_task[static_cast<std::size_t>(sample.label)];
        if (t < 0) {
            throw InvariantError("build_task_stream: client " + std::to_string(client_id) +
                                 " holds a sample of class " + std::to_string(sample.label) +
                                 " outside its class set");
        }
        stream.tasks[static_cast<std::size_t>(t)].samples.push_back(sample);
    }
    return stream;
}

int round_to_task(int round, int total_rounds, int num_tasks) {
    if (num_tasks < 1 || total_rounds < 1) {
        throw ConfigError("round_to_task: rounds and tasks must be >= 1");
    }
    if (total_rounds % num_tasks != 0) {
        throw ConfigError("round_to_task: " + std::to_string(total_rounds) +
                          " rounds not divisible by " + std::to_string(num_tasks) + " tasks");
    }
    if (round < 1 || round > total_rounds) {
        throw ConfigError("round_to_task: round " + std::to_string(round) + " outside [1, " +
                          std::to_string(total_rounds) + "]");
    }
    return (round - 1) / (total_rounds / num_tasks) + 1;
}

namespace {

constexpr std::uint32_t kDatasetMagic = 0x53444346;  // "FCDS" little-endian
constexpr std::uint32_t kDatasetVersion = 1;

void put_samples(std::vector<std::uint8_t>& out, const std::vector<LabeledSample>& samples,
                 std::size_t input_dim) {
    wire::put_u32(out, static_cast<std::uint32_t>(samples.size()));
    for (const LabeledSample& s : samples) {
        if (s.features.size() != input_dim) {
            throw DimensionError("dump_dataset: sample width " + std::to_string(s.features.size()) +
                                 " does not match input_dim " + std::to_string(input_dim));
        }
        wire::put_u32(out, static_cast<std::uint32_t>(s.label));
        for (double v : s.features.data()) {
            wire::put_f64(out, v);
        }
    }
}

std::vector<LabeledSample> read_samples(wire::Reader& reader, std::size_t input_dim) {
    const std::uint32_t n = reader.u32("dataset samples");
    std::vector<LabeledSample> samples;
    samples.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        LabeledSample s;
        s.label = static_cast<int>(reader.u32("dataset sample label"));
        Tensor x({input_dim});
        for (double& v : x.data()) {
            v = reader.f64("dataset sample payload");
        }
        s.features = std::move(x);
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace

void dump_dataset(const Dataset& data, const std::string& path) {
    const std::size_t num_classes = data.class_centers.rows();
    const std::size_t input_dim = data.class_centers.cols();
    std::vector<std::uint8_t> out;
    wire::put_u32(out, kDatasetMagic);
    wire::put_u32(out, kDatasetVersion);
    wire::put_u32(out, static_cast<std::uint32_t>(num_classes));
    wire::put_u32(out, static_cast<std::uint32_t>(input_dim));
    for (double v : data.class_centers.data()) {
        wire::put_f64(out, v);
    }
    put_samples(out, data.train, input_dim);
    put_samples(out, data.test, input_dim);

    std::ofstream file(path, std::ios::binary);
    if (!file) {
        throw IoError("dump_dataset: cannot open " + path + " for writing");
    }
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw IoError("dump_dataset: write failed for " + path);
    }
}

Dataset load_dataset(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw IoError("load_dataset: cannot open " + path);
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)),
                                    std::istreambuf_iterator<char>());
    wire::Reader reader(bytes);
    if (reader.u32("dataset magic") != kDatasetMagic) {
        throw FormatError("load_dataset: bad magic at byte offset 0");
    }
    const std::uint32_t version = reader.u32("dataset version");
    if (version != kDatasetVersion) {
        reader.fail("load_dataset: unsupported version " + std::to_string(version));
    }
    const std::uint32_t num_classes = reader.u32("dataset header");
    const std::uint32_t input_dim = reader.u32("dataset header");
    constexpr std::uint32_t cap = 1u << 20;
    if (num_classes == 0 || input_dim == 0 || num_classes > cap || input_dim > cap) {
        reader.fail("load_dataset: implausible header");
    }
    Dataset data;
    data.class_centers = Tensor({num_classes, input_dim});
    for (double& v : data.class_centers.data()) {
        v = reader.f64("dataset centers");
    }
    data.train = read_samples(reader, input_dim);
    data.test = read_samples(reader, input_dim);
    reader.expect_end("dataset");
    return data;
}

}  // namespace fcil
