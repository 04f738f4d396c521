#include "fcil/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fcil/errors.hpp"
#include "fcil/rng.hpp"

namespace fcil {

using nlohmann::json;

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::FedProK:
            return "fedprok";
        case Variant::NoFeatureTranslation:
            return "fedprok_no_ft";
        case Variant::NoKnowledgeFusion:
            return "fedprok_no_pkf";
        case Variant::FedAvg:
            return "fedavg";
    }
    throw ArgumentError("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "fedprok") {
        return Variant::FedProK;
    }
    if (name == "fedprok_no_ft") {
        return Variant::NoFeatureTranslation;
    }
    if (name == "fedprok_no_pkf") {
        return Variant::NoKnowledgeFusion;
    }
    if (name == "fedavg") {
        return Variant::FedAvg;
    }
    throw ConfigError("unknown variant '" + name +
                      "'; expected fedprok, fedprok_no_ft, fedprok_no_pkf or fedavg");
}

namespace {

constexpr std::uint64_t kDatasetSeedTag = 0xD5;
constexpr std::uint64_t kPartitionSeedTag = 0xB7;
constexpr std::uint64_t kModelSeedTag = 0x31;
constexpr std::uint64_t kTrainSeedTag = 0x7E;
constexpr std::uint64_t kAttackSeedTag = 0xA7;

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
    for (const auto& [key, value] : obj.items()) {
        if (allowed.count(key) == 0) {
            throw ConfigError("config: unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) {
        return fallback;
    }
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config: bad value for '" + key + "': " + e.what());
    }
}

template <typename T>
T require(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.contains(key)) {
        throw ConfigError("config: missing key '" + key + "' in " + where);
    }
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config: bad value for '" + key + "': " + e.what());
    }
}

}  // namespace

std::uint64_t ExperimentConfig::resolved_dataset_seed() const {
    return component_seeds.dataset.value_or(mix_seed(seed, kDatasetSeedTag));
}
std::uint64_t ExperimentConfig::resolved_partition_seed() const {
    return component_seeds.partition.value_or(mix_seed(seed, kPartitionSeedTag));
}
std::uint64_t ExperimentConfig::resolved_model_init_seed() const {
    return component_seeds.model_init.value_or(mix_seed(seed, kModelSeedTag));
}
std::uint64_t ExperimentConfig::resolved_training_seed() const {
    return component_seeds.training.value_or(mix_seed(seed, kTrainSeedTag));
}
std::uint64_t ExperimentConfig::resolved_attack_seed() const {
    return component_seeds.attack.value_or(mix_seed(seed, kAttackSeedTag));
}

void ExperimentConfig::validate() const {
    dataset.validate();
    partition.validate(dataset.num_classes);
    if (rounds < 1) {
        throw ConfigError("config: rounds must be >= 1");
    }
    if (rounds % static_cast<int>(partition.num_tasks) != 0) {
        throw ConfigError("config: " + std::to_string(rounds) + " rounds not divisible by " +
                          std::to_string(partition.num_tasks) + " tasks");
    }
    if (local_epochs < 1) {
        throw ConfigError("config: local_epochs must be >= 1");
    }
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("config: learning_rate must be > 0");
    }
    if (batch_size < 1) {
        throw ConfigError("config: batch_size must be >= 1");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw ConfigError("config: beta must be in [0, 1]");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw ConfigError("config: lambda must be in [0, 1]");
    }
    if (!(bandwidth_bytes_per_sec > 0.0)) {
        throw ConfigError("config: bandwidth_bytes_per_sec must be > 0");
    }
    if (feature_dim < 1) {
        throw ConfigError("config: feature_dim must be >= 1");
    }
    for (std::size_t h : hidden_dims) {
        if (h < 1) {
            throw ConfigError("config: hidden_dims entries must be >= 1");
        }
    }
    if (attack.iterations < 0 || !(attack.learning_rate > 0.0)) {
        throw ConfigError("config: attack needs iterations >= 0 and learning_rate > 0");
    }
    // Both partition modes hand samples of shared classes to every client,
    // so each class needs at least one sample per client.
    if (dataset.train_per_class < partition.num_clients) {
        throw ConfigError("config: train_per_class must be >= num_clients");
    }
}

ExperimentConfig parse_config_json(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!root.is_object()) {
        throw ConfigError("config: top level must be a JSON object");
    }
    reject_unknown_keys(root,
                        {"dataset", "partition", "rounds", "local_epochs", "learning_rate",
                         "batch_size", "pseudo_per_class", "beta", "lambda", "variant",
                         "freeze_extractor", "base_class_rule", "sample_weighted_fedavg",
                         "bandwidth_bytes_per_sec", "hidden_dims", "feature_dim", "seed",
                         "component_seeds", "attack"},
                        "top level");

    ExperimentConfig cfg;
    cfg.seed = get_or<std::uint64_t>(root, "seed", 0);

    const json& ds = root.contains("dataset") ? root.at("dataset") : json::object();
    if (!ds.is_object()) {
        throw ConfigError("config: 'dataset' must be an object");
    }
    reject_unknown_keys(ds,
                        {"num_classes", "input_dim", "train_per_class", "test_per_class",
                         "class_center_scale", "within_class_stddev"},
                        "dataset");
    cfg.dataset.num_classes = require<std::size_t>(ds, "num_classes", "dataset");
    cfg.dataset.input_dim = require<std::size_t>(ds, "input_dim", "dataset");
    cfg.dataset.train_per_class = require<std::size_t>(ds, "train_per_class", "dataset");
    cfg.dataset.test_per_class = require<std::size_t>(ds, "test_per_class", "dataset");
    cfg.dataset.class_center_scale = get_or<double>(ds, "class_center_scale", 1.0);
    cfg.dataset.within_class_stddev = get_or<double>(ds, "within_class_stddev", 0.1);

    const json& pt = root.contains("partition") ? root.at("partition") : json::object();
    if (!pt.is_object()) {
        throw ConfigError("config: 'partition' must be an object");
    }
    reject_unknown_keys(pt, {"mode", "alpha", "gamma", "num_clients", "num_tasks"}, "partition");
    const std::string mode = require<std::string>(pt, "mode", "partition");
    if (mode == "synchronous") {
        cfg.partition.mode = PartitionMode::Synchronous;
        cfg.partition.alpha = require<double>(pt, "alpha", "partition");
        if (pt.contains("gamma")) {
            throw ConfigError("config: 'gamma' is not consulted in synchronous mode");
        }
    } else if (mode == "asynchronous") {
        cfg.partition.mode = PartitionMode::Asynchronous;
        cfg.partition.gamma = require<double>(pt, "gamma", "partition");
        if (pt.contains("alpha")) {
            throw ConfigError("config: 'alpha' is not consulted in asynchronous mode");
        }
    } else {
        throw ConfigError("config: partition mode must be 'synchronous' or 'asynchronous'");
    }
    cfg.partition.num_clients = require<std::size_t>(pt, "num_clients", "partition");
    cfg.partition.num_tasks = require<std::size_t>(pt, "num_tasks", "partition");

    cfg.rounds = require<int>(root, "rounds", "top level");
    cfg.local_epochs = get_or<int>(root, "local_epochs", 1);
    cfg.learning_rate = get_or<double>(root, "learning_rate", 0.1);
    cfg.batch_size = get_or<std::size_t>(root, "batch_size", 32);
    cfg.pseudo_per_class = get_or<int>(root, "pseudo_per_class", -1);
    cfg.beta = get_or<double>(root, "beta", 0.5);
    cfg.lambda = get_or<double>(root, "lambda", 0.5);
    cfg.variant = variant_from_name(get_or<std::string>(root, "variant", "fedprok"));
    cfg.freeze_extractor = get_or<bool>(root, "freeze_extractor", true);
    const std::string rule = get_or<std::string>(root, "base_class_rule", "max_similarity");
    if (rule == "max_similarity") {
        cfg.base_class_rule = BaseClassRule::MaxSimilarity;
    } else if (rule == "min_similarity") {
        cfg.base_class_rule = BaseClassRule::MinSimilarity;
    } else {
        throw ConfigError("config: base_class_rule must be 'max_similarity' or 'min_similarity'");
    }
    cfg.sample_weighted_fedavg = get_or<bool>(root, "sample_weighted_fedavg", false);
    cfg.bandwidth_bytes_per_sec = get_or<double>(root, "bandwidth_bytes_per_sec", 1e6);
    cfg.hidden_dims = get_or<std::vector<std::size_t>>(root, "hidden_dims", {32});
    cfg.feature_dim = get_or<std::size_t>(root, "feature_dim", 16);

    if (root.contains("component_seeds")) {
        const json& cs = root.at("component_seeds");
        if (!cs.is_object()) {
            throw ConfigError("config: 'component_seeds' must be an object");
        }
        reject_unknown_keys(cs, {"dataset", "partition", "model_init", "training", "attack"},
                            "component_seeds");
        if (cs.contains("dataset")) {
            cfg.component_seeds.dataset = cs.at("dataset").get<std::uint64_t>();
        }
        if (cs.contains("partition")) {
            cfg.component_seeds.partition = cs.at("partition").get<std::uint64_t>();
        }
        if (cs.contains("model_init")) {
            cfg.component_seeds.model_init = cs.at("model_init").get<std::uint64_t>();
        }
        if (cs.contains("training")) {
            cfg.component_seeds.training = cs.at("training").get<std::uint64_t>();
        }
        if (cs.contains("attack")) {
            cfg.component_seeds.attack = cs.at("attack").get<std::uint64_t>();
        }
    }

    if (root.contains("attack")) {
        const json& at = root.at("attack");
        if (!at.is_object()) {
            throw ConfigError("config: 'attack' must be an object");
        }
        reject_unknown_keys(at, {"iterations", "learning_rate", "samples"}, "attack");
        cfg.attack.iterations = get_or<int>(at, "iterations", cfg.attack.iterations);
        cfg.attack.learning_rate = get_or<double>(at, "learning_rate", cfg.attack.learning_rate);
        cfg.attack.samples = get_or<std::size_t>(at, "samples", cfg.attack.samples);
    }

    // Seeds feed the sub-generators of each component.
    cfg.dataset.seed = cfg.resolved_dataset_seed();
    cfg.partition.seed = cfg.resolved_partition_seed();

    cfg.validate();
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream file(path);
    if (!file) {
        throw IoError("config: cannot open " + path);
    }
    std::ostringstream buffer;
    buffer << file.rdbuf();
    return parse_config_json(buffer.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json root;
    root["dataset"] = {{"num_classes", cfg.dataset.num_classes},
                       {"input_dim", cfg.dataset.input_dim},
                       {"train_per_class", cfg.dataset.train_per_class},
                       {"test_per_class", cfg.dataset.test_per_class},
                       {"class_center_scale", cfg.dataset.class_center_scale},
                       {"within_class_stddev", cfg.dataset.within_class_stddev}};
    json pt = {{"num_clients", cfg.partition.num_clients},
               {"num_tasks", cfg.partition.num_tasks}};
    if (cfg.partition.mode == PartitionMode::Synchronous) {
        pt["mode"] = "synchronous";
        pt["alpha"] = cfg.partition.alpha;
    } else {
        pt["mode"] = "asynchronous";
        pt["gamma"] = cfg.partition.gamma;
    }
    root["partition"] = pt;
    root["rounds"] = cfg.rounds;
    root["local_epochs"] = cfg.local_epochs;
    root["learning_rate"] = cfg.learning_rate;
    root["batch_size"] = cfg.batch_size;
    root["pseudo_per_class"] = cfg.pseudo_per_class;
    root["beta"] = cfg.beta;
    root["lambda"] = cfg.lambda;
    root["variant"] = variant_name(cfg.variant);
    root["freeze_extractor"] = cfg.freeze_extractor;
    root["base_class_rule"] = cfg.base_class_rule == BaseClassRule::MaxSimilarity
                                  ? "max_similarity"
                                  : "min_similarity";
    root["sample_weighted_fedavg"] = cfg.sample_weighted_fedavg;
    root["bandwidth_bytes_per_sec"] = cfg.bandwidth_bytes_per_sec;
    root["hidden_dims"] = cfg.hidden_dims;
    root["feature_dim"] = cfg.feature_dim;
    root["seed"] = cfg.seed;
    json cs = json::object();
    if (cfg.component_seeds.dataset) {
        cs["dataset"] = *cfg.component_seeds.dataset;
    }
    if (cfg.component_seeds.partition) {
        cs["partition"] = *cfg.component_seeds.partition;
    }
    if (cfg.component_seeds.model_init) {
        cs["model_init"] = *cfg.component_seeds.model_init;
    }
    if (cfg.component_seeds.training) {
        cs["training"] = *cfg.component_seeds.training;
    }
    if (cfg.component_seeds.attack) {
        cs["attack"] = *cfg.component_seeds.attack;
    }
    if (!cs.empty()) {
        root["component_seeds"] = cs;
    }
    root["attack"] = {{"iterations", cfg.attack.iterations},
                      {"learning_rate", cfg.attack.learning_rate},
                      {"samples", cfg.attack.samples}};
    return root.dump(2);
}

}  // namespace fcil
