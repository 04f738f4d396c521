#include "fcil/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fcil/errors.hpp"
#include "fcil/rng.hpp"

#ifndef FCIL_GIT_REV
#define FCIL_GIT_REV "unknown"
#endif

namespace fcil {

using nlohmann::json;

namespace {

constexpr std::uint64_t kHeadGrowthTag = 0x6A;
constexpr std::uint64_t kClientRoundTag = 0x5C;

struct VariantTraits {
    bool translation;
    bool track_prototypes;
    bool fuse_on_server;
};

VariantTraits traits_of(Variant v) {
    switch (v) {
        case Variant::FedProK:
            return {true, true, true};
        case Variant::NoFeatureTranslation:
            return {false, true, true};
        case Variant::NoKnowledgeFusion:
            return {true, true, false};
        case Variant::FedAvg:
            return {false, false, false};
    }
    throw ArgumentError("unknown variant");
}

std::string format_double(double v) {
    char buffer[64];
    std::snprintf(buffer, sizeof(buffer), "%.17g", v);
    return buffer;
}

std::string timestamp_now() {
    const std::time_t now = std::time(nullptr);
    char buffer[32];
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    std::strftime(buffer, sizeof(buffer), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buffer;
}

// Drives the round loop. Owns all client and server state of one run.
class Engine {
public:
    Engine(const ExperimentConfig& cfg, const PreparedRun& prepared)
        : cfg_(cfg), prepared_(prepared) {
        num_clients_ = prepared.streams.size();
        if (num_clients_ == 0) {
            throw ArgumentError("run: no client streams");
        }
        num_tasks_ = static_cast<int>(prepared.streams.front().tasks.size());
        if (cfg_.rounds % num_tasks_ != 0) {
            throw ConfigError("run: rounds not divisible by tasks");
        }

        // Head rows appear lazily: start with the union of first-task labels.
        int max_first = 0;
        for (const TaskStream& s : prepared.streams) {
            for (int c : s.task(1).classes) {
                max_first = std::max(max_first, c);
            }
        }
        global_.params =
            make_mlp(cfg_.dataset.input_dim, cfg_.hidden_dims, cfg_.feature_dim,
                     static_cast<std::size_t>(max_first) + 1, cfg_.resolved_model_init_seed());
        states_.resize(num_clients_);
        for (std::size_t k = 0; k < num_clients_; ++k) {
            states_[k].client_id = k;
            states_[k].params = global_.params;
        }
        ledger_.bandwidth_bytes_per_sec = cfg_.bandwidth_bytes_per_sec;
    }

    // The downlink payload every client receives at the start of a round.
    Distribution current_distribution() const { return distribute(global_); }

    RoundRow step(int round) {
        const int t = round_to_task(round, cfg_.rounds, num_tasks_);
        const VariantTraits traits = traits_of(cfg_.variant);
        const auto t0 = std::chrono::steady_clock::now();

        const Distribution dist = current_distribution();
        std::vector<ClientUpdate> updates;
        updates.reserve(num_clients_);
        std::size_t bytes_up = 0;

        for (std::size_t k = 0; k < num_clients_; ++k) {
            try {
                ClientState state = std::move(states_[k]);
                state.current_task = t;
                state.params = client_start_params(dist.params, k, round, t);

                TrainOptions options;
                options.epochs = cfg_.local_epochs;
                options.learning_rate = cfg_.learning_rate;
                options.batch_size = cfg_.batch_size;
                options.pseudo_per_class = cfg_.pseudo_per_class;
                options.enable_translation = traits.translation;
                options.track_prototypes = traits.track_prototypes;
                options.accept_global_prototypes = traits.fuse_on_server;
                options.upload_prototypes = traits.fuse_on_server;
                options.train_extractor = !cfg_.freeze_extractor || t == 1;
                options.base_rule = cfg_.base_class_rule;
                options.rng_seed = mix_seed(cfg_.resolved_training_seed(), kClientRoundTag,
                                            static_cast<std::uint64_t>(k),
                                            static_cast<std::uint64_t>(round));

                LocalRoundResult result = local_train_round(
                    std::move(state), prepared_.streams[k].task(t).samples, dist.prototypes,
                    options);
                states_[k] = std::move(result.state);
                bytes_up += result.update.bytes_uploaded;
                updates.push_back(std::move(result.update));
            } catch (const std::exception& e) {
                throw std::runtime_error("round " + std::to_string(round) + " client " +
                                         std::to_string(k) + ": " + e.what());
            }
        }

        try {
            global_.params = fedavg(updates, cfg_.sample_weighted_fedavg);
            if (traits.fuse_on_server) {
                global_.kb = fuse_prototypes(global_.kb, updates, t, cfg_.beta);
            }
            global_.round = round;
        } catch (const std::exception& e) {
            throw std::runtime_error("round " + std::to_string(round) +
                                     " aggregation: " + e.what());
        }

        const double compute_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        RoundRow row;
        row.round = round;
        row.task = t;
        row.bytes_up = bytes_up;
        row.bytes_down = num_clients_ * dist.bytes_downloaded;
        row.compute_seconds = compute_seconds;
        row.acc_current =
            evaluate(global_.params, prepared_.data.test, prepared_.current_classes[t - 1]);
        row.acc_all = evaluate(global_.params, prepared_.data.test, prepared_.all_classes[t - 1]);
        if (t > 1) {
            row.acc_previous =
                evaluate(global_.params, prepared_.data.test, prepared_.previous_classes[t - 1]);
        }
        ledger_.rounds.push_back(
            {row.bytes_up, row.bytes_down, row.compute_seconds});
        return row;
    }

    // Mirrors the growth a client performs when its task introduces labels
    // beyond the distributed head.
    ModelParams client_start_params(const ModelParams& distributed, std::size_t client, int round,
                                    int task) const {
        int needed = 0;
        for (int c : prepared_.streams[client].task(task).classes) {
            needed = std::max(needed, c + 1);
        }
        if (static_cast<std::size_t>(needed) <= distributed.num_classes()) {
            return distributed;
        }
        const double scale = 1.0 / std::sqrt(static_cast<double>(distributed.feature_dim()));
        return grow_classifier(distributed, static_cast<std::size_t>(needed), scale,
                               mix_seed(cfg_.resolved_model_init_seed(), kHeadGrowthTag,
                                        static_cast<std::uint64_t>(client),
                                        static_cast<std::uint64_t>(round)));
    }

    const GlobalState& global() const { return global_; }
    const EfficiencyLedger& ledger() const { return ledger_; }
    std::size_t num_clients() const { return num_clients_; }
    int num_tasks() const { return num_tasks_; }

private:
    const ExperimentConfig& cfg_;
    const PreparedRun& prepared_;
    std::size_t num_clients_ = 0;
    int num_tasks_ = 0;
    GlobalState global_;
    std::vector<ClientState> states_;
    EfficiencyLedger ledger_;
};

// What a client would upload for one class at the given parameters: the mean
// feature vector of its current-task samples of that class.
Tensor uploaded_prototype(const ModelParams& params, const Task& task, int class_id) {
    const PrototypeList list = compute_prototypes(params, task.samples, task.index);
    return list.at(class_id).prototype;
}

AttackProbe probe_sample(const ExperimentConfig& cfg, const ModelParams& params, const Task& task,
                         std::size_t sample_index, const AttackSettings& base_settings,
                         std::size_t client, int round) {
    if (sample_index >= task.samples.size()) {
        throw ArgumentError("attack: sample index " + std::to_string(sample_index) +
                            " outside the task's " + std::to_string(task.samples.size()) +
                            " samples");
    }
    const LabeledSample& target = task.samples[sample_index];
    const VariantTraits traits = traits_of(cfg.variant);

    AttackProbe probe;

    // Leakage channel (a): raw single-sample gradients of a local update.
    Tensor batch({1, target.features.size()});
    for (std::size_t j = 0; j < target.features.size(); ++j) {
        batch(0, j) = target.features(j);
    }
    const GradientSet observed =
        loss_and_grads(params, batch, {target.label}, true, false).grads;
    probe.gradient_route =
        gradient_inversion_attack(params, observed, target.label, base_settings, target.features);
    probe.gradient_route.client = client;
    probe.gradient_route.round = round;
    probe.privacy_gradient = privacy_score(probe.gradient_route.mse);

    // Leakage channel (b): the uploaded class prototype, inverted through
    // the extractor. Only meaningful when the variant transmits prototypes.
    if (traits.track_prototypes && traits.fuse_on_server) {
        AttackSettings proto_settings = base_settings;
        proto_settings.seed = mix_seed(base_settings.seed, 0xB0);
        probe.prototype_route = prototype_inversion_attack(
            params, uploaded_prototype(params, task, target.label), proto_settings,
            target.features);
        probe.prototype_route->client = client;
        probe.prototype_route->round = round;
        probe.privacy_prototype = privacy_score(probe.prototype_route->mse);
    }
    return probe;
}

}  // namespace

PreparedRun prepare_run(const ExperimentConfig& cfg) {
    cfg.validate();
    PreparedRun prepared;

    DatasetSpec spec = cfg.dataset;
    spec.seed = cfg.resolved_dataset_seed();
    prepared.data = generate_dataset(spec);

    PartitionConfig part = cfg.partition;
    part.seed = cfg.resolved_partition_seed();
    const std::vector<std::vector<LabeledSample>> client_samples =
        part.mode == PartitionMode::Synchronous
            ? partition_synchronous(prepared.data.train, part, spec.num_classes)
            : partition_asynchronous(prepared.data.train, part, spec.num_classes);

    const std::size_t rounds_per_task = static_cast<std::size_t>(cfg.rounds) / part.num_tasks;
    prepared.streams.reserve(part.num_clients);
    for (std::size_t k = 0; k < part.num_clients; ++k) {
        prepared.streams.push_back(
            build_task_stream(k, client_samples[k], part, spec.num_classes, rounds_per_task));
    }

    prepared.current_classes.resize(part.num_tasks);
    prepared.previous_classes.resize(part.num_tasks);
    prepared.all_classes.resize(part.num_tasks);
    for (std::size_t t = 0; t < part.num_tasks; ++t) {
        for (const TaskStream& stream : prepared.streams) {
            for (int c : stream.tasks[t].classes) {
                prepared.current_classes[t].insert(c);
            }
        }
        if (t > 0) {
            prepared.previous_classes[t] = prepared.all_classes[t - 1];
        }
        prepared.all_classes[t] = prepared.current_classes[t];
        if (t > 0) {
            prepared.all_classes[t].insert(prepared.all_classes[t - 1].begin(),
                                           prepared.all_classes[t - 1].end());
        }
    }
    return prepared;
}

RunRecord run_rounds(const ExperimentConfig& cfg, const PreparedRun& prepared) {
    const auto wall0 = std::chrono::steady_clock::now();
    RunRecord record;
    record.run_id = make_run_id(cfg);
    record.config = cfg;
    record.version = FCIL_GIT_REV;
    record.started_at = timestamp_now();

    Engine engine(cfg, prepared);
    record.rounds.reserve(cfg.rounds);
    for (int r = 1; r <= cfg.rounds; ++r) {
        record.rounds.push_back(engine.step(r));
    }

    // Trust report: stability/plasticity blend at the final round, privacy
    // of the variant's leakage channel, per-round cost.
    const RoundRow& final_row = record.rounds.back();
    record.trust.lambda = cfg.lambda;
    record.trust.utility = continual_utility(final_row.acc_previous.value_or(final_row.acc_current),
                                             final_row.acc_current, cfg.lambda);
    record.trust.efficiency_seconds = efficiency_score(engine.ledger(), cfg.rounds);
    for (const RoundRow& row : record.rounds) {
        record.trust.series.push_back(
            AccuracySnapshot{row.round, row.task, row.acc_previous, row.acc_current, row.acc_all});
    }

    if (cfg.attack.samples > 0) {
        const Distribution dist = engine.current_distribution();
        const Task& final_task = prepared.streams.front().task(engine.num_tasks());
        const std::size_t n = std::min(cfg.attack.samples, final_task.samples.size());
        double mse_grad = 0.0;
        double mse_proto = 0.0;
        bool has_proto = true;
        for (std::size_t i = 0; i < n; ++i) {
            AttackSettings settings;
            settings.iterations = cfg.attack.iterations;
            settings.learning_rate = cfg.attack.learning_rate;
            settings.seed = mix_seed(cfg.resolved_attack_seed(), static_cast<std::uint64_t>(i));
            settings.match_extractor_grads = true;
            settings.init_scale = std::max(1.0, cfg.dataset.class_center_scale);
            const AttackProbe probe =
                probe_sample(cfg, dist.params, final_task, i, settings, 0, cfg.rounds);
            mse_grad += probe.gradient_route.mse;
            if (probe.prototype_route) {
                mse_proto += probe.prototype_route->mse;
            } else {
                has_proto = false;
            }
        }
        record.privacy_gradient_route = privacy_score(mse_grad / static_cast<double>(n));
        if (has_proto) {
            record.privacy_prototype_route = privacy_score(mse_proto / static_cast<double>(n));
        }
        record.trust.privacy = record.privacy_prototype_route.value_or(
            record.privacy_gradient_route.value());
    }

    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return record;
}

RunRecord run_experiment(const ExperimentConfig& cfg) {
    const PreparedRun prepared = prepare_run(cfg);
    return run_rounds(cfg, prepared);
}

AttackProbe attack_run(const ExperimentConfig& cfg, int round, std::size_t client,
                       std::size_t sample_index, std::optional<AttackSettings> override_settings) {
    cfg.validate();
    if (round < 1 || round > cfg.rounds) {
        throw ArgumentError("attack: round " + std::to_string(round) + " outside [1, " +
                            std::to_string(cfg.rounds) + "]");
    }
    if (client >= cfg.partition.num_clients) {
        throw ArgumentError("attack: client " + std::to_string(client) + " outside [0, " +
                            std::to_string(cfg.partition.num_clients) + ")");
    }
    const PreparedRun prepared = prepare_run(cfg);
    Engine engine(cfg, prepared);
    for (int r = 1; r < round; ++r) {
        engine.step(r);
    }
    const int t = round_to_task(round, cfg.rounds, engine.num_tasks());
    const Distribution dist = engine.current_distribution();
    const ModelParams params = engine.client_start_params(dist.params, client, round, t);

    AttackSettings settings;
    if (override_settings) {
        settings = *override_settings;
    } else {
        settings.iterations = cfg.attack.iterations;
        settings.learning_rate = cfg.attack.learning_rate;
        settings.seed = mix_seed(cfg.resolved_attack_seed(), static_cast<std::uint64_t>(round),
                                 static_cast<std::uint64_t>(client));
        settings.init_scale = std::max(1.0, cfg.dataset.class_center_scale);
    }
    return probe_sample(cfg, params, prepared.streams[client].task(t), sample_index, settings,
                        client, round);
}

ExperimentConfig with_master_seed(ExperimentConfig cfg, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.dataset.seed = cfg.resolved_dataset_seed();
    cfg.partition.seed = cfg.resolved_partition_seed();
    return cfg;
}

SuiteResult run_suite(std::span<const ExperimentConfig> configs,
                      std::span<const std::uint64_t> seeds) {
    if (configs.empty()) {
        throw ArgumentError("suite: no configs");
    }
    if (seeds.empty()) {
        throw ArgumentError("suite: no seeds");
    }
    SuiteResult result;
    for (std::size_t ci = 0; ci < configs.size(); ++ci) {
        std::vector<double> finals;
        std::vector<double> utilities;
        std::string label;
        for (std::uint64_t seed : seeds) {
            const ExperimentConfig cfg = with_master_seed(configs[ci], seed);
            const std::string run_id = "c" + std::to_string(ci) + "-" + make_run_id(cfg);
            try {
                RunRecord record = run_experiment(cfg);
                record.run_id = run_id;
                label = make_run_id(with_master_seed(configs[ci], 0));
                finals.push_back(record.final_acc_all());
                utilities.push_back(record.trust.utility);
                result.records.push_back(std::move(record));
            } catch (const std::exception& e) {
                result.failures.push_back(SuiteFailure{run_id, e.what()});
            }
        }
        SuiteAggregate agg;
        agg.config_index = ci;
        agg.label = label;
        agg.runs = finals.size();
        if (!finals.empty()) {
            double mean = 0.0;
            for (double f : finals) {
                mean += f;
            }
            mean /= static_cast<double>(finals.size());
            double var = 0.0;
            for (double f : finals) {
                var += (f - mean) * (f - mean);
            }
            var = finals.size() > 1 ? var / static_cast<double>(finals.size() - 1) : 0.0;
            agg.mean_final_acc_all = mean;
            agg.stddev_final_acc_all = std::sqrt(var);
            double mean_u = 0.0;
            for (double u : utilities) {
                mean_u += u;
            }
            agg.mean_utility = mean_u / static_cast<double>(utilities.size());
        }
        result.aggregates.push_back(std::move(agg));
    }
    return result;
}

std::string make_run_id(const ExperimentConfig& cfg) {
    std::ostringstream id;
    id << variant_name(cfg.variant) << "-";
    if (cfg.partition.mode == PartitionMode::Synchronous) {
        id << "sync-alpha" << cfg.partition.alpha;
    } else {
        id << "async-gamma" << cfg.partition.gamma;
    }
    id << "-K" << cfg.partition.num_clients << "-T" << cfg.partition.num_tasks << "-R"
       << cfg.rounds << "-seed" << cfg.seed;
    return id.str();
}

void emit_csv(std::span<const RunRecord> records, std::ostream& out) {
    if (records.empty()) {
        throw ArgumentError("emit_csv: no records");
    }
    out << "run_id,variant,mode,alpha_or_gamma,seed,round,task,acc_prev,acc_cur,acc_all,"
           "bytes_up,bytes_down,compute_s\n";
    for (const RunRecord& record : records) {
        const ExperimentConfig& cfg = record.config;
        const bool sync = cfg.partition.mode == PartitionMode::Synchronous;
        const std::string prefix = record.run_id + "," + variant_name(cfg.variant) + "," +
                                   (sync ? "synchronous" : "asynchronous") + "," +
                                   format_double(sync ? cfg.partition.alpha : cfg.partition.gamma) +
                                   "," + std::to_string(cfg.seed);
        for (const RoundRow& row : record.rounds) {
            out << prefix << "," << row.round << "," << row.task << ",";
            if (row.acc_previous) {
                out << format_double(*row.acc_previous);
            }
            out << "," << format_double(row.acc_current) << "," << format_double(row.acc_all)
                << "," << row.bytes_up << "," << row.bytes_down << ","
                << format_double(row.compute_seconds) << "\n";
        }
    }
}

std::string csv_string(std::span<const RunRecord> records) {
    std::ostringstream out;
    emit_csv(records, out);
    return out.str();
}

void emit_csv_file(std::span<const RunRecord> records, const std::string& path) {
    std::ofstream file(path);
    if (!file) {
        throw IoError("emit_csv: cannot open " + path + " for writing");
    }
    emit_csv(records, file);
    if (!file) {
        throw IoError("emit_csv: write failed for " + path);
    }
}

namespace {

json record_to_json(const RunRecord& record) {
    const RoundRow& final_row = record.rounds.back();
    json run;
    run["run_id"] = record.run_id;
    run["version"] = record.version;
    run["started_at"] = record.started_at;
    run["wall_seconds"] = record.wall_seconds;
    run["config"] = json::parse(config_to_json(record.config));
    json final_metrics;
    final_metrics["round"] = final_row.round;
    final_metrics["task"] = final_row.task;
    if (final_row.acc_previous) {
        final_metrics["acc_prev"] = *final_row.acc_previous;
    } else {
        final_metrics["acc_prev"] = nullptr;
    }
    final_metrics["acc_cur"] = final_row.acc_current;
    final_metrics["acc_all"] = final_row.acc_all;
    run["final"] = final_metrics;
    json trust;
    trust["utility"] = record.trust.utility;
    trust["privacy"] = record.trust.privacy;
    trust["efficiency_seconds"] = record.trust.efficiency_seconds;
    trust["lambda"] = record.trust.lambda;
    run["trust"] = trust;
    json routes;
    routes["gradient"] = record.privacy_gradient_route
                             ? json(*record.privacy_gradient_route)
                             : json(nullptr);
    routes["prototype"] = record.privacy_prototype_route
                              ? json(*record.privacy_prototype_route)
                              : json(nullptr);
    run["privacy_routes"] = routes;
    std::size_t bytes_up = 0;
    std::size_t bytes_down = 0;
    double compute = 0.0;
    for (const RoundRow& row : record.rounds) {
        bytes_up += row.bytes_up;
        bytes_down += row.bytes_down;
        compute += row.compute_seconds;
    }
    run["totals"] = {{"bytes_up", bytes_up},
                     {"bytes_down", bytes_down},
                     {"compute_seconds", compute}};
    return run;
}

}  // namespace

std::string summary_json(const SuiteResult& result) {
    json root;
    root["runs"] = json::array();
    for (const RunRecord& record : result.records) {
        root["runs"].push_back(record_to_json(record));
    }
    root["aggregates"] = json::array();
    for (const SuiteAggregate& agg : result.aggregates) {
        root["aggregates"].push_back({{"config_index", agg.config_index},
                                      {"label", agg.label},
                                      {"runs", agg.runs},
                                      {"mean_final_acc_all", agg.mean_final_acc_all},
                                      {"stddev_final_acc_all", agg.stddev_final_acc_all},
                                      {"mean_utility", agg.mean_utility}});
    }
    root["failures"] = json::array();
    for (const SuiteFailure& failure : result.failures) {
        root["failures"].push_back({{"run_id", failure.run_id}, {"error", failure.error}});
    }
    return root.dump(2);
}

void emit_summary_file(const SuiteResult& result, const std::string& path) {
    std::ofstream file(path);
    if (!file) {
        throw IoError("emit_summary: cannot open " + path + " for writing");
    }
    file << summary_json(result) << "\n";
    if (!file) {
        throw IoError("emit_summary: write failed for " + path);
    }
}

}  // namespace fcil
