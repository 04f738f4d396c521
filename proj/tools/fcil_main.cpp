#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fcil/errors.hpp"
#include "fcil/experiment.hpp"
#include "fcil/wire.hpp"

namespace {

// exit codes: 0 success, 1 validation failure, 2 runtime failure
constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Accepts either a plain config file or a run-record summary (the config is
// then taken from its first run's echo).
fcil::ExperimentConfig load_config_or_record(const std::string& path) {
    std::ifstream file(path);
    if (!file) {
        throw fcil::IoError("cannot open " + path);
    }
    std::ostringstream buffer;
    buffer << file.rdbuf();
    const std::string text = buffer.str();
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw fcil::ConfigError(std::string("invalid JSON in ") + path + ": " + e.what());
    }
    if (root.is_object() && root.contains("runs")) {
        const auto& runs = root.at("runs");
        if (!runs.is_array() || runs.empty()) {
            throw fcil::ConfigError(path + ": run record has no runs");
        }
        return fcil::parse_config_json(runs.front().at("config").dump());
    }
    return fcil::parse_config_json(text);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream stream(text);
    std::string item;
    while (std::getline(stream, item, ',')) {
        if (item.empty()) {
            continue;
        }
        seeds.push_back(std::stoull(item));
    }
    if (seeds.empty()) {
        throw fcil::ArgumentError("--seeds: no seeds given");
    }
    return seeds;
}

// Reconstructions go out in the same pinned binary layout as other numeric
// payloads: u32 length, f64 values, twice (reconstruction, ground truth).
void dump_attack_arrays(const fcil::AttackResult& result, const std::string& path) {
    std::vector<std::uint8_t> out;
    fcil::wire::put_u32(out, static_cast<std::uint32_t>(result.reconstructed_input.size()));
    for (double v : result.reconstructed_input.data()) {
        fcil::wire::put_f64(out, v);
    }
    fcil::wire::put_u32(out, static_cast<std::uint32_t>(result.ground_truth.size()));
    for (double v : result.ground_truth.data()) {
        fcil::wire::put_f64(out, v);
    }
    std::ofstream file(path, std::ios::binary);
    if (!file) {
        throw fcil::IoError("cannot open " + path + " for writing");
    }
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

nlohmann::json attack_result_json(const fcil::AttackResult& result) {
    return {{"mse", result.mse},
            {"iterations_used", result.iterations_used},
            {"final_attack_loss", result.final_attack_loss}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fcilsim: deterministic federated class-incremental learning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string csv_path;
    std::string summary_path;
    std::optional<std::uint64_t> seed_override;

    auto* run_cmd = app.add_subcommand("run", "execute one experiment");
    run_cmd->add_option("config", config_path, "experiment config (JSON)")->required();
    run_cmd->add_option("--out-csv", csv_path, "per-round CSV output path");
    run_cmd->add_option("--out-summary", summary_path, "summary JSON output path");
    std::uint64_t run_seed = 0;
    bool run_seed_set = false;
    run_cmd->add_option("--seed", run_seed, "override the master seed")
        ->each([&](const std::string&) { run_seed_set = true; });

    auto* suite_cmd = app.add_subcommand("suite", "execute one config across several seeds");
    suite_cmd->add_option("config", config_path, "experiment config (JSON)")->required();
    std::string seeds_text = "42,1999,2024";
    suite_cmd->add_option("--seeds", seeds_text, "comma-separated master seeds");
    suite_cmd->add_option("--out-csv", csv_path, "per-round CSV output path");
    suite_cmd->add_option("--out-summary", summary_path, "summary JSON output path");

    auto* validate_cmd = app.add_subcommand("validate", "check a config without running it");
    validate_cmd->add_option("config", config_path, "experiment config (JSON)")->required();
    std::string dump_dataset_path;
    validate_cmd->add_option("--dump-dataset", dump_dataset_path,
                             "write the dataset this config generates to a binary file");

    auto* attack_cmd =
        app.add_subcommand("attack", "replay a run and invert one client's round traffic");
    attack_cmd->add_option("record", config_path, "run-record summary or config (JSON)")->required();
    int attack_round = 1;
    std::size_t attack_client = 0;
    std::size_t attack_sample = 0;
    std::string attack_dump;
    attack_cmd->add_option("--round", attack_round, "communication round to attack")->required();
    attack_cmd->add_option("--client", attack_client, "target client id")->required();
    attack_cmd->add_option("--sample", attack_sample, "sample index within the active task");
    attack_cmd->add_option("--out", attack_dump, "dump reconstruction arrays (binary)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*validate_cmd) {
            const fcil::ExperimentConfig cfg = fcil::load_config_file(config_path);
            std::cout << "ok: " << fcil::make_run_id(cfg) << "\n";
            if (!dump_dataset_path.empty()) {
                fcil::DatasetSpec spec = cfg.dataset;
                spec.seed = cfg.resolved_dataset_seed();
                fcil::dump_dataset(fcil::generate_dataset(spec), dump_dataset_path);
                std::cout << "dataset written to " << dump_dataset_path << "\n";
            }
            return kExitOk;
        }

        if (*run_cmd) {
            fcil::ExperimentConfig cfg = fcil::load_config_file(config_path);
            if (run_seed_set) {
                cfg = fcil::with_master_seed(cfg, run_seed);
            }
            (void)seed_override;
            const fcil::RunRecord record = fcil::run_experiment(cfg);
            fcil::SuiteResult single;
            single.records.push_back(record);
            if (!csv_path.empty()) {
                fcil::emit_csv_file(single.records, csv_path);
            }
            if (!summary_path.empty()) {
                fcil::emit_summary_file(single, summary_path);
            }
            const fcil::RoundRow& last = record.rounds.back();
            std::cout << record.run_id << ": final acc_all=" << last.acc_all
                      << " acc_cur=" << last.acc_current;
            if (last.acc_previous) {
                std::cout << " acc_prev=" << *last.acc_previous;
            }
            std::cout << " U=" << record.trust.utility << " P=" << record.trust.privacy
                      << " E=" << record.trust.efficiency_seconds << "s\n";
            return kExitOk;
        }

        if (*suite_cmd) {
            const fcil::ExperimentConfig cfg = fcil::load_config_file(config_path);
            const std::vector<std::uint64_t> seeds = parse_seed_list(seeds_text);
            const std::vector<fcil::ExperimentConfig> configs{cfg};
            const fcil::SuiteResult result = fcil::run_suite(configs, seeds);
            if (!csv_path.empty() && !result.records.empty()) {
                fcil::emit_csv_file(result.records, csv_path);
            }
            if (!summary_path.empty()) {
                fcil::emit_summary_file(result, summary_path);
            }
            for (const fcil::SuiteAggregate& agg : result.aggregates) {
                std::cout << "config " << agg.config_index << " (" << agg.label << "): " << agg.runs
                          << " runs, mean final acc_all=" << agg.mean_final_acc_all
                          << " stddev=" << agg.stddev_final_acc_all << "\n";
            }
            for (const fcil::SuiteFailure& failure : result.failures) {
                std::cerr << "failed: " << failure.run_id << ": " << failure.error << "\n";
            }
            return result.failures.empty() ? kExitOk : kExitRuntime;
        }

        if (*attack_cmd) {
            const fcil::ExperimentConfig cfg = load_config_or_record(config_path);
            const fcil::AttackProbe probe =
                fcil::attack_run(cfg, attack_round, attack_client, attack_sample, std::nullopt);
            nlohmann::json out;
            out["round"] = attack_round;
            out["client"] = attack_client;
            out["sample"] = attack_sample;
            out["gradient_route"] = attack_result_json(probe.gradient_route);
            out["gradient_route"]["privacy"] = probe.privacy_gradient;
            if (probe.prototype_route) {
                out["prototype_route"] = attack_result_json(*probe.prototype_route);
                out["prototype_route"]["privacy"] = *probe.privacy_prototype;
            } else {
                out["prototype_route"] = nullptr;
            }
            std::cout << out.dump(2) << "\n";
            if (!attack_dump.empty()) {
                dump_attack_arrays(probe.gradient_route, attack_dump);
            }
            return kExitOk;
        }
    } catch (const fcil::ConfigError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const fcil::ArgumentError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
