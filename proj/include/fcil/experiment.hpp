#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fcil/config.hpp"
#include "fcil/metrics.hpp"
#include "fcil/server.hpp"

namespace fcil {

// One CSV row: accuracy and cost of a single communication round.
// compute_seconds is wall-clock and therefore excluded from determinism
// guarantees; everything else is a pure function of the config.
struct RoundRow {
    int round = 0;
    int task = 0;
    std::optional<double> acc_previous;
    double acc_current = 0.0;
    double acc_all = 0.0;
    std::size_t bytes_up = 0;
    std::size_t bytes_down = 0;
    double compute_seconds = 0.0;
};

struct RunRecord {
    std::string run_id;
    ExperimentConfig config;
    std::vector<RoundRow> rounds;
    TrustReport trust;
    std::optional<double> privacy_gradient_route;
    std::optional<double> privacy_prototype_route;
    std::string version;
    std::string started_at;   // wall-clock metadata
    double wall_seconds = 0.0;

    double final_acc_all() const { return rounds.back().acc_all; }
};

// Dataset, per-client streams and the global class sets of every task,
// fixed before the round loop starts.
struct PreparedRun {
    Dataset data;
    std::vector<TaskStream> streams;
    std::vector<std::set<int>> current_classes;  // per task, union over clients
    std::vector<std::set<int>> previous_classes;
    std::vector<std::set<int>> all_classes;
};

PreparedRun prepare_run(const ExperimentConfig& cfg);

// The round loop on already-prepared streams; lets tests drive hand-built
// federations. prepared.streams.size() defines the client count here.
RunRecord run_rounds(const ExperimentConfig& cfg, const PreparedRun& prepared);

// prepare + run.
RunRecord run_experiment(const ExperimentConfig& cfg);

// Post-hoc privacy probe: replays the run to the distribution point of
// `round` and attacks one sample of one client through both channels.
struct AttackProbe {
    AttackResult gradient_route;
    std::optional<AttackResult> prototype_route;  // absent when no prototypes travel
    double privacy_gradient = 0.0;
    std::optional<double> privacy_prototype;
};

AttackProbe attack_run(const ExperimentConfig& cfg, int round, std::size_t client,
                       std::size_t sample_index, std::optional<AttackSettings> override_settings);

struct SuiteAggregate {
    std::size_t config_index = 0;
    std::string label;
    std::size_t runs = 0;
    double mean_final_acc_all = 0.0;
    double stddev_final_acc_all = 0.0;
    double mean_utility = 0.0;
};

struct SuiteFailure {
    std::string run_id;
    std::string error;
};

struct SuiteResult {
    std::vector<RunRecord> records;
    std::vector<SuiteAggregate> aggregates;  // one per config
    std::vector<SuiteFailure> failures;
};

// Cross product of configs and master seeds. Individual failures are
// recorded and the suite continues.
SuiteResult run_suite(std::span<const ExperimentConfig> configs,
                      std::span<const std::uint64_t> seeds);

// Rebind the master seed, re-deriving component seeds that are not pinned.
ExperimentConfig with_master_seed(ExperimentConfig cfg, std::uint64_t seed);

// CSV schema (one row per round per run, stable column order):
//   run_id,variant,mode,alpha_or_gamma,seed,round,task,
//   acc_prev,acc_cur,acc_all,bytes_up,bytes_down,compute_s
// Numbers carry 17 significant digits so parsing them back is exact;
// acc_prev is empty while the first task is active.
void emit_csv(std::span<const RunRecord> records, std::ostream& out);
std::string csv_string(std::span<const RunRecord> records);
void emit_csv_file(std::span<const RunRecord> records, const std::string& path);

// Structured summary: per-run final metrics and trust report plus suite
// aggregates and failures.
std::string summary_json(const SuiteResult& result);
void emit_summary_file(const SuiteResult& result, const std::string& path);

std::string make_run_id(const ExperimentConfig& cfg);

}  // namespace fcil
