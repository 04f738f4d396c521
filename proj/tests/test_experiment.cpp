#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fcil/errors.hpp"
#include "fcil/experiment.hpp"
#include "fcil/rng.hpp"

using namespace fcil;

namespace {

// Small, fast federation: 4 classes over 2 tasks, 2 clients, 4 rounds.
ExperimentConfig tiny_config(Variant variant = Variant::FedProK, std::uint64_t seed = 7) {
    ExperimentConfig cfg;
    cfg.dataset.num_classes = 4;
    cfg.dataset.input_dim = 6;
    cfg.dataset.train_per_class = 12;
    cfg.dataset.test_per_class = 6;
    cfg.dataset.class_center_scale = 2.0;
    cfg.dataset.within_class_stddev = 0.3;
    cfg.partition.mode = PartitionMode::Synchronous;
    cfg.partition.alpha = 0.7;
    cfg.partition.num_clients = 2;
    cfg.partition.num_tasks = 2;
    cfg.rounds = 4;
    cfg.local_epochs = 1;
    cfg.learning_rate = 0.1;
    cfg.batch_size = 8;
    cfg.variant = variant;
    cfg.hidden_dims = {8};
    cfg.feature_dim = 6;
    cfg.seed = seed;
    cfg.attack.iterations = 40;
    cfg.attack.samples = 1;
    return cfg;
}

std::string strip_wall_clock_column(const std::string& csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        const std::size_t cut = line.rfind(',');
        out << line.substr(0, cut) << "\n";
    }
    return out.str();
}

std::vector<AccuracySnapshot> accuracy_series(const RunRecord& record) {
    return record.trust.series;
}

bool same_accuracy_series(const RunRecord& a, const RunRecord& b) {
    const auto sa = accuracy_series(a);
    const auto sb = accuracy_series(b);
    if (sa.size() != sb.size()) {
        return false;
    }
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i].acc_current != sb[i].acc_current || sa[i].acc_all != sb[i].acc_all ||
            sa[i].acc_previous.has_value() != sb[i].acc_previous.has_value()) {
            return false;
        }
        if (sa[i].acc_previous && *sa[i].acc_previous != *sb[i].acc_previous) {
            return false;
        }
    }
    return true;
}

const char* kValidJson = R"({
  "dataset": {"num_classes": 4, "input_dim": 6, "train_per_class": 12, "test_per_class": 6,
              "class_center_scale": 2.0, "within_class_stddev": 0.3},
  "partition": {"mode": "synchronous", "alpha": 0.7, "num_clients": 2, "num_tasks": 2},
  "rounds": 4,
  "local_epochs": 1,
  "learning_rate": 0.1,
  "batch_size": 8,
  "variant": "fedprok",
  "hidden_dims": [8],
  "feature_dim": 6,
  "seed": 7
})";

}  // namespace

TEST_CASE("config: valid JSON parses and echoes losslessly") {
    const ExperimentConfig cfg = parse_config_json(kValidJson);
    CHECK(cfg.dataset.num_classes == 4);
    CHECK(cfg.partition.alpha == 0.7);
    CHECK(cfg.variant == Variant::FedProK);
    const ExperimentConfig echoed = parse_config_json(config_to_json(cfg));
    CHECK(echoed.seed == cfg.seed);
    CHECK(echoed.dataset.num_classes == cfg.dataset.num_classes);
    CHECK(echoed.rounds == cfg.rounds);
    CHECK(config_to_json(echoed) == config_to_json(cfg));
}

TEST_CASE("config: unknown keys are rejected at every level") {
    std::string bad = kValidJson;
    bad.insert(bad.rfind('}'), R"(, "surprise": 1)");
    CHECK_THROWS_AS(parse_config_json(bad), ConfigError);

    std::string bad_nested = kValidJson;
    const std::string needle = "\"num_tasks\": 2";
    bad_nested.insert(bad_nested.find(needle) + needle.size(), R"(, "typo": true)");
    CHECK_THROWS_AS(parse_config_json(bad_nested), ConfigError);
}

TEST_CASE("config: mode-specific parameters are exclusive") {
    std::string with_gamma = kValidJson;
    const std::string needle = "\"alpha\": 0.7";
    with_gamma.insert(with_gamma.find(needle) + needle.size(), R"(, "gamma": 0.5)");
    CHECK_THROWS_AS(parse_config_json(with_gamma), ConfigError);
}

TEST_CASE("config: round/task divisibility is validated up front") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.rounds = 4;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("run_experiment: deterministic per seed, bit-identical CSV minus wall clock") {
    const ExperimentConfig cfg = tiny_config();
    const RunRecord a = run_experiment(cfg);
    const RunRecord b = run_experiment(cfg);
    const std::vector<RunRecord> ra{a};
    const std::vector<RunRecord> rb{b};
    CHECK(strip_wall_clock_column(csv_string(ra)) == strip_wall_clock_column(csv_string(rb)));
    CHECK(a.trust.utility == b.trust.utility);
    CHECK(a.trust.privacy == b.trust.privacy);

    const RunRecord c = run_experiment(with_master_seed(cfg, 8));
    const std::vector<RunRecord> rc{c};
    CHECK(strip_wall_clock_column(csv_string(ra)) != strip_wall_clock_column(csv_string(rc)));
}

TEST_CASE("run_experiment: series covers every round, first task has no previous accuracy") {
    const ExperimentConfig cfg = tiny_config();
    const RunRecord record = run_experiment(cfg);
    REQUIRE(record.rounds.size() == 4);
    for (int r = 0; r < 4; ++r) {
        CHECK(record.rounds[r].round == r + 1);
    }
    CHECK(record.rounds[0].task == 1);
    CHECK_FALSE(record.rounds[0].acc_previous.has_value());
    CHECK(record.rounds[3].task == 2);
    CHECK(record.rounds[3].acc_previous.has_value());
    CHECK(record.rounds[0].bytes_up > 0);
    CHECK(record.rounds[0].bytes_down > 0);
}

TEST_CASE("run_experiment: one round per task is a valid schedule") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 2;  // R == T
    const RunRecord record = run_experiment(cfg);
    CHECK(record.rounds.size() == 2);
    CHECK(record.rounds[0].task == 1);
    CHECK(record.rounds[1].task == 2);
}

TEST_CASE("variants: zero pseudo features reproduce the no-translation ablation") {
    ExperimentConfig fedprok = tiny_config(Variant::FedProK);
    fedprok.pseudo_per_class = 0;
    fedprok.attack.samples = 0;
    ExperimentConfig wo_ft = tiny_config(Variant::NoFeatureTranslation);
    wo_ft.attack.samples = 0;
    const RunRecord a = run_experiment(fedprok);
    const RunRecord b = run_experiment(wo_ft);
    CHECK(same_accuracy_series(a, b));
}

TEST_CASE("variants: without translation the accuracy trajectory collapses onto fedavg") {
    ExperimentConfig wo_ft = tiny_config(Variant::NoFeatureTranslation);
    wo_ft.attack.samples = 0;
    ExperimentConfig fedavg_cfg = tiny_config(Variant::FedAvg);
    fedavg_cfg.attack.samples = 0;
    const RunRecord a = run_experiment(wo_ft);
    const RunRecord b = run_experiment(fedavg_cfg);
    CHECK(same_accuracy_series(a, b));
    // They differ only in prototype traffic.
    for (std::size_t r = 0; r < a.rounds.size(); ++r) {
        CHECK(a.rounds[r].bytes_up >= b.rounds[r].bytes_up);
    }
}

TEST_CASE("variants: no prototype traffic under fedavg and the no-fusion ablation") {
    for (Variant v : {Variant::FedAvg, Variant::NoKnowledgeFusion}) {
        ExperimentConfig cfg = tiny_config(v);
        cfg.attack.samples = 0;
        const RunRecord record = run_experiment(cfg);
        // Uplink and downlink carry exactly the serialized parameters.
        ExperimentConfig plain = tiny_config(Variant::FedAvg);
        plain.attack.samples = 0;
        const RunRecord baseline = run_experiment(plain);
        for (std::size_t r = 0; r < record.rounds.size(); ++r) {
            CHECK(record.rounds[r].bytes_up == baseline.rounds[r].bytes_up);
            CHECK(record.rounds[r].bytes_down == baseline.rounds[r].bytes_down);
        }
    }
}

TEST_CASE("variants: fusion and its absence coincide for a single client") {
    // Hand-built one-client federation (the partition layer requires two or
    // more clients, the round loop itself does not).
    ExperimentConfig cfg = tiny_config(Variant::FedProK);
    cfg.attack.samples = 0;

    DatasetSpec spec = cfg.dataset;
    spec.seed = cfg.resolved_dataset_seed();
    PreparedRun prepared;
    prepared.data = generate_dataset(spec);

    TaskStream stream;
    stream.client_id = 0;
    stream.rounds_per_task = 2;
    Task task1;
    task1.index = 1;
    task1.classes = {0, 1};
    Task task2;
    task2.index = 2;
    task2.classes = {2, 3};
    for (const LabeledSample& s : prepared.data.train) {
        (s.label < 2 ? task1 : task2).samples.push_back(s);
    }
    stream.tasks = {task1, task2};
    prepared.streams = {stream};
    prepared.current_classes = {{0, 1}, {2, 3}};
    prepared.previous_classes = {{}, {0, 1}};
    prepared.all_classes = {{0, 1}, {0, 1, 2, 3}};

    const RunRecord with_fusion = run_rounds(cfg, prepared);
    cfg.variant = Variant::NoKnowledgeFusion;
    const RunRecord without_fusion = run_rounds(cfg, prepared);
    CHECK(same_accuracy_series(with_fusion, without_fusion));
}

TEST_CASE("emit_csv: schema, re-emission determinism, exact parse-back") {
    ExperimentConfig cfg = tiny_config();
    cfg.rounds = 10;
    cfg.partition.num_tasks = 2;
    const RunRecord record = run_experiment(cfg);
    const std::vector<RunRecord> records{record};
    const std::string csv = csv_string(records);
    CHECK(csv == csv_string(records));

    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line ==
          "run_id,variant,mode,alpha_or_gamma,seed,round,task,acc_prev,acc_cur,acc_all,"
          "bytes_up,bytes_down,compute_s");
    std::vector<std::string> rows;
    while (std::getline(in, line)) {
        rows.push_back(line);
    }
    REQUIRE(rows.size() == 10);

    // acc_all is column 10 (1-based); parsing it back is exact.
    const std::string& last = rows.back();
    std::vector<std::string> fields;
    std::string field;
    std::istringstream split(last);
    while (std::getline(split, field, ',')) {
        fields.push_back(field);
    }
    REQUIRE(fields.size() == 13);
    CHECK(std::stod(fields[9]) == record.final_acc_all());
    CHECK_THROWS_AS(csv_string({}), ArgumentError);
}

TEST_CASE("run_suite: cross product, aggregates and seed metadata") {
    ExperimentConfig cfg = tiny_config();
    cfg.attack.samples = 0;
    const std::vector<ExperimentConfig> configs{cfg};
    const std::vector<std::uint64_t> seeds{42, 1999, 2024};
    const SuiteResult result = run_suite(configs, seeds);
    REQUIRE(result.records.size() == 3);
    REQUIRE(result.aggregates.size() == 1);
    CHECK(result.failures.empty());

    double mean = 0.0;
    for (const RunRecord& record : result.records) {
        mean += record.final_acc_all();
    }
    mean /= 3.0;
    CHECK(result.aggregates[0].mean_final_acc_all == doctest::Approx(mean).epsilon(1e-15));
    CHECK(result.aggregates[0].runs == 3);

    std::set<std::uint64_t> found;
    for (const RunRecord& record : result.records) {
        found.insert(record.config.seed);
    }
    CHECK(found == std::set<std::uint64_t>{42, 1999, 2024});

    const std::string summary = summary_json(result);
    CHECK(summary.find("\"aggregates\"") != std::string::npos);
    CHECK(summary.find("\"mean_final_acc_all\"") != std::string::npos);
}

TEST_CASE("attack_run: prototype route exists exactly when prototypes travel") {
    ExperimentConfig cfg = tiny_config(Variant::FedProK);
    cfg.attack.iterations = 30;
    const AttackProbe probe = attack_run(cfg, 3, 0, 0, std::nullopt);
    CHECK(probe.prototype_route.has_value());
    CHECK(probe.privacy_prototype.has_value());
    CHECK(probe.privacy_gradient >= 0.0);

    ExperimentConfig plain = tiny_config(Variant::FedAvg);
    plain.attack.iterations = 30;
    const AttackProbe no_proto = attack_run(plain, 3, 0, 0, std::nullopt);
    CHECK_FALSE(no_proto.prototype_route.has_value());

    CHECK_THROWS_AS(attack_run(cfg, 99, 0, 0, std::nullopt), ArgumentError);
    CHECK_THROWS_AS(attack_run(cfg, 1, 5, 0, std::nullopt), ArgumentError);
}

TEST_CASE("asynchronous mode: end-to-end run with partial consensus") {
    // 12 classes at gamma 0.25: 3 common classes plus three unique pools of
    // 3, giving every client 6 classes over 3 tasks.
    ExperimentConfig cfg;
    cfg.dataset.num_classes = 12;
    cfg.dataset.input_dim = 12;
    cfg.dataset.train_per_class = 15;
    cfg.dataset.test_per_class = 10;
    cfg.dataset.class_center_scale = 2.0;
    cfg.dataset.within_class_stddev = 0.35;
    cfg.partition.mode = PartitionMode::Asynchronous;
    cfg.partition.gamma = 0.25;
    cfg.partition.num_clients = 3;
    cfg.partition.num_tasks = 3;
    cfg.rounds = 6;
    cfg.local_epochs = 2;
    cfg.learning_rate = 0.08;
    cfg.batch_size = 16;
    cfg.hidden_dims = {24};
    cfg.feature_dim = 12;
    cfg.seed = 5;
    cfg.attack.samples = 0;
    const RunRecord record = run_experiment(cfg);
    CHECK(record.rounds.size() == 6);
    // The union label space is covered and the model beats chance on it.
    CHECK(record.final_acc_all() > 1.0 / 12.0);
    // Later tasks introduce client-unique classes; the head must have grown
    // to cover the full label space by the final round.
    CHECK(record.rounds.back().task == 3);
}

TEST_CASE("trust report: utility matches the final snapshot blend") {
    ExperimentConfig cfg = tiny_config();
    cfg.lambda = 0.25;
    const RunRecord record = run_experiment(cfg);
    const RoundRow& last = record.rounds.back();
    const double expected =
        0.25 * last.acc_previous.value() + 0.75 * last.acc_current;
    CHECK(record.trust.utility == doctest::Approx(expected).epsilon(1e-15));
    CHECK(record.trust.efficiency_seconds > 0.0);
    CHECK(record.trust.privacy >= 0.0);
    CHECK(record.trust.privacy < 1.0);
}
