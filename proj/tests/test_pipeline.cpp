#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "cuts/pipeline.hpp"
#include "oracles.hpp"
#include "toy_data.hpp"

using namespace cuts;

namespace {

struct TempRun {
    std::filesystem::path dir;
    RunConfig cfg;

    explicit TempRun(const std::string& name) {
        dir = std::filesystem::temp_directory_path() / name;
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
    }
    ~TempRun() { std::filesystem::remove_all(dir); }

    void write(const std::string& file, const std::string& content) {
        std::ofstream out(dir / file);
        out << content;
    }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string toy_schema_json() {
    auto toy = cuts::testing::toy_census(1, 1);
    return toy.schema->to_json();
}

std::string toy_data_csv(std::size_t rows, std::uint64_t seed) {
    auto toy = cuts::testing::toy_census(rows, seed);
    std::ostringstream out;
    write_csv_stream(out, toy.table);
    return out.str();
}

RunConfig small_config(const TempRun& t) {
    RunConfig cfg;
    cfg.data_path = (t.dir / "data.csv").string();
    cfg.schema_path = (t.dir / "schema.json").string();
    cfg.program_path = (t.dir / "program.cuts").string();
    cfg.out_dir = (t.dir / "runs").string();
    cfg.pretrain_epochs = 30;
    cfg.pretrain_batch = 300;
    cfg.finetune_epochs = 10;
    cfg.finetune_batch = 300;
    cfg.dp_refit_epochs = 10;
    cfg.dp_batch = 200;
    cfg.dp_max_rounds = 3;
    cfg.n_samples = 500;
    cfg.reference_rows = 500;
    return cfg;
}

}  // namespace

TEST_CASE("empty program runs pretrain, sample, and eval only") {
    TempRun t("cuts_pipe_empty");
    t.write("schema.json", toy_schema_json());
    t.write("data.csv", toy_data_csv(600, 5));
    t.write("program.cuts", "SYNTHESIZE: toy;\nEND;\n");
    auto cfg = small_config(t);
    auto art = run_pipeline(cfg);

    CHECK(std::filesystem::exists(art.run_dir / "pretrained.ckpt"));
    CHECK(std::filesystem::exists(art.run_dir / "pretrain_log.csv"));
    CHECK_FALSE(std::filesystem::exists(art.run_dir / "finetune_log.csv"));
    CHECK(std::filesystem::exists(art.synthetic_csv));
    CHECK(std::filesystem::exists(art.report_csv));
    CHECK(std::filesystem::exists(art.manifest));
    CHECK(std::filesystem::exists(art.run_dir / "export" / "synthetic_train.csv"));

    // report carries the workload TV metrics
    auto report = slurp(art.report_csv);
    CHECK(report.find("workload_mean_tv") != std::string::npos);
    CHECK(report.find("downstream_accuracy") != std::string::npos);
}

TEST_CASE("pipeline runs are reproducible byte-for-byte") {
    TempRun t("cuts_pipe_repro");
    t.write("schema.json", toy_schema_json());
    t.write("data.csv", toy_data_csv(400, 6));
    t.write("program.cuts",
            "SYNTHESIZE: toy;\nENFORCE: ROW CONSTRAINT PARAM 0.05: age > 35;\nEND;\n");
    auto cfg = small_config(t);

    auto art1 = run_pipeline(cfg);
    std::string synth1 = slurp(art1.synthetic_csv);
    std::string report1 = slurp(art1.report_csv);
    std::string ckpt1 = slurp(art1.checkpoint);

    auto art2 = run_pipeline(cfg);
    CHECK(art1.run_dir == art2.run_dir);  // manifest-keyed directory
    CHECK(slurp(art2.synthetic_csv) == synth1);
    CHECK(slurp(art2.report_csv) == report1);
    CHECK(slurp(art2.checkpoint) == ckpt1);

    // fine-tune stage ran and logged per-spec columns
    auto log = slurp(art1.run_dir / "finetune_log.csv");
    CHECK(log.find("spec1_loss") != std::string::npos);
    CHECK(log.find("spec1_verify") != std::string::npos);
}

TEST_CASE("report regenerates bit-exactly from the emitted artifacts") {
    TempRun t("cuts_pipe_regen");
    t.write("schema.json", toy_schema_json());
    t.write("data.csv", toy_data_csv(400, 7));
    t.write("program.cuts", "SYNTHESIZE: toy;\nEND;\n");
    auto cfg = small_config(t);
    auto art = run_pipeline(cfg);

    Schema schema = Schema::load(cfg.schema_path);
    EncodedTable synth = load_csv(art.synthetic_csv.string(), schema);
    EncodedTable data = load_csv(cfg.data_path, schema);
    auto program = spec::validate(spec::parse("SYNTHESIZE: toy;\nEND;\n"), schema);

    // recompute with the same inputs the pipeline used
    std::uint64_t sample_seed = 0;
    for (const auto& [k, v] : art.report.rows) {
        if (k == "sample_seed") sample_seed = std::stoull(v);
    }
    auto report = evaluate_tables(synth, data, program, cfg, sample_seed);
    report.rows.emplace_back("eval_split", "training-data (no --test given)");
    CHECK(report.to_csv() == slurp(art.report_csv));
}

TEST_CASE("dp program produces a ledger and never fine-tunes on raw data") {
    TempRun t("cuts_pipe_dp");
    t.write("schema.json", toy_schema_json());
    t.write("data.csv", toy_data_csv(500, 8));
    t.write("program.cuts",
            "SYNTHESIZE: toy;\n"
            "ENSURE: DIFFERENTIAL PRIVACY: EPSILON=3.0, DELTA=1e-9;\n"
            "ENFORCE: ROW CONSTRAINT PARAM 0.05: age > 35;\n"
            "END;\n");
    auto cfg = small_config(t);
    auto art = run_pipeline(cfg);

    REQUIRE(std::filesystem::exists(art.run_dir / "ledger.csv"));
    REQUIRE(std::filesystem::exists(art.run_dir / "measurements.csv"));
    auto ledger = slurp(art.run_dir / "ledger.csv");
    CHECK(ledger.find("round,gamma,sigma,spec,rho_cost,cumulative_rho") == 0);

    // measurement set reload gives valid normalized targets
    Schema schema = Schema::load(cfg.schema_path);
    auto targets = targets_from_csv(slurp(art.run_dir / "measurements.csv"), schema);
    REQUIRE_FALSE(targets.empty());
    for (const auto& tg : targets) {
        CHECK(std::abs(tg.target.sum() - 1.0) < 1e-6);
        CHECK(tg.target.minCoeff() >= 0.0);
    }
}

TEST_CASE("aggregate stats appear when repeats or samples exceed one") {
    TempRun t("cuts_pipe_agg");
    t.write("schema.json", toy_schema_json());
    t.write("data.csv", toy_data_csv(300, 9));
    t.write("program.cuts", "SYNTHESIZE: toy;\nEND;\n");
    auto cfg = small_config(t);
    cfg.samples = 2;
    auto art = run_pipeline(cfg);
    REQUIRE(std::filesystem::exists(art.run_dir / "aggregates.csv"));
    auto agg = slurp(art.run_dir / "aggregates.csv");
    CHECK(agg.find("metric,mean,std,n") == 0);
    CHECK(agg.find("workload_mean_tv") != std::string::npos);
}
