// Command line driver: synth / finetune / sample / eval / tune / fmt / check
// plus the end-to-end `run` pipeline. Exit codes: 0 ok, 1 runtime failure,
// 2 parse or validation failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cuts/pipeline.hpp"

namespace {

using namespace cuts;

int exit_code_for(const Error& e) {
    switch (e.code()) {
    case ErrorCode::SyntaxError:
    case ErrorCode::DuplicateDP:
    case ErrorCode::MissingEnd:
    case ErrorCode::UnknownFeature:
    case ErrorCode::UnknownCategory:
    case ErrorCode::TypeMismatch:
    case ErrorCode::ProtectedColumnMissing:
    case ErrorCode::BinBoundary:
    case ErrorCode::NonBinaryTarget:
    case ErrorCode::UnknownColumn:
    case ErrorCode::OutOfDomainValue:
    case ErrorCode::RaggedRow:
    case ErrorCode::MissingLabel:
        return 2;
    default:
        return 1;
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::map<std::string, double> parse_lambda_overrides(const std::vector<std::string>& raw) {
    std::map<std::string, double> out;
    for (const auto& item : raw) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            fail(ErrorCode::InvalidArgument, "--lambda expects name=value, got '" + item + "'");
        }
        out[item.substr(0, eq)] = std::stod(item.substr(eq + 1));
    }
    return out;
}

void add_lambda_option(CLI::App* cmd, std::vector<std::string>& sink) {
    cmd->add_option("--lambda", sink,
                    "override a specification weight, e.g. --lambda spec1=0.01")
        ->take_all();
}

int cmd_check(const std::string& program_path, const std::string& schema_path) {
    auto program = spec::parse(read_file(program_path));
    if (!schema_path.empty()) {
        Schema schema = Schema::load(schema_path);
        spec::validate(program, schema);
    }
    std::cout << "ok: " << program.commands.size() << " command(s)\n";
    return 0;
}

int cmd_fmt(const std::string& program_path, bool in_place) {
    auto text = spec::format(spec::parse(read_file(program_path)));
    if (in_place) {
        std::ofstream out(program_path);
        out << text;
    } else {
        std::cout << text;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"customizable synthetic tabular data engine"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read defaults from a TOML file");

    RunConfig cfg;
    std::vector<std::string> lambda_raw;

    // ---- run ----
    auto* run = app.add_subcommand("run", "pretrain, fine-tune, sample, and report");
    run->add_option("--data", cfg.data_path, "training CSV")->required();
    run->add_option("--schema", cfg.schema_path, "schema sidecar JSON")->required();
    run->add_option("--program", cfg.program_path, "specification program")->required();
    run->add_option("--test", cfg.test_path, "held-out CSV for evaluation");
    run->add_option("--out", cfg.out_dir, "output directory (default runs/)");
    run->add_option("--seed", cfg.seed, "master seed");
    run->add_option("--pretrain-epochs", cfg.pretrain_epochs);
    run->add_option("--pretrain-batch", cfg.pretrain_batch);
    run->add_option("--finetune-epochs", cfg.finetune_epochs);
    run->add_option("--finetune-batch", cfg.finetune_batch);
    run->add_option("--dp-refit-epochs", cfg.dp_refit_epochs);
    run->add_option("--dp-batch", cfg.dp_batch);
    run->add_option("--dp-max-rounds", cfg.dp_max_rounds);
    run->add_option("--group-size", cfg.group_size);
    run->add_option("--n-samples", cfg.n_samples);
    run->add_option("--reference-rows", cfg.reference_rows);
    run->add_option("--max-rounds", cfg.rejection_max_rounds, "rejection sampling rounds");
    run->add_option("--repeats", cfg.repeats, "fine-tune retrainings for aggregates");
    run->add_option("--samples", cfg.samples, "samples per retraining for aggregates");
    run->add_option("--default-lambda", cfg.default_lambda);
    run->add_flag("--workload-degrade", cfg.workload_degrade,
                  "fall back to pair marginals when K < 3");
    run->add_flag("!--no-spend-remainder", cfg.spend_remainder,
                  "skip the final remainder measurement round");
    add_lambda_option(run, lambda_raw);

    // ---- synth ----
    double eps_flag = 0.0, delta_flag = 1e-9;
    auto* synth = app.add_subcommand("synth", "pretrain a generator (non-private or DP)");
    synth->add_option("--data", cfg.data_path)->required();
    synth->add_option("--schema", cfg.schema_path)->required();
    synth->add_option("--program", cfg.program_path, "only the DP command is read here");
    synth->add_option("--epsilon", eps_flag, "DP epsilon (alternative to a program)");
    synth->add_option("--delta", delta_flag, "DP delta");
    synth->add_option("--out", cfg.out_dir);
    synth->add_option("--seed", cfg.seed);
    synth->add_option("--pretrain-epochs", cfg.pretrain_epochs);
    synth->add_option("--pretrain-batch", cfg.pretrain_batch);
    synth->add_option("--dp-refit-epochs", cfg.dp_refit_epochs);
    synth->add_option("--dp-batch", cfg.dp_batch);
    synth->add_option("--dp-max-rounds", cfg.dp_max_rounds);
    synth->add_option("--group-size", cfg.group_size);
    synth->add_flag("--workload-degrade", cfg.workload_degrade);
    synth->add_flag("!--no-spend-remainder", cfg.spend_remainder);

    // ---- finetune ----
    std::string ckpt_in, measurements_path;
    auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint against a program");
    ft->add_option("--checkpoint", ckpt_in)->required();
    ft->add_option("--data", cfg.data_path, "reference data (non-private mode)");
    ft->add_option("--schema", cfg.schema_path)->required();
    ft->add_option("--program", cfg.program_path)->required();
    ft->add_option("--measurements", measurements_path,
                   "noisy measurement CSV from a DP synth run");
    ft->add_option("--out", cfg.out_dir);
    ft->add_option("--seed", cfg.seed);
    ft->add_option("--finetune-epochs", cfg.finetune_epochs);
    ft->add_option("--finetune-batch", cfg.finetune_batch);
    ft->add_option("--group-size", cfg.group_size);
    ft->add_option("--reference-rows", cfg.reference_rows);
    ft->add_option("--default-lambda", cfg.default_lambda);
    ft->add_flag("--workload-degrade", cfg.workload_degrade);
    add_lambda_option(ft, lambda_raw);

    // ---- sample ----
    std::string sample_out = "synthetic.csv";
    auto* sample = app.add_subcommand("sample", "draw rows from a checkpoint");
    sample->add_option("--checkpoint", ckpt_in)->required();
    sample->add_option("--schema", cfg.schema_path)->required();
    sample->add_option("--program", cfg.program_path, "enable rejection for its row constraints");
    sample->add_option("--n-samples", cfg.n_samples);
    sample->add_option("--seed", cfg.seed);
    sample->add_option("--max-rounds", cfg.rejection_max_rounds);
    sample->add_option("--out", sample_out);

    // ---- eval ----
    std::string synth_csv;
    auto* eval = app.add_subcommand("eval", "recompute the report from emitted CSVs");
    eval->add_option("--synthetic", synth_csv)->required();
    eval->add_option("--test", cfg.test_path, "real data CSV")->required();
    eval->add_option("--schema", cfg.schema_path)->required();
    eval->add_option("--program", cfg.program_path, "verifier metrics for its specifications");
    eval->add_option("--out", cfg.out_dir, "directory for report.txt / report.csv");
    eval->add_option("--seed", cfg.seed);
    eval->add_flag("--workload-degrade", cfg.workload_degrade);
    add_lambda_option(eval, lambda_raw);

    // ---- tune ----
    std::vector<std::string> grid_raw;
    int tune_k = 5;
    bool all_folds = false;
    auto* tune = app.add_subcommand("tune", "cross-validate specification weights");
    tune->add_option("--data", cfg.data_path)->required();
    tune->add_option("--schema", cfg.schema_path)->required();
    tune->add_option("--program", cfg.program_path)->required();
    tune->add_option("--grid", grid_raw, "spec1=0.001,0.01,0.1 (repeatable)")->take_all();
    tune->add_option("--k", tune_k, "fold count");
    tune->add_flag("--all-folds", all_folds, "evaluate all folds, not just the first");
    tune->add_option("--seed", cfg.seed);
    tune->add_option("--pretrain-epochs", cfg.pretrain_epochs);
    tune->add_option("--pretrain-batch", cfg.pretrain_batch);
    tune->add_option("--finetune-epochs", cfg.finetune_epochs);
    tune->add_option("--finetune-batch", cfg.finetune_batch);
    tune->add_option("--out", cfg.out_dir, "write the diagnostic CSV here");
    tune->add_flag("--workload-degrade", cfg.workload_degrade);

    // ---- fmt / check ----
    bool in_place = false;
    auto* fmt = app.add_subcommand("fmt", "canonicalize a program");
    fmt->add_option("--program", cfg.program_path)->required();
    fmt->add_flag("--in-place", in_place);

    auto* check = app.add_subcommand("check", "parse and validate a program");
    check->add_option("--program", cfg.program_path)->required();
    check->add_option("--schema", cfg.schema_path, "validate against this schema");

    CLI11_PARSE(app, argc, argv);

    try {
        cfg.lambda_overrides = parse_lambda_overrides(lambda_raw);

        if (run->parsed()) {
            auto art = run_pipeline(cfg);
            std::cout << art.report.to_text() << "\nartifacts in " << art.run_dir.string() << "\n";
            return 0;
        }
        if (check->parsed()) return cmd_check(cfg.program_path, cfg.schema_path);
        if (fmt->parsed()) return cmd_fmt(cfg.program_path, in_place);

        if (synth->parsed()) {
            Schema schema = Schema::load(cfg.schema_path);
            EncodedTable table = load_csv(cfg.data_path, schema);
            bool dp = eps_flag > 0.0;
            double eps = eps_flag, delta = delta_flag;
            if (!cfg.program_path.empty()) {
                auto program = spec::validate(spec::parse(read_file(cfg.program_path)), schema);
                if (program.dp) {
                    dp = true;
                    eps = program.epsilon;
                    delta = program.delta;
                }
            }
            std::filesystem::create_directories(cfg.out_dir);
            Generator gen(schema, cfg.seed);
            if (dp) {
                auto workload =
                    marginal_workload(schema, WorkloadMode::All3Way, cfg.workload_degrade);
                auto ledger = PrivacyLedger::from_eps_delta(eps, delta);
                DpPretrainConfig dpc;
                dpc.batch_size = cfg.dp_batch;
                dpc.refit_epochs = cfg.dp_refit_epochs;
                dpc.group_size = cfg.group_size;
                dpc.seed = derive_seed(cfg.seed, 1);
                dpc.spend_remainder = cfg.spend_remainder;
                dpc.max_rounds = cfg.dp_max_rounds;
                auto result = dp_pretrain(gen, table, workload, ledger, dpc);
                std::ofstream lcsv(cfg.out_dir + "/ledger.csv");
                ledger.write_csv(lcsv, schema);
                std::ofstream mcsv(cfg.out_dir + "/measurements.csv");
                mcsv << targets_to_csv(result.measurements, schema);
                std::cout << "dp pretraining: " << result.rounds << " rounds, rho "
                          << ledger.spent_rho() << " / " << ledger.total_rho() << "\n";
            } else {
                auto workload = marginal_workload(schema, WorkloadMode::ThreeWayWithLabel,
                                                  cfg.workload_degrade);
                PretrainConfig pre;
                pre.batch_size = cfg.pretrain_batch;
                pre.epochs = cfg.pretrain_epochs;
                pre.group_size = cfg.group_size;
                pre.seed = derive_seed(cfg.seed, 1);
                auto history = pretrain(gen, table, workload, pre);
                std::ofstream log(cfg.out_dir + "/pretrain_log.csv");
                log << "epoch,mean_tv,lr\n";
                for (const auto& row : history) {
                    log << row.epoch << "," << row.mean_tv << "," << row.lr << "\n";
                }
            }
            gen.save(cfg.out_dir + "/pretrained.ckpt");
            std::cout << "checkpoint: " << cfg.out_dir << "/pretrained.ckpt\n";
            return 0;
        }

        if (ft->parsed()) {
            Schema schema = Schema::load(cfg.schema_path);
            auto program = spec::validate(spec::parse(read_file(cfg.program_path)), schema);
            Generator gen = Generator::load(ckpt_in, schema);
            std::vector<MarginalTarget> targets;
            std::shared_ptr<const EncodedTable> reference;
            if (program.dp) {
                if (measurements_path.empty()) {
                    fail(ErrorCode::InvalidArgument,
                         "DP programs need --measurements from the synth stage");
                }
                targets = targets_from_csv(read_file(measurements_path), schema);
                reference = std::make_shared<const EncodedTable>(
                    gen.sample(cfg.reference_rows, derive_seed(cfg.seed, 2)));
            } else {
                if (cfg.data_path.empty()) {
                    fail(ErrorCode::InvalidArgument, "non-private fine-tuning needs --data");
                }
                auto table = std::make_shared<const EncodedTable>(load_csv(cfg.data_path, schema));
                targets = measure_targets(
                    *table, marginal_workload(schema, WorkloadMode::ThreeWayWithLabel,
                                              cfg.workload_degrade));
                reference = table;
            }
            CompileOptions opts;
            opts.lambda_overrides = cfg.lambda_overrides;
            opts.default_lambda = cfg.default_lambda;
            auto regs = compile_program(program, reference, opts);
            FinetuneConfig fcfg;
            fcfg.batch_size = cfg.finetune_batch;
            fcfg.epochs = cfg.finetune_epochs;
            fcfg.group_size = cfg.group_size;
            fcfg.seed = derive_seed(cfg.seed, 3);
            auto history = finetune(gen, targets, regs, fcfg);
            std::filesystem::create_directories(cfg.out_dir);
            std::ofstream log(cfg.out_dir + "/finetune_log.csv");
            log << "epoch,lm,lr";
            for (const auto& reg : regs) {
                log << "," << reg.name << "_loss," << reg.name << "_verify";
            }
            log << "\n";
            for (const auto& row : history) {
                log << row.epoch << "," << row.lm << "," << row.lr;
                for (std::size_t i = 0; i < regs.size(); ++i) {
                    log << "," << (i < row.spec_loss.size() ? row.spec_loss[i] : 0.0) << ","
                        << (i < row.spec_verify.size() ? row.spec_verify[i].value : 0.0);
                }
                log << "\n";
            }
            gen.save(cfg.out_dir + "/finetuned.ckpt");
            std::cout << "checkpoint: " << cfg.out_dir << "/finetuned.ckpt\n";
            return 0;
        }

        if (sample->parsed()) {
            Schema schema = Schema::load(cfg.schema_path);
            Generator gen = Generator::load(ckpt_in, schema);
            std::vector<RowPredicate> predicates;
            if (!cfg.program_path.empty()) {
                auto program = spec::validate(spec::parse(read_file(cfg.program_path)), schema);
                auto regs = compile_program(program, nullptr, CompileOptions{});
                for (auto& reg : regs) {
                    if (reg.hard_row_predicate) predicates.push_back(reg.hard_row_predicate);
                }
            }
            RejectionConfig rj;
            rj.max_rounds = cfg.rejection_max_rounds;
            EncodedTable t = predicates.empty()
                                 ? gen.sample(cfg.n_samples, cfg.seed)
                                 : rejection_sample(gen, predicates, cfg.n_samples, cfg.seed, rj);
            write_csv(sample_out, t);
            std::cout << "wrote " << t.num_rows() << " rows to " << sample_out << "\n";
            return 0;
        }

        if (eval->parsed()) {
            Schema schema = Schema::load(cfg.schema_path);
            EncodedTable synthetic = load_csv(synth_csv, schema);
            EncodedTable test = load_csv(cfg.test_path, schema);
            spec::TypedProgram program;
            if (!cfg.program_path.empty()) {
                program = spec::validate(spec::parse(read_file(cfg.program_path)), schema);
            } else {
                program.schema = &schema;
            }
            auto report = evaluate_tables(synthetic, test, program, cfg, cfg.seed);
            report.rows.emplace_back("eval_split", "held-out");
            std::cout << report.to_text();
            if (!cfg.out_dir.empty()) {
                std::filesystem::create_directories(cfg.out_dir);
                std::ofstream csv(cfg.out_dir + "/report.csv");
                csv << report.to_csv();
                std::ofstream txt(cfg.out_dir + "/report.txt");
                txt << report.to_text();
            }
            return 0;
        }

        if (tune->parsed()) {
            Schema schema = Schema::load(cfg.schema_path);
            EncodedTable table = load_csv(cfg.data_path, schema);
            auto program = spec::validate(spec::parse(read_file(cfg.program_path)), schema);
            auto workload = marginal_workload(
                schema, program.dp ? WorkloadMode::All3Way : WorkloadMode::ThreeWayWithLabel,
                cfg.workload_degrade);
            auto targets = measure_targets(table, workload);
            Generator gen(schema, cfg.seed);
            PretrainConfig pre;
            pre.batch_size = cfg.pretrain_batch;
            pre.epochs = cfg.pretrain_epochs;
            pre.group_size = cfg.group_size;
            pre.seed = derive_seed(cfg.seed, 1);
            train_to_targets(gen, targets, pre);

            // one-axis sweeps: vary the named spec over its grid, others keep
            // their program weight (or the default)
            std::vector<std::string> spec_names;
            std::vector<double> base;
            for (const auto& c : program.commands) {
                if (c.kind == spec::Command::Kind::Dp) continue;
                spec_names.push_back(c.name);
                base.push_back(c.weight ? *c.weight : cfg.default_lambda);
            }
            std::vector<std::vector<double>> candidates;
            if (grid_raw.empty()) candidates.push_back(base);
            for (const auto& g : grid_raw) {
                const auto eq = g.find('=');
                if (eq == std::string::npos) {
                    fail(ErrorCode::InvalidArgument, "--grid expects name=v1,v2,... got " + g);
                }
                const std::string name = g.substr(0, eq);
                auto it = std::find(spec_names.begin(), spec_names.end(), name);
                if (it == spec_names.end()) {
                    fail(ErrorCode::InvalidArgument, "unknown spec " + name);
                }
                const std::size_t axis = static_cast<std::size_t>(it - spec_names.begin());
                std::istringstream vals(g.substr(eq + 1));
                std::string tok;
                while (std::getline(vals, tok, ',')) {
                    auto cand = base;
                    cand[axis] = std::stod(tok);
                    candidates.push_back(std::move(cand));
                }
            }

            TuneConfig tc;
            tc.k = tune_k;
            tc.all_folds = all_folds;
            tc.finetune.batch_size = cfg.finetune_batch;
            tc.finetune.epochs = cfg.finetune_epochs;
            tc.finetune.group_size = cfg.group_size;
            tc.finetune.seed = derive_seed(cfg.seed, 3);
            auto rows = tune_weights(gen, program, table, targets, candidates, tc);

            std::ostringstream csv;
            csv << "fold";
            for (const auto& name : spec_names) csv << ",lambda_" << name;
            csv << ",utility_accuracy";
            for (const auto& name : spec_names) csv << "," << name << "_verify";
            csv << "\n";
            for (const auto& row : rows) {
                csv << row.fold;
                for (double l : row.lambdas) csv << "," << l;
                csv << "," << row.utility_accuracy;
                for (const auto& v : row.verify) csv << "," << v.value;
                csv << "\n";
            }
            std::cout << csv.str();
            if (!cfg.out_dir.empty() && cfg.out_dir != "runs") {
                std::filesystem::create_directories(cfg.out_dir);
                std::ofstream out(cfg.out_dir + "/tune.csv");
                out << csv.str();
            }
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
