#ifndef CUTS_PIPELINE_HPP
#define CUTS_PIPELINE_HPP

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuts/compile.hpp"
#include "cuts/generator.hpp"
#include "cuts/marginal.hpp"
#include "cuts/pretrain.hpp"
#include "cuts/privacy.hpp"
#include "cuts/sample_eval.hpp"
#include "cuts/schema.hpp"
#include "cuts/spec/format.hpp"
#include "cuts/spec/parser.hpp"
#include "cuts/spec/validate.hpp"
#include "cuts/table.hpp"

namespace cuts {

struct RunConfig {
    std::string data_path;
    std::string schema_path;
    std::string program_path;
    std::string test_path;  // optional held-out data for evaluation
    std::string out_dir = "runs";
    std::uint64_t seed = 42;

    // stage knobs; defaults follow the training recipe in the README
    long pretrain_epochs = 2000;
    Eigen::Index pretrain_batch = 15000;
    std::size_t group_size = 16;
    long finetune_epochs = 500;
    Eigen::Index finetune_batch = 15000;
    long dp_refit_epochs = 1000;
    Eigen::Index dp_batch = 1000;
    long dp_max_rounds = 0;
    bool spend_remainder = true;
    bool workload_degrade = false;

    std::size_t n_samples = 10000;
    std::size_t reference_rows = 15000;  // DP reference sample size
    std::size_t rejection_max_rounds = 50;
    int repeats = 1;  // fine-tune retrainings for aggregate stats
    int samples = 1;  // samples per retraining for aggregate stats

    std::map<std::string, double> lambda_overrides;
    double default_lambda = 1.0;
};

namespace pipeline_detail {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) fail(ErrorCode::IoError, "cannot write " + tmp.string());
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

inline std::string hex16(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setfill('0') << std::setw(16) << v;
    return s.str();
}

inline std::string fmt_double(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

}  // namespace pipeline_detail

// ---- marginal-target persistence ---------------------------------------------
// DP runs fine-tune against noisy measurements rather than the data; the
// measurement set is an artifact so later stages can run standalone.

inline std::string targets_to_csv(const std::vector<MarginalTarget>& targets,
                                  const Schema& schema) {
    std::string out = "features,values\n";
    for (const auto& t : targets) {
        std::string names;
        for (std::size_t i = 0; i < t.spec.feature_indices.size(); ++i) {
            if (i) names += "*";
            names += schema.column(t.spec.feature_indices[i]).name;
        }
        out += names + ",";
        for (Eigen::Index j = 0; j < t.target.size(); ++j) {
            if (j) out += " ";
            out += pipeline_detail::fmt_double(t.target[j]);
        }
        out += "\n";
    }
    return out;
}

inline std::vector<MarginalTarget> targets_from_csv(const std::string& text,
                                                    const Schema& schema) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::IoError, "empty measurement file");
    std::vector<MarginalTarget> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) fail(ErrorCode::IoError, "bad measurement row");
        MarginalSpec spec;
        std::istringstream names(line.substr(0, comma));
        std::string name;
        while (std::getline(names, name, '*')) {
            auto idx = schema.find_column(name);
            if (!idx) fail(ErrorCode::UnknownColumn, "measurement references " + name);
            spec.feature_indices.push_back(*idx);
        }
        std::istringstream values(line.substr(comma + 1));
        std::vector<double> vals;
        double v;
        while (values >> v) vals.push_back(v);
        Vector target(static_cast<Eigen::Index>(vals.size()));
        for (std::size_t j = 0; j < vals.size(); ++j) target[static_cast<Eigen::Index>(j)] = vals[j];
        out.push_back(make_target(schema, spec, std::move(target)));
    }
    return out;
}

// ---- evaluation report -------------------------------------------------------

struct EvalReport {
    // ordered metric rows; regenerated bit-exactly from the emitted CSVs
    std::vector<std::pair<std::string, std::string>> rows;

    std::string to_csv() const {
        std::string out = "metric,value\n";
        for (const auto& [k, v] : rows) out += k + "," + v + "\n";
        return out;
    }

    std::string to_text() const {
        std::ostringstream out;
        out << "evaluation report\n";
        out << "NOTE: downstream metrics use the built-in logistic evaluator; use\n";
        out << "      the export directory to reproduce results with an external\n";
        out << "      gradient-boosted classifier.\n\n";
        std::size_t width = 0;
        for (const auto& [k, v] : rows) width = std::max(width, k.size());
        for (const auto& [k, v] : rows) {
            out << "  " << k << std::string(width - k.size() + 2, ' ') << v << "\n";
        }
        return out.str();
    }
};

// Metrics of one synthetic sample against an evaluation table. Everything is
// recomputed from the two tables (which the pipeline reloads from the emitted
// CSVs).
inline EvalReport evaluate_tables(const EncodedTable& synthetic, const EncodedTable& eval_table,
                                  const spec::TypedProgram& program, const RunConfig& cfg,
                                  std::uint64_t sample_seed) {
    EvalReport report;
    auto add = [&](const std::string& k, const std::string& v) { report.rows.emplace_back(k, v); };
    auto addf = [&](const std::string& k, double v) { add(k, pipeline_detail::fmt_double(v)); };

    add("synthetic_rows", std::to_string(synthetic.num_rows()));
    add("eval_rows", std::to_string(eval_table.num_rows()));
    add("sample_seed", std::to_string(sample_seed));

    const Schema& schema = *program.schema;
    auto workload = marginal_workload(
        schema, program.dp ? WorkloadMode::All3Way : WorkloadMode::ThreeWayWithLabel,
        cfg.workload_degrade);
    double tv_sum = 0.0, tv_max = 0.0;
    for (const auto& spec : workload) {
        const double tv = tv_distance(marginal(eval_table, spec, true),
                                      marginal(synthetic, spec, true));
        tv_sum += tv;
        tv_max = std::max(tv_max, tv);
    }
    addf("workload_mean_tv", tv_sum / static_cast<double>(workload.size()));
    addf("workload_max_tv", tv_max);

    // per-spec verifiers, with the eval table as reference
    auto reference = std::make_shared<const EncodedTable>(eval_table);
    CompileOptions opts;
    opts.lambda_overrides = cfg.lambda_overrides;
    opts.default_lambda = cfg.default_lambda;
    auto regs = compile_program(program, reference, opts);
    for (const auto& reg : regs) {
        auto v = reg.verifier(synthetic);
        addf(reg.name + "_" + v.metric, v.value);
        add(reg.name + "_pass", v.pass ? "yes" : "no");
    }

    // downstream utility and fairness on the designated columns
    if (auto label = schema.label_column()) {
        try {
            auto score = downstream_eval(synthetic, eval_table, *label);
            addf("downstream_accuracy", score.accuracy);
            addf("downstream_balanced_accuracy", score.balanced_accuracy);
            if (auto prot = schema.protected_column()) {
                Vector w = train_logistic(feature_matrix(synthetic, *label),
                                          label_vector(synthetic, *label), LogisticEvalConfig{});
                auto preds = logistic_predict(feature_matrix(eval_table, *label), w);
                auto fm = fairness_metrics(preds, eval_table, *prot, *label);
                add("delta_dp", fm.demographic_parity
                                    ? pipeline_detail::fmt_double(*fm.demographic_parity)
                                    : "undefined");
                add("delta_eo", fm.equalized_odds
                                    ? pipeline_detail::fmt_double(*fm.equalized_odds)
                                    : "undefined");
                add("delta_eoo", fm.equality_of_opportunity
                                     ? pipeline_detail::fmt_double(*fm.equality_of_opportunity)
                                     : "undefined");
            }
        } catch (const Error& e) {
            add("downstream_error", std::string(error_code_name(e.code())));
        }
    }
    return report;
}

// ---- pipeline -------------------------------------------------------------------

struct RunArtifacts {
    std::filesystem::path run_dir;
    std::filesystem::path checkpoint;
    std::filesystem::path synthetic_csv;
    std::filesystem::path report_txt;
    std::filesystem::path report_csv;
    std::filesystem::path manifest;
    EvalReport report;
};

// End-to-end driver. Stage artifacts are written atomically into a run
// directory keyed by the manifest hash, so identical inputs reproduce
// identical outputs in place.
inline RunArtifacts run_pipeline(const RunConfig& cfg) {
    using pipeline_detail::atomic_write;
    const std::string schema_text = pipeline_detail::read_file(cfg.schema_path);
    const std::string program_text = pipeline_detail::read_file(cfg.program_path);
    const std::string data_text = pipeline_detail::read_file(cfg.data_path);

    Schema schema = Schema::from_json(schema_text);
    auto program_ast = spec::parse(program_text);
    auto program = spec::validate(program_ast, schema);
    std::istringstream data_stream(data_text);
    EncodedTable table = load_csv_stream(data_stream, schema, cfg.data_path);

    // manifest (also names the run directory)
    nlohmann::ordered_json manifest;
    manifest["schema_hash"] = pipeline_detail::hex16(fnv1a(schema_text));
    manifest["program_hash"] = pipeline_detail::hex16(fnv1a(program_text));
    manifest["data_hash"] = pipeline_detail::hex16(fnv1a(data_text));
    manifest["seed"] = cfg.seed;
    manifest["mode"] = program.dp ? "dp" : "nonprivate";
    manifest["pretrain_epochs"] = cfg.pretrain_epochs;
    manifest["pretrain_batch"] = cfg.pretrain_batch;
    manifest["finetune_epochs"] = cfg.finetune_epochs;
    manifest["finetune_batch"] = cfg.finetune_batch;
    manifest["dp_refit_epochs"] = cfg.dp_refit_epochs;
    manifest["dp_batch"] = cfg.dp_batch;
    manifest["dp_max_rounds"] = cfg.dp_max_rounds;
    manifest["spend_remainder"] = cfg.spend_remainder;
    manifest["n_samples"] = cfg.n_samples;
    manifest["repeats"] = cfg.repeats;
    manifest["samples"] = cfg.samples;
    manifest["group_size"] = cfg.group_size;
    manifest["reference_rows"] = cfg.reference_rows;
    manifest["default_lambda"] = cfg.default_lambda;
    nlohmann::ordered_json overrides = nlohmann::ordered_json::object();
    for (const auto& [k, v] : cfg.lambda_overrides) overrides[k] = v;
    manifest["lambda_overrides"] = overrides;

    const std::uint64_t run_key = fnv1a(manifest.dump());
    RunArtifacts art;
    art.run_dir = std::filesystem::path(cfg.out_dir) / ("run-" + pipeline_detail::hex16(run_key));
    std::filesystem::create_directories(art.run_dir);

    // ---- stage: pretraining -------------------------------------------------
    Generator gen(schema, cfg.seed);
    std::vector<MarginalTarget> targets;  // what fine-tuning matches
    std::string ledger_csv;
    {
        if (program.dp) {
            auto workload = marginal_workload(schema, WorkloadMode::All3Way, cfg.workload_degrade);
            auto ledger = PrivacyLedger::from_eps_delta(program.epsilon, program.delta);
            DpPretrainConfig dp;
            dp.batch_size = cfg.dp_batch;
            dp.refit_epochs = cfg.dp_refit_epochs;
            dp.group_size = cfg.group_size;
            dp.seed = derive_seed(cfg.seed, 1);
            dp.spend_remainder = cfg.spend_remainder;
            dp.max_rounds = cfg.dp_max_rounds;
            auto result = dp_pretrain(gen, table, workload, ledger, dp);
            if (!ledger.audit()) fail(ErrorCode::InvalidBudget, "ledger audit failed");
            targets = std::move(result.measurements);
            std::ostringstream lcsv;
            ledger.write_csv(lcsv, schema);
            ledger_csv = lcsv.str();
            atomic_write(art.run_dir / "ledger.csv", ledger_csv);
            atomic_write(art.run_dir / "measurements.csv", targets_to_csv(targets, schema));
            std::string log = "epoch,mean_tv,lr\n";
            for (const auto& row : result.last_refit_history) {
                log += std::to_string(row.epoch) + "," + pipeline_detail::fmt_double(row.mean_tv) +
                       "," + pipeline_detail::fmt_double(row.lr) + "\n";
            }
            atomic_write(art.run_dir / "pretrain_log.csv", log);
        } else {
            auto workload =
                marginal_workload(schema, WorkloadMode::ThreeWayWithLabel, cfg.workload_degrade);
            targets = measure_targets(table, workload);
            PretrainConfig pre;
            pre.batch_size = cfg.pretrain_batch;
            pre.epochs = cfg.pretrain_epochs;
            pre.group_size = cfg.group_size;
            pre.seed = derive_seed(cfg.seed, 1);
            auto history = train_to_targets(gen, targets, pre);
            std::string log = "epoch,mean_tv,lr\n";
            for (const auto& row : history) {
                log += std::to_string(row.epoch) + "," + pipeline_detail::fmt_double(row.mean_tv) +
                       "," + pipeline_detail::fmt_double(row.lr) + "\n";
            }
            atomic_write(art.run_dir / "pretrain_log.csv", log);
        }
    }
    art.checkpoint = art.run_dir / "pretrained.ckpt";
    gen.save(art.checkpoint.string());

    // ---- stage: reference dataset --------------------------------------------
    // DP mode never touches the original rows from here on.
    std::shared_ptr<const EncodedTable> reference;
    if (program.dp) {
        const std::size_t n_ref = std::min<std::size_t>(cfg.reference_rows, 100000);
        reference = std::make_shared<const EncodedTable>(
            gen.sample(n_ref, derive_seed(cfg.seed, 2)));
    } else {
        reference = std::make_shared<const EncodedTable>(table);
    }

    // ---- stage: fine-tuning ----------------------------------------------------
    CompileOptions copts;
    copts.lambda_overrides = cfg.lambda_overrides;
    copts.default_lambda = cfg.default_lambda;
    auto regs = compile_program(program, reference, copts);

    const bool has_finetune = !regs.empty();
    Generator final_gen = gen;
    if (has_finetune) {
        FinetuneConfig ft;
        ft.batch_size = cfg.finetune_batch;
        ft.epochs = cfg.finetune_epochs;
        ft.group_size = cfg.group_size;
        ft.seed = derive_seed(cfg.seed, 3);
        auto history = finetune(final_gen, targets, regs, ft);
        std::string log = "epoch,lm,lr";
        for (const auto& reg : regs) log += "," + reg.name + "_loss," + reg.name + "_verify";
        log += "\n";
        for (const auto& row : history) {
            log += std::to_string(row.epoch) + "," + pipeline_detail::fmt_double(row.lm) + "," +
                   pipeline_detail::fmt_double(row.lr);
            for (std::size_t i = 0; i < regs.size(); ++i) {
                log += "," + pipeline_detail::fmt_double(i < row.spec_loss.size() ? row.spec_loss[i] : 0.0);
                log += "," + (i < row.spec_verify.size()
                                  ? pipeline_detail::fmt_double(row.spec_verify[i].value)
                                  : std::string("nan"));
            }
            log += "\n";
        }
        atomic_write(art.run_dir / "finetune_log.csv", log);
        final_gen.save((art.run_dir / "finetuned.ckpt").string());
        art.checkpoint = art.run_dir / "finetuned.ckpt";
    }

    // ---- stage: sampling (with rejection for per-row logic) -------------------
    std::vector<RowPredicate> predicates;
    for (const auto& reg : regs) {
        if (reg.hard_row_predicate) predicates.push_back(reg.hard_row_predicate);
    }
    const std::uint64_t sample_seed = derive_seed(cfg.seed, 4);
    RejectionConfig rj;
    rj.max_rounds = cfg.rejection_max_rounds;
    EncodedTable synthetic = predicates.empty()
                                 ? final_gen.sample(cfg.n_samples, sample_seed)
                                 : rejection_sample(final_gen, predicates, cfg.n_samples,
                                                    sample_seed, rj);
    {
        std::ostringstream csv;
        write_csv_stream(csv, synthetic);
        atomic_write(art.run_dir / "synthetic.csv", csv.str());
    }
    art.synthetic_csv = art.run_dir / "synthetic.csv";

    // ---- stage: evaluation (recomputed from the emitted artifacts) -----------
    EncodedTable synth_reloaded = load_csv(art.synthetic_csv.string(), schema);
    EncodedTable eval_table = cfg.test_path.empty()
                                  ? table
                                  : load_csv(cfg.test_path, schema);
    art.report = evaluate_tables(synth_reloaded, eval_table, program, cfg, sample_seed);
    if (cfg.test_path.empty()) {
        art.report.rows.emplace_back("eval_split", "training-data (no --test given)");
    } else {
        art.report.rows.emplace_back("eval_split", "held-out");
    }
    atomic_write(art.run_dir / "report.csv", art.report.to_csv());
    atomic_write(art.run_dir / "report.txt", art.report.to_text());
    art.report_csv = art.run_dir / "report.csv";
    art.report_txt = art.run_dir / "report.txt";

    // ---- aggregate stats over repeats x samples --------------------------------
    if (cfg.repeats > 1 || cfg.samples > 1) {
        std::map<std::string, std::vector<double>> series;
        for (int r = 0; r < cfg.repeats; ++r) {
            Generator g_rep = gen;
            if (has_finetune) {
                auto regs_rep = compile_program(program, reference, copts);
                FinetuneConfig ft;
                ft.batch_size = cfg.finetune_batch;
                ft.epochs = cfg.finetune_epochs;
                ft.group_size = cfg.group_size;
                ft.seed = derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(r));
                finetune(g_rep, targets, regs_rep, ft);
            }
            for (int s = 0; s < cfg.samples; ++s) {
                const std::uint64_t seed_rs =
                    derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(r * cfg.samples + s));
                EncodedTable sample_rs =
                    predicates.empty() ? g_rep.sample(cfg.n_samples, seed_rs)
                                       : rejection_sample(g_rep, predicates, cfg.n_samples,
                                                          seed_rs, rj);
                auto rep = evaluate_tables(sample_rs, eval_table, program, cfg, seed_rs);
                for (const auto& [k, v] : rep.rows) {
                    char* end = nullptr;
                    const double x = std::strtod(v.c_str(), &end);
                    if (end != v.c_str() && *end == '\0') series[k].push_back(x);
                }
            }
        }
        std::string agg = "metric,mean,std,n\n";
        for (const auto& [k, vs] : series) {
            double mean = 0.0;
            for (double v : vs) mean += v;
            mean /= static_cast<double>(vs.size());
            double var = 0.0;
            for (double v : vs) var += (v - mean) * (v - mean);
            var = vs.size() > 1 ? var / static_cast<double>(vs.size() - 1) : 0.0;
            agg += k + "," + pipeline_detail::fmt_double(mean) + "," +
                   pipeline_detail::fmt_double(std::sqrt(var)) + "," + std::to_string(vs.size()) +
                   "\n";
        }
        atomic_write(art.run_dir / "aggregates.csv", agg);
    }

    // export for external classifiers
    auto export_dir = art.run_dir / "export";
    std::filesystem::create_directories(export_dir);
    export_for_external_eval(synth_reloaded, eval_table, export_dir.string(), sample_seed);

    atomic_write(art.run_dir / "manifest.json", manifest.dump(2) + "\n");
    art.manifest = art.run_dir / "manifest.json";
    return art;
}

}  // namespace cuts

#endif  // CUTS_PIPELINE_HPP
