#ifndef CUTS_SAMPLE_EVAL_HPP
#define CUTS_SAMPLE_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/generator.hpp"
#include "cuts/table.hpp"

namespace cuts {

// ---- feature extraction -------------------------------------------------

// One-hot feature matrix excluding the target block (and optionally the
// protected block). One-hot blocks span the constant vector, so the logistic
// models below need no explicit intercept.
inline Matrix feature_matrix(const EncodedTable& table, std::size_t target_col,
                             std::optional<std::size_t> drop_col = std::nullopt) {
    const Schema& schema = table.schema();
    std::vector<std::size_t> keep_offsets;
    std::size_t width = 0;
    for (std::size_t k = 0; k < schema.num_features(); ++k) {
        if (k == target_col || (drop_col && k == *drop_col)) continue;
        width += schema.block_size(k);
    }
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(table.num_rows()),
                            static_cast<Eigen::Index>(width));
    for (std::size_t i = 0; i < table.num_rows(); ++i) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < schema.num_features(); ++k) {
            if (k == target_col || (drop_col && k == *drop_col)) continue;
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col + table.cell(i, k))) = 1.0;
            col += schema.block_size(k);
        }
    }
    return x;
}

// Binary labels: category index 1 of the target column is the positive class.
inline Vector label_vector(const EncodedTable& table, std::size_t target_col) {
    Vector y(static_cast<Eigen::Index>(table.num_rows()));
    for (std::size_t i = 0; i < table.num_rows(); ++i) {
        y[static_cast<Eigen::Index>(i)] = table.cell(i, target_col) == 1 ? 1.0 : 0.0;
    }
    return y;
}

// ---- internal logistic evaluator -----------------------------------------

struct LogisticEvalConfig {
    double l2 = 1e-3;
    long steps = 500;
    double lr = 0.5;
};

// Deterministic L2-regularized logistic regression: zero init, full-batch
// gradient steps.
inline Vector train_logistic(const Matrix& x, const Vector& y, const LogisticEvalConfig& cfg) {
    Vector w = Vector::Zero(x.cols());
    const double n = static_cast<double>(x.rows());
    for (long t = 0; t < cfg.steps; ++t) {
        Vector z = x * w;
        Vector p = z.unaryExpr([](double v) {
            return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        });
        Vector g = x.transpose() * (p - y) / n + cfg.l2 * w;
        w -= cfg.lr * g;
    }
    return w;
}

inline std::vector<int> logistic_predict(const Matrix& x, const Vector& w) {
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    Vector z = x * w;
    for (Eigen::Index i = 0; i < z.size(); ++i) out[static_cast<std::size_t>(i)] = z[i] >= 0.0 ? 1 : 0;
    return out;
}

struct DownstreamScore {
    double accuracy = 0.0;
    double balanced_accuracy = 0.0;
};

// Train on `train`, score on `test`; the built-in stand-in for an external
// gradient-boosted evaluator.
inline DownstreamScore downstream_eval(const EncodedTable& train, const EncodedTable& test,
                                       std::size_t target_col,
                                       const LogisticEvalConfig& cfg = LogisticEvalConfig{}) {
    Vector y_train = label_vector(train, target_col);
    const double mean = y_train.size() ? y_train.mean() : 0.0;
    if (train.num_rows() == 0 || mean == 0.0 || mean == 1.0) {
        fail(ErrorCode::SingleClassTrain, "training labels are single-class");
    }
    Vector w = train_logistic(feature_matrix(train, target_col), y_train, cfg);
    auto preds = logistic_predict(feature_matrix(test, target_col), w);
    Vector y_test = label_vector(test, target_col);
    double correct = 0, tp = 0, tn = 0, pos = 0, neg = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int truth = y_test[static_cast<Eigen::Index>(i)] > 0.5 ? 1 : 0;
        if (preds[i] == truth) ++correct;
        if (truth == 1) {
            ++pos;
            if (preds[i] == 1) ++tp;
        } else {
            ++neg;
            if (preds[i] == 0) ++tn;
        }
    }
    DownstreamScore s;
    const double n = static_cast<double>(preds.size());
    s.accuracy = n > 0 ? correct / n : 0.0;
    const double tpr = pos > 0 ? tp / pos : 0.0;
    const double tnr = neg > 0 ? tn / neg : 0.0;
    s.balanced_accuracy = 0.5 * (tpr + tnr);
    return s;
}

// ---- fairness metrics -----------------------------------------------------

struct FairnessMetrics {
    std::optional<double> demographic_parity;
    std::optional<double> equalized_odds;
    std::optional<double> equality_of_opportunity;
};

// Group-conditional prediction-rate gaps; any gap whose conditioning cell is
// empty is left undefined rather than reported as zero.
inline FairnessMetrics fairness_metrics(const std::vector<int>& predictions,
                                        const EncodedTable& table, std::size_t protected_col,
                                        std::size_t target_col) {
    if (predictions.size() != table.num_rows()) {
        fail(ErrorCode::LengthMismatch, "predictions do not match table rows");
    }
    double sum_s[2] = {0, 0}, cnt_s[2] = {0, 0};
    double sum_sy[2][2] = {{0, 0}, {0, 0}}, cnt_sy[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < table.num_rows(); ++i) {
        const int s = table.cell(i, protected_col) == 1 ? 1 : 0;
        const int y = table.cell(i, target_col) == 1 ? 1 : 0;
        sum_s[s] += predictions[i];
        cnt_s[s] += 1;
        sum_sy[s][y] += predictions[i];
        cnt_sy[s][y] += 1;
    }
    FairnessMetrics m;
    if (cnt_s[0] > 0 && cnt_s[1] > 0) {
        m.demographic_parity = std::abs(sum_s[0] / cnt_s[0] - sum_s[1] / cnt_s[1]);
    }
    auto gap_at = [&](int y) -> std::optional<double> {
        if (cnt_sy[0][y] == 0 || cnt_sy[1][y] == 0) return std::nullopt;
        return std::abs(sum_sy[0][y] / cnt_sy[0][y] - sum_sy[1][y] / cnt_sy[1][y]);
    };
    auto g0 = gap_at(0), g1 = gap_at(1);
    if (g0 && g1) m.equalized_odds = std::max(*g0, *g1);
    m.equality_of_opportunity = g1;
    return m;
}

// ---- rejection sampling -----------------------------------------------------

using RowPredicate = std::function<bool(const EncodedTable&, std::size_t)>;

struct RejectionConfig {
    std::size_t max_rounds = 50;
    double min_acceptance = 1e-4;  // measured after 3 rounds
};

// Draw batches, keep rows passing every hard predicate, until n rows are
// collected. The result satisfies all predicates by construction.
inline EncodedTable rejection_sample(const Generator& gen, const std::vector<RowPredicate>& preds,
                                     std::size_t n, std::uint64_t seed,
                                     const RejectionConfig& cfg = RejectionConfig{}) {
    Rng rng(seed);
    std::vector<std::uint32_t> cells;
    const std::size_t k = gen.schema().num_features();
    cells.reserve(n * k);
    std::size_t kept = 0, seen = 0;
    const std::size_t batch = std::max<std::size_t>(n, 10000);
    for (std::size_t round = 0; round < cfg.max_rounds && kept < n; ++round) {
        auto sample = gen.sample(batch, rng());
        for (std::size_t i = 0; i < sample.num_rows() && kept < n; ++i) {
            ++seen;
            bool ok = true;
            for (const auto& p : preds) {
                if (!p(sample, i)) {
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
            for (std::size_t c = 0; c < k; ++c) cells.push_back(sample.cell(i, c));
            ++kept;
        }
        if (round + 1 >= 3 && kept < n) {
            const double rate = static_cast<double>(kept) / static_cast<double>(seen);
            if (rate < cfg.min_acceptance) {
                fail(ErrorCode::AcceptanceTooLow,
                     "acceptance rate " + std::to_string(rate) + " after " +
                         std::to_string(round + 1) + " rounds");
            }
        }
    }
    if (kept < n) {
        fail(ErrorCode::AcceptanceTooLow,
             "collected " + std::to_string(kept) + " of " + std::to_string(n) + " rows in " +
                 std::to_string(cfg.max_rounds) + " rounds");
    }
    return EncodedTable(gen.schema(), std::move(cells));
}

// ---- export for external evaluators ----------------------------------------

struct ExportManifest {
    std::uint64_t schema_hash = 0;
    std::uint64_t seed = 0;
    std::size_t train_rows = 0;
    std::size_t test_rows = 0;
};

inline ExportManifest export_for_external_eval(const EncodedTable& train, const EncodedTable& test,
                                               const std::string& dir, std::uint64_t seed) {
    write_csv(dir + "/synthetic_train.csv", train);
    write_csv(dir + "/real_test.csv", test);
    ExportManifest m;
    m.schema_hash = train.schema().hash();
    m.seed = seed;
    m.train_rows = train.num_rows();
    m.test_rows = test.num_rows();
    std::ofstream out(dir + "/manifest.json");
    if (!out) fail(ErrorCode::IoError, "cannot write manifest in " + dir);
    out << "{\n  \"schema_hash\": \"" << std::hex << m.schema_hash << std::dec << "\",\n"
        << "  \"seed\": " << m.seed << ",\n"
        << "  \"train_rows\": " << m.train_rows << ",\n"
        << "  \"test_rows\": " << m.test_rows << "\n}\n";
    return m;
}

}  // namespace cuts

#endif  // CUTS_SAMPLE_EVAL_HPP
