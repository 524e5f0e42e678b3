#ifndef CUTS_COMPILE_HPP
#define CUTS_COMPILE_HPP

#include <algorithm>
#include <atomic>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/generator.hpp"
#include "cuts/pretrain.hpp"
#include "cuts/sample_eval.hpp"
#include "cuts/spec/validate.hpp"
#include "cuts/tape.hpp"

namespace cuts {

struct CompileOptions {
    double stat_tolerance = 0.05;  // |residual| <= tol * scale passes
    double margin = 1e-6;          // strict-inequality margin
    double eps_guard = 1e-12;      // log/div guard inside statistical operators
    double default_lambda = 1.0;
    std::map<std::string, double> lambda_overrides;  // CLI; wins over PARAM

    double resolve_lambda(const std::string& name, std::optional<double> param) const {
        auto it = lambda_overrides.find(name);
        if (it != lambda_overrides.end()) return it->second;
        if (param) return *param;
        return default_lambda;
    }
};

struct VerifierResult {
    double value = 0.0;
    bool pass = false;
    std::string metric;
};

// A specification lowered to (i) a differentiable loss on a generated batch,
// (ii) a tape-free verifier on hard samples, and for per-row logic (iii) a
// predicate usable for rejection sampling.
struct CompiledRegularizer {
    std::string name;
    spec::Command::Kind kind = spec::Command::Kind::RowConstraint;
    spec::DownstreamKind ds_kind = spec::DownstreamKind::DemographicParity;
    double weight = 1.0;
    std::function<grad::Node(grad::Tape&, grad::Node)> loss_builder;
    std::function<VerifierResult(const EncodedTable&)> verifier;
    RowPredicate hard_row_predicate;  // set for row constraints / implications
    std::shared_ptr<std::atomic<long>> degenerate_conditions =
        std::make_shared<std::atomic<long>>(0);
};

// ---- differentiable row masks ----------------------------------------------

// b_phi over the batch: leaf = X m^T with m the 0/1 column mask; AND = a*b;
// OR = a + b - a*b. Entries are exactly {0,1} on hard one-hot input.
inline grad::Node row_mask(grad::Tape& tape, grad::Node batch, const spec::TypedRowExpr& expr,
                           const Schema& schema) {
    switch (expr.kind) {
    case spec::TypedRowExpr::Kind::Leaf: {
        Matrix m = Matrix::Zero(static_cast<Eigen::Index>(schema.one_hot_width()), 1);
        const Eigen::Index off = static_cast<Eigen::Index>(schema.block_offset(expr.feature));
        for (std::size_t j = 0; j < expr.allowed.size(); ++j) {
            if (expr.allowed[j]) m(off + static_cast<Eigen::Index>(j), 0) = 1.0;
        }
        return tape.matmul(batch, tape.constant(std::move(m)));
    }
    case spec::TypedRowExpr::Kind::And: {
        auto l = row_mask(tape, batch, *expr.lhs, schema);
        auto r = row_mask(tape, batch, *expr.rhs, schema);
        return tape.mul(l, r);
    }
    case spec::TypedRowExpr::Kind::Or: {
        auto l = row_mask(tape, batch, *expr.lhs, schema);
        auto r = row_mask(tape, batch, *expr.rhs, schema);
        return tape.sub(tape.add(l, r), tape.mul(l, r));
    }
    }
    fail(ErrorCode::ShapeMismatch, "unreachable row mask kind");
}

// ---- row constraints and implications ----------------------------------------

// Losses are normalized by batch size so that lambda does not depend on B.
inline CompiledRegularizer compile_row_constraint(const spec::TypedCommand& cmd,
                                                  const Schema& schema) {
    CompiledRegularizer reg;
    reg.name = cmd.name;
    reg.kind = spec::Command::Kind::RowConstraint;
    auto expr = cmd.expr;
    auto negated = spec::negate_row_expr(*expr);
    reg.loss_builder = [negated, &schema](grad::Tape& tape, grad::Node batch) {
        return tape.mean(row_mask(tape, batch, *negated, schema));
    };
    reg.verifier = [expr](const EncodedTable& t) {
        std::size_t sat = 0;
        for (std::size_t i = 0; i < t.num_rows(); ++i) {
            if (spec::eval_row_expr(*expr, t, i)) ++sat;
        }
        VerifierResult r;
        r.value = t.num_rows() ? static_cast<double>(sat) / static_cast<double>(t.num_rows()) : 1.0;
        r.pass = r.value >= 0.99;
        r.metric = "csr";
        return r;
    };
    reg.hard_row_predicate = [expr](const EncodedTable& t, std::size_t i) {
        return spec::eval_row_expr(*expr, t, i);
    };
    return reg;
}

inline CompiledRegularizer compile_implication(const spec::TypedCommand& cmd,
                                               const Schema& schema) {
    CompiledRegularizer reg;
    reg.name = cmd.name;
    reg.kind = spec::Command::Kind::Implication;
    auto lhs = cmd.expr;
    auto not_rhs = spec::negate_row_expr(*cmd.rhs);
    auto rhs = cmd.rhs;
    // zeta = lhs AND NOT rhs marks violating rows
    reg.loss_builder = [lhs, not_rhs, &schema](grad::Tape& tape, grad::Node batch) {
        auto violating = tape.mul(row_mask(tape, batch, *lhs, schema),
                                  row_mask(tape, batch, *not_rhs, schema));
        return tape.mean(violating);
    };
    reg.verifier = [lhs, rhs](const EncodedTable& t) {
        std::size_t sat = 0;
        for (std::size_t i = 0; i < t.num_rows(); ++i) {
            if (!spec::eval_row_expr(*lhs, t, i) || spec::eval_row_expr(*rhs, t, i)) ++sat;
        }
        VerifierResult r;
        r.value = t.num_rows() ? static_cast<double>(sat) / static_cast<double>(t.num_rows()) : 1.0;
        r.pass = r.value >= 0.99;
        r.metric = "csr";
        return r;
    };
    reg.hard_row_predicate = [lhs, rhs](const EncodedTable& t, std::size_t i) {
        return !spec::eval_row_expr(*lhs, t, i) || spec::eval_row_expr(*rhs, t, i);
    };
    return reg;
}

// ---- statistical operators -----------------------------------------------

namespace detail {

inline std::vector<std::pair<Eigen::Index, Eigen::Index>> blocks_of(
    const Schema& schema, const std::vector<std::size_t>& features) {
    std::vector<std::pair<Eigen::Index, Eigen::Index>> blocks;
    for (auto f : features) {
        blocks.emplace_back(static_cast<Eigen::Index>(schema.block_offset(f)),
                            static_cast<Eigen::Index>(schema.block_size(f)));
    }
    return blocks;
}

// Normalized (soft-conditioned) joint marginal of the batch.
inline grad::Node conditional_marginal(grad::Tape& tape, grad::Node batch,
                                       const spec::TypedStatExpr& op, const Schema& schema,
                                       double eps, std::atomic<long>* degenerate) {
    auto blocks = blocks_of(schema, op.features);
    if (!op.condition) {
        auto counts = tape.block_marginal(batch, blocks);
        return tape.scale(counts, 1.0 / static_cast<double>(batch.rows()));
    }
    auto b = row_mask(tape, batch, *op.condition, schema);
    if (degenerate && tape.value(b).sum() < 1.0) ++*degenerate;
    grad::Node kron = tape.slice_cols(batch, blocks[0].first, blocks[0].second);
    for (std::size_t s = 1; s < blocks.size(); ++s) {
        kron = tape.row_kron(kron, tape.slice_cols(batch, blocks[s].first, blocks[s].second));
    }
    auto numerator = tape.matmul(tape.transpose(b), kron);        // 1 x n_r
    auto denominator = tape.add_const(tape.sum(b), eps);          // 1 x 1
    return tape.div(numerator, denominator);
}

// OP[f(S)|phi] from the marginal node.
inline grad::Node stat_value(grad::Tape& tape, spec::StatKind kind, const Vector& f_values,
                             grad::Node mu, double eps) {
    switch (kind) {
    case spec::StatKind::E:
        return tape.matmul(mu, tape.constant(f_values));
    case spec::StatKind::Var:
    case spec::StatKind::Std: {
        auto e1 = tape.matmul(mu, tape.constant(f_values));
        Vector f2 = f_values.cwiseProduct(f_values);
        auto e2 = tape.matmul(mu, tape.constant(f2));
        auto var = tape.sub(e2, tape.mul(e1, e1));
        if (kind == spec::StatKind::Var) return var;
        // sqrt via exp(0.5 log(max(var,0) + eps))
        return tape.exp(tape.scale(tape.log(tape.add_const(tape.relu(var), eps)), 0.5));
    }
    case spec::StatKind::Entropy: {
        auto logp = tape.log(tape.add_const(mu, eps));
        return tape.neg(tape.sum(tape.mul(mu, logp)));
    }
    }
    fail(ErrorCode::ShapeMismatch, "unreachable stat kind");
}

inline grad::Node stat_arith(grad::Tape& tape, const spec::TypedStatExpr& e, grad::Node batch,
                             const Schema& schema, double eps, std::atomic<long>* degenerate) {
    switch (e.kind) {
    case spec::TypedStatExpr::Kind::Const:
        return tape.constant_scalar(e.value);
    case spec::TypedStatExpr::Kind::StatOp: {
        auto mu = conditional_marginal(tape, batch, e, schema, eps, degenerate);
        return stat_value(tape, e.stat, e.f_values, mu, eps);
    }
    case spec::TypedStatExpr::Kind::Neg:
        return tape.neg(stat_arith(tape, *e.lhs, batch, schema, eps, degenerate));
    case spec::TypedStatExpr::Kind::Arith: {
        auto l = stat_arith(tape, *e.lhs, batch, schema, eps, degenerate);
        auto r = stat_arith(tape, *e.rhs, batch, schema, eps, degenerate);
        switch (e.arith_op) {
        case spec::ArithOp::Add: return tape.add(l, r);
        case spec::ArithOp::Sub: return tape.sub(l, r);
        case spec::ArithOp::Mul: return tape.mul(l, r);
        case spec::ArithOp::Div: return tape.div(l, tape.add_const(r, eps));
        }
        break;
    }
    default:
        break;
    }
    fail(ErrorCode::TypeMismatch, "expected an arithmetic-valued statistical expression");
}

// DL2-style translation: equality -> |a-b|, a<=b -> max(a-b,0), strict adds a
// margin, != -> max(margin-|a-b|,0); AND sums, OR multiplies.
inline grad::Node stat_loss(grad::Tape& tape, const spec::TypedStatExpr& e, grad::Node batch,
                            const Schema& schema, double eps, double margin,
                            std::atomic<long>* degenerate) {
    switch (e.kind) {
    case spec::TypedStatExpr::Kind::Rel: {
        auto a = stat_arith(tape, *e.lhs, batch, schema, eps, degenerate);
        auto b = stat_arith(tape, *e.rhs, batch, schema, eps, degenerate);
        switch (e.rel_op) {
        case spec::CmpOp::Eq: return tape.abs(tape.sub(a, b));
        case spec::CmpOp::Le: return tape.relu(tape.sub(a, b));
        case spec::CmpOp::Lt: return tape.relu(tape.add_const(tape.sub(a, b), margin));
        case spec::CmpOp::Ge: return tape.relu(tape.sub(b, a));
        case spec::CmpOp::Gt: return tape.relu(tape.add_const(tape.sub(b, a), margin));
        case spec::CmpOp::Ne:
            return tape.relu(tape.sub(tape.constant_scalar(margin), tape.abs(tape.sub(a, b))));
        }
        break;
    }
    case spec::TypedStatExpr::Kind::Logic: {
        auto l = stat_loss(tape, *e.lhs, batch, schema, eps, margin, degenerate);
        auto r = stat_loss(tape, *e.rhs, batch, schema, eps, margin, degenerate);
        return e.logic_op == spec::LogicOp::And ? tape.add(l, r) : tape.mul(l, r);
    }
    default:
        break;
    }
    fail(ErrorCode::TypeMismatch, "statistical loss requires a comparison or logic node");
}

// Tape-free evaluation on a hard sample, mirroring the loss semantics.
inline double eval_stat_arith(const spec::TypedStatExpr& e, const EncodedTable& t, double eps);

inline Vector hard_conditional_marginal(const spec::TypedStatExpr& op, const EncodedTable& t,
                                        double eps) {
    const Schema& schema = t.schema();
    std::size_t n_r = 1;
    for (auto f : op.features) n_r *= schema.column(f).domain_size();
    Vector counts = Vector::Zero(static_cast<Eigen::Index>(n_r));
    double kept = 0.0;
    for (std::size_t i = 0; i < t.num_rows(); ++i) {
        if (op.condition && !spec::eval_row_expr(*op.condition, t, i)) continue;
        std::size_t cell = 0;
        for (auto f : op.features) cell = cell * schema.column(f).domain_size() + t.cell(i, f);
        counts[static_cast<Eigen::Index>(cell)] += 1.0;
        kept += 1.0;
    }
    return counts / (kept + eps);
}

inline double eval_stat_arith(const spec::TypedStatExpr& e, const EncodedTable& t, double eps) {
    switch (e.kind) {
    case spec::TypedStatExpr::Kind::Const:
        return e.value;
    case spec::TypedStatExpr::Kind::Neg:
        return -eval_stat_arith(*e.lhs, t, eps);
    case spec::TypedStatExpr::Kind::Arith: {
        const double l = eval_stat_arith(*e.lhs, t, eps);
        const double r = eval_stat_arith(*e.rhs, t, eps);
        switch (e.arith_op) {
        case spec::ArithOp::Add: return l + r;
        case spec::ArithOp::Sub: return l - r;
        case spec::ArithOp::Mul: return l * r;
        case spec::ArithOp::Div: return l / (r + eps);
        }
        break;
    }
    case spec::TypedStatExpr::Kind::StatOp: {
        Vector mu = hard_conditional_marginal(e, t, eps);
        switch (e.stat) {
        case spec::StatKind::E:
            return mu.dot(e.f_values);
        case spec::StatKind::Var:
        case spec::StatKind::Std: {
            const double e1 = mu.dot(e.f_values);
            const double e2 = mu.dot(Vector(e.f_values.cwiseProduct(e.f_values)));
            const double var = e2 - e1 * e1;
            return e.stat == spec::StatKind::Var ? var : std::sqrt(std::max(var, 0.0) + eps);
        }
        case spec::StatKind::Entropy: {
            double h = 0.0;
            for (Eigen::Index j = 0; j < mu.size(); ++j) h -= mu[j] * std::log(mu[j] + eps);
            return h;
        }
        }
        break;
    }
    default:
        break;
    }
    fail(ErrorCode::TypeMismatch, "expected an arithmetic-valued statistical expression");
}

struct StatCheck {
    double residual = 0.0;
    bool pass = false;
};

inline StatCheck check_stat(const spec::TypedStatExpr& e, const EncodedTable& t, double tol,
                            double margin, double eps) {
    switch (e.kind) {
    case spec::TypedStatExpr::Kind::Rel: {
        const double a = eval_stat_arith(*e.lhs, t, eps);
        const double b = eval_stat_arith(*e.rhs, t, eps);
        double residual = 0.0;
        switch (e.rel_op) {
        case spec::CmpOp::Eq: residual = std::abs(a - b); break;
        case spec::CmpOp::Le: residual = std::max(a - b, 0.0); break;
        case spec::CmpOp::Lt: residual = std::max(a - b + margin, 0.0); break;
        case spec::CmpOp::Ge: residual = std::max(b - a, 0.0); break;
        case spec::CmpOp::Gt: residual = std::max(b - a + margin, 0.0); break;
        case spec::CmpOp::Ne: residual = std::max(margin - std::abs(a - b), 0.0); break;
        }
        const double scale = std::max({1.0, std::abs(a), std::abs(b)});
        return StatCheck{residual, residual <= tol * scale};
    }
    case spec::TypedStatExpr::Kind::Logic: {
        auto l = check_stat(*e.lhs, t, tol, margin, eps);
        auto r = check_stat(*e.rhs, t, tol, margin, eps);
        if (e.logic_op == spec::LogicOp::And) {
            return StatCheck{l.residual + r.residual, l.pass && r.pass};
        }
        return StatCheck{l.residual * r.residual, l.pass || r.pass};
    }
    default:
        break;
    }
    fail(ErrorCode::TypeMismatch, "statistical check requires a comparison or logic node");
}

}  // namespace detail

inline CompiledRegularizer compile_statistical(const spec::TypedCommand& cmd, const Schema& schema,
                                               const CompileOptions& opts) {
    CompiledRegularizer reg;
    reg.name = cmd.name;
    reg.kind = spec::Command::Kind::Statistical;
    auto stat = cmd.stat;
    auto warn = reg.degenerate_conditions;
    const double eps = opts.eps_guard, margin = opts.margin, tol = opts.stat_tolerance;
    reg.loss_builder = [stat, &schema, eps, margin, warn](grad::Tape& tape, grad::Node batch) {
        return detail::stat_loss(tape, *stat, batch, schema, eps, margin, warn.get());
    };
    reg.verifier = [stat, tol, margin, eps](const EncodedTable& t) {
        auto check = detail::check_stat(*stat, t, tol, margin, eps);
        return VerifierResult{check.residual, check.pass, "residual"};
    };
    return reg;
}

// ---- downstream specifications ------------------------------------------------

// Unrolled differentiable surrogate: a linear logistic model whose inner
// gradient steps are written as tape primitives, so the whole chain stays
// differentiable w.r.t. the generated batch.
inline CompiledRegularizer compile_downstream(const spec::TypedCommand& cmd, const Schema& schema,
                                              std::shared_ptr<const EncodedTable> reference,
                                              const CompileOptions& opts) {
    if (!reference) fail(ErrorCode::InvalidArgument, "downstream spec needs a reference dataset");
    CompiledRegularizer reg;
    reg.name = cmd.name;
    reg.kind = spec::Command::Kind::Downstream;
    reg.ds_kind = cmd.ds_kind;

    const bool is_fairness = cmd.ds_kind != spec::DownstreamKind::DownstreamAccuracy;
    const std::optional<std::size_t> drop_col =
        (is_fairness && !cmd.include_protected) ? std::optional<std::size_t>(cmd.protected_col)
                                                : std::nullopt;
    auto xr_ft = std::make_shared<Matrix>(feature_matrix(*reference, cmd.target_col, drop_col));
    auto y_r = std::make_shared<Vector>(label_vector(*reference, cmd.target_col));
    const Eigen::Index n_ref = xr_ft->rows();

    // Group-mean selector rows over the reference sample.
    Matrix w_s(2, n_ref);      // by protected value
    Matrix w_sy(4, n_ref);     // by (protected, label): index 2s + y
    if (is_fairness) {
        w_s.setZero();
        w_sy.setZero();
        double cnt_s[2] = {0, 0}, cnt_sy[4] = {0, 0, 0, 0};
        for (std::size_t i = 0; i < reference->num_rows(); ++i) {
            const int s = reference->cell(i, cmd.protected_col) == 1 ? 1 : 0;
            const int y = reference->cell(i, cmd.target_col) == 1 ? 1 : 0;
            w_s(s, static_cast<Eigen::Index>(i)) = 1.0;
            w_sy(2 * s + y, static_cast<Eigen::Index>(i)) = 1.0;
            cnt_s[s] += 1.0;
            cnt_sy[2 * s + y] += 1.0;
        }
        auto require_group = [&](double count, const std::string& what) {
            if (count == 0.0) {
                fail(ErrorCode::EmptyProtectedGroup,
                     "reference dataset has no rows with " + what);
            }
        };
        require_group(cnt_s[0], schema.column(cmd.protected_col).name + "=0");
        require_group(cnt_s[1], schema.column(cmd.protected_col).name + "=1");
        for (int s = 0; s < 2; ++s) w_s.row(s) /= cnt_s[s];
        if (cmd.ds_kind == spec::DownstreamKind::EqualizedOdds ||
            cmd.ds_kind == spec::DownstreamKind::EqualityOfOpportunity) {
            for (int s = 0; s < 2; ++s) {
                for (int y = 0; y < 2; ++y) {
                    if (cmd.ds_kind == spec::DownstreamKind::EqualityOfOpportunity && y == 0) continue;
                    require_group(cnt_sy[2 * s + y], "(s=" + std::to_string(s) +
                                                         ", y=" + std::to_string(y) + ")");
                }
            }
            for (int c = 0; c < 4; ++c) {
                if (cnt_sy[c] > 0) w_sy.row(c) /= cnt_sy[c];
            }
        }
    }

    // loss sign: fairness SIs are minimized under MINIMIZE; the utility SI is
    // a cross entropy, inversely related to the named DOWNSTREAM_ACCURACY, so
    // the sign flips.
    double sign;
    if (cmd.ds_kind == spec::DownstreamKind::DownstreamAccuracy) {
        sign = cmd.action == spec::Action::Minimize ? -1.0 : 1.0;
    } else {
        sign = cmd.action == spec::Action::Maximize ? -1.0 : 1.0;
    }

    const auto ds_kind = cmd.ds_kind;
    const auto surrogate = cmd.surrogate;
    const std::size_t target_col = cmd.target_col;
    const double eps = opts.eps_guard;

    reg.loss_builder = [&schema, xr_ft, y_r, w_s, w_sy, sign, ds_kind, surrogate, target_col,
                        drop_col, eps](grad::Tape& tape, grad::Node batch) {
        // feature and label views of the generated batch
        grad::Node xft = batch;
        {
            std::vector<std::pair<Eigen::Index, Eigen::Index>> keep;
            for (std::size_t k = 0; k < schema.num_features(); ++k) {
                if (k == target_col || (drop_col && k == *drop_col)) continue;
                keep.emplace_back(static_cast<Eigen::Index>(schema.block_offset(k)),
                                  static_cast<Eigen::Index>(schema.block_size(k)));
            }
            xft = tape.slice_cols(batch, keep[0].first, keep[0].second);
            for (std::size_t i = 1; i < keep.size(); ++i) {
                xft = tape.concat_cols(xft, tape.slice_cols(batch, keep[i].first, keep[i].second));
            }
        }
        auto y = tape.slice_cols(
            batch, static_cast<Eigen::Index>(schema.block_offset(target_col)) + 1, 1);

        // unrolled surrogate training, zero-initialized
        const Eigen::Index d = xft.cols();
        const Eigen::Index b_rows = batch.rows();
        auto psi = tape.constant(Matrix::Zero(d, 1));
        const Eigen::Index mb = std::min<Eigen::Index>(surrogate.batch_size, b_rows);
        for (int epoch = 0; epoch < surrogate.n_epochs; ++epoch) {
            for (Eigen::Index start = 0; start < b_rows; start += mb) {
                const Eigen::Index len = std::min(mb, b_rows - start);
                auto xb = tape.slice_rows(xft, start, len);
                auto yb = tape.slice_rows(y, start, len);
                auto p = tape.sigmoid(tape.matmul(xb, psi));
                auto g = tape.scale(tape.matmul(tape.transpose(xb), tape.sub(p, yb)),
                                    1.0 / static_cast<double>(len));
                psi = tape.sub(psi, tape.scale(g, surrogate.lr));
            }
        }

        // statistic of interest on the reference sample
        auto pred_r = tape.sigmoid(tape.matmul(tape.constant(*xr_ft), psi));  // n x 1
        grad::Node si = pred_r;
        switch (ds_kind) {
        case spec::DownstreamKind::DemographicParity: {
            auto m0 = tape.matmul(tape.constant(Matrix(w_s.row(0))), pred_r);
            auto m1 = tape.matmul(tape.constant(Matrix(w_s.row(1))), pred_r);
            si = tape.abs(tape.sub(m0, m1));
            break;
        }
        case spec::DownstreamKind::EqualizedOdds:
        case spec::DownstreamKind::EqualityOfOpportunity: {
            auto gap = [&](int y_val) {
                auto a = tape.matmul(tape.constant(Matrix(w_sy.row(0 + y_val))), pred_r);
                auto b = tape.matmul(tape.constant(Matrix(w_sy.row(2 + y_val))), pred_r);
                return tape.abs(tape.sub(a, b));
            };
            si = ds_kind == spec::DownstreamKind::EqualityOfOpportunity
                     ? gap(1)
                     : tape.max2(gap(0), gap(1));
            break;
        }
        case spec::DownstreamKind::DownstreamAccuracy: {
            auto yc = tape.constant(*y_r);
            auto one_minus_y = tape.constant(Matrix((1.0 - y_r->array()).matrix()));
            auto log_p = tape.log(tape.add_const(pred_r, eps));
            auto log_q = tape.log(tape.add_const(
                tape.sub(tape.constant(Matrix::Ones(pred_r.rows(), 1)), pred_r), eps));
            si = tape.neg(tape.mean(tape.add(tape.mul(yc, log_p), tape.mul(one_minus_y, log_q))));
            break;
        }
        }
        return tape.scale(si, sign);
    };

    // Hard verifier: train the internal evaluator on the sample, report the
    // thresholded-prediction statistic on the reference.
    auto reference_copy = reference;
    const std::size_t protected_col = cmd.protected_col;
    reg.verifier = [reference_copy, target_col, protected_col, ds_kind,
                    drop_col](const EncodedTable& sample) {
        LogisticEvalConfig cfg;
        Vector y_train = label_vector(sample, target_col);
        VerifierResult out;
        const double mean = y_train.size() ? y_train.mean() : 0.0;
        if (sample.num_rows() == 0 || mean == 0.0 || mean == 1.0) {
            out.value = std::numeric_limits<double>::quiet_NaN();
            out.metric = "degenerate";
            return out;
        }
        Vector w = train_logistic(feature_matrix(sample, target_col, drop_col), y_train, cfg);
        auto preds = logistic_predict(feature_matrix(*reference_copy, target_col, drop_col), w);
        if (ds_kind == spec::DownstreamKind::DownstreamAccuracy) {
            Vector y_ref = label_vector(*reference_copy, target_col);
            double correct = 0;
            for (std::size_t i = 0; i < preds.size(); ++i) {
                if (preds[i] == (y_ref[static_cast<Eigen::Index>(i)] > 0.5 ? 1 : 0)) ++correct;
            }
            out.value = preds.empty() ? 0.0 : correct / static_cast<double>(preds.size());
            out.metric = "accuracy";
            out.pass = true;
            return out;
        }
        auto fm = fairness_metrics(preds, *reference_copy, protected_col, target_col);
        std::optional<double> v;
        switch (ds_kind) {
        case spec::DownstreamKind::DemographicParity:
            v = fm.demographic_parity;
            out.metric = "delta_dp";
            break;
        case spec::DownstreamKind::EqualizedOdds:
            v = fm.equalized_odds;
            out.metric = "delta_eo";
            break;
        default:
            v = fm.equality_of_opportunity;
            out.metric = "delta_eoo";
            break;
        }
        out.value = v ? *v : std::numeric_limits<double>::quiet_NaN();
        out.pass = v && *v <= 0.05;
        return out;
    };
    return reg;
}

// ---- program compilation ------------------------------------------------------

inline std::vector<CompiledRegularizer> compile_program(
    const spec::TypedProgram& program, std::shared_ptr<const EncodedTable> reference,
    const CompileOptions& opts = CompileOptions{}) {
    std::vector<CompiledRegularizer> regs;
    for (const auto& cmd : program.commands) {
        CompiledRegularizer reg;
        switch (cmd.kind) {
        case spec::Command::Kind::Dp:
            continue;  // handled by the pre-training stage
        case spec::Command::Kind::RowConstraint:
            reg = compile_row_constraint(cmd, *program.schema);
            break;
        case spec::Command::Kind::Implication:
            reg = compile_implication(cmd, *program.schema);
            break;
        case spec::Command::Kind::Statistical:
            reg = compile_statistical(cmd, *program.schema, opts);
            break;
        case spec::Command::Kind::Downstream:
            reg = compile_downstream(cmd, *program.schema, reference, opts);
            break;
        }
        reg.weight = opts.resolve_lambda(cmd.name, cmd.weight);
        regs.push_back(std::move(reg));
    }
    return regs;
}

// ---- fine-tuning ---------------------------------------------------------------

struct FinetuneConfig {
    Eigen::Index batch_size = 15000;
    long epochs = 500;
    std::size_t group_size = 16;
    double base_lr = 1e-3;
    std::uint64_t seed = 42;
    GumbelConfig gumbel;
};

struct FinetuneEpochStats {
    long epoch = 0;
    double lm = 0.0;  // mean per-marginal TV over the epoch
    double lr = 0.0;
    std::vector<double> spec_loss;            // per regularizer, last update
    std::vector<VerifierResult> spec_verify;  // on the last hardened batch
};

// Eq-style fine-tuning objective: the pre-training marginal loss plus the
// weighted specification losses, fresh noise each update. With every lambda
// at zero the update sequence is bit-identical to pretraining.
inline std::vector<FinetuneEpochStats> finetune(Generator& gen,
                                                const std::vector<MarginalTarget>& targets,
                                                std::vector<CompiledRegularizer>& regs,
                                                const FinetuneConfig& cfg) {
    if (targets.empty()) fail(ErrorCode::InvalidArgument, "no marginal targets");
    Rng rng(cfg.seed);
    AdamConfig adam;
    adam.lr = cfg.base_lr;
    AdamState state;
    state.reset(gen.params());
    GumbelConfig gumbel = cfg.gumbel;

    const long groups_per_epoch =
        static_cast<long>((targets.size() + cfg.group_size - 1) / cfg.group_size);
    const long total_updates = cfg.epochs * groups_per_epoch;
    std::vector<std::size_t> order(targets.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<FinetuneEpochStats> history;
    long update = 0;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        FinetuneEpochStats stats;
        stats.epoch = epoch;
        stats.spec_loss.assign(regs.size(), 0.0);
        double tv_sum = 0.0;
        Matrix last_batch;
        for (std::size_t start = 0; start < order.size(); start += cfg.group_size) {
            std::vector<const MarginalTarget*> group;
            for (std::size_t i = start; i < std::min(start + cfg.group_size, order.size()); ++i) {
                group.push_back(&targets[order[i]]);
            }
            grad::Tape tape;
            auto nodes = gen.param_nodes(tape, true);
            auto fwd = gen.forward_fresh(tape, nodes, cfg.batch_size, gumbel, rng);
            auto lm = marginal_loss(tape, fwd.output, group);
            tv_sum += tape.value(lm)(0, 0);
            auto total = lm;
            for (std::size_t r = 0; r < regs.size(); ++r) {
                if (regs[r].weight == 0.0) continue;
                auto spec_node = regs[r].loss_builder(tape, fwd.output);
                stats.spec_loss[r] = tape.value(spec_node)(0, 0);
                total = tape.add(total, tape.scale(spec_node, regs[r].weight));
            }
            auto grads = tape.backward(total);
            std::vector<Matrix> g;
            g.reserve(nodes.size());
            for (auto n : nodes) {
                g.push_back(grads.has(n) ? grads[n] : Matrix::Zero(n.rows(), n.cols()));
            }
            stats.lr = cfg.base_lr * cosine_lr_multiplier(update, total_updates);
            adam_step(gen.params(), g, state, adam, stats.lr);
            ++update;
            last_batch = tape.value(fwd.output);
        }
        stats.lm = tv_sum / static_cast<double>(targets.size());
        if (last_batch.rows() > 0) {
            auto sample = gen.batch_to_table(last_batch);
            for (auto& reg : regs) stats.spec_verify.push_back(reg.verifier(sample));
        }
        history.push_back(std::move(stats));
    }
    return history;
}

// ---- constraint-weight selection -------------------------------------------------

struct TuneRow {
    int fold = 0;
    std::vector<double> lambdas;
    double utility_accuracy = 0.0;
    std::vector<VerifierResult> verify;
};

struct TuneConfig {
    int k = 5;
    bool all_folds = false;  // default: first split only
    std::size_t eval_sample_rows = 5000;
    FinetuneConfig finetune;
};

// k-fold cross-validation over the reference dataset: fine-tune per
// fold x candidate, report the utility proxy and per-spec verifier values.
inline std::vector<TuneRow> tune_weights(const Generator& pretrained,
                                         const spec::TypedProgram& program,
                                         const EncodedTable& reference,
                                         const std::vector<MarginalTarget>& targets,
                                         const std::vector<std::vector<double>>& candidates,
                                         const TuneConfig& cfg,
                                         const CompileOptions& base_opts = CompileOptions{}) {
    if (candidates.empty()) fail(ErrorCode::InvalidArgument, "no lambda candidates");
    auto label = reference.schema().label_column();
    const std::size_t n = reference.num_rows();
    std::vector<TuneRow> rows;
    const int folds_to_run = cfg.all_folds ? cfg.k : 1;
    for (int fold = 0; fold < folds_to_run; ++fold) {
        const std::size_t lo = n * static_cast<std::size_t>(fold) / static_cast<std::size_t>(cfg.k);
        const std::size_t hi =
            n * static_cast<std::size_t>(fold + 1) / static_cast<std::size_t>(cfg.k);
        std::vector<bool> in_train(n, true);
        for (std::size_t i = lo; i < hi; ++i) in_train[i] = false;
        auto train_ref = std::make_shared<const EncodedTable>(reference.rows_where(in_train));
        std::vector<bool> in_test = in_train;
        in_test.flip();
        EncodedTable heldout = reference.rows_where(in_test);

        for (const auto& lambdas : candidates) {
            spec::TypedProgram trial = program;
            CompileOptions opts = base_opts;
            std::size_t li = 0;
            for (auto& cmd : trial.commands) {
                if (cmd.kind == spec::Command::Kind::Dp) continue;
                if (li < lambdas.size()) opts.lambda_overrides[cmd.name] = lambdas[li];
                ++li;
            }
            auto regs = compile_program(trial, train_ref, opts);
            Generator gen = pretrained;
            FinetuneConfig ft = cfg.finetune;
            ft.seed = derive_seed(cfg.finetune.seed, static_cast<std::uint64_t>(fold));
            finetune(gen, targets, regs, ft);
            auto sample = gen.sample(cfg.eval_sample_rows, derive_seed(ft.seed, 9));
            TuneRow row;
            row.fold = fold;
            row.lambdas = lambdas;
            if (label) {
                try {
                    row.utility_accuracy = downstream_eval(sample, heldout, *label).accuracy;
                } catch (const Error&) {
                    row.utility_accuracy = std::numeric_limits<double>::quiet_NaN();
                }
            }
            for (auto& reg : regs) row.verify.push_back(reg.verifier(sample));
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

}  // namespace cuts

#endif  // CUTS_COMPILE_HPP
