#ifndef CUTS_SPEC_FORMAT_HPP
#define CUTS_SPEC_FORMAT_HPP

#include <charconv>
#include <cmath>
#include <sstream>
#include <string>

#include "cuts/spec/ast.hpp"

namespace cuts::spec {

namespace detail {

// Shortest representation that parses back to the same double.
inline std::string fmt_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline int row_prec(const RowExpr& e) {
    switch (e.kind) {
    case RowExpr::Kind::Or: return 1;
    case RowExpr::Kind::And: return 2;
    default: return 3;
    }
}

inline std::string format_row(const RowExpr& e) {
    switch (e.kind) {
    case RowExpr::Kind::Compare:
        return e.feature + " " + cmp_op_text(e.op) + " " + e.literal;
    case RowExpr::Kind::InSet: {
        std::string s = e.feature + (e.negated ? " not in {" : " in {");
        for (std::size_t i = 0; i < e.set_values.size(); ++i) {
            if (i) s += ", ";
            s += e.set_values[i];
        }
        return s + "}";
    }
    case RowExpr::Kind::And:
    case RowExpr::Kind::Or: {
        const int prec = row_prec(e);
        const char* op = e.kind == RowExpr::Kind::And ? " AND " : " OR ";
        std::string l = format_row(*e.lhs);
        std::string r = format_row(*e.rhs);
        if (row_prec(*e.lhs) < prec) l = "(" + l + ")";
        if (row_prec(*e.rhs) <= prec) r = "(" + r + ")";
        return l + op + r;
    }
    }
    return "";
}

inline int stat_prec(const StatExpr& e) {
    switch (e.kind) {
    case StatExpr::Kind::Logic: return e.logic_op == LogicOp::Or ? 1 : 2;
    case StatExpr::Kind::Rel: return 3;
    case StatExpr::Kind::Arith:
        return (e.arith_op == ArithOp::Add || e.arith_op == ArithOp::Sub) ? 4 : 5;
    case StatExpr::Kind::Neg: return 6;
    default: return 7;
    }
}

inline std::string format_stat(const StatExpr& e) {
    switch (e.kind) {
    case StatExpr::Kind::Const: return fmt_number(e.value);
    case StatExpr::Kind::StatOp: {
        std::string s = std::string(stat_kind_text(e.stat)) + "[";
        for (std::size_t i = 0; i < e.term_features.size(); ++i) {
            if (i) s += e.term_is_product ? " * " : " + ";
            s += e.term_features[i];
        }
        if (e.condition) s += " | " + format_row(*e.condition);
        return s + "]";
    }
    case StatExpr::Kind::Neg: {
        std::string inner = format_stat(*e.lhs);
        if (stat_prec(*e.lhs) < 6) inner = "(" + inner + ")";
        return "-" + inner;
    }
    case StatExpr::Kind::Arith:
    case StatExpr::Kind::Rel:
    case StatExpr::Kind::Logic: {
        const int prec = stat_prec(e);
        std::string op;
        if (e.kind == StatExpr::Kind::Arith) {
            switch (e.arith_op) {
            case ArithOp::Add: op = " + "; break;
            case ArithOp::Sub: op = " - "; break;
            case ArithOp::Mul: op = " * "; break;
            case ArithOp::Div: op = " / "; break;
            }
        } else if (e.kind == StatExpr::Kind::Rel) {
            op = std::string(" ") + cmp_op_text(e.rel_op) + " ";
        } else {
            op = e.logic_op == LogicOp::And ? " AND " : " OR ";
        }
        std::string l = format_stat(*e.lhs);
        std::string r = format_stat(*e.rhs);
        if (stat_prec(*e.lhs) < prec) l = "(" + l + ")";
        if (stat_prec(*e.rhs) <= prec) r = "(" + r + ")";
        return l + op + r;
    }
    }
    return "";
}

}  // namespace detail

// Canonical single-line-per-command form; fmt is idempotent and
// parse(format(p)) preserves the AST.
inline std::string format(const SpecProgram& program) {
    std::ostringstream out;
    out << "SYNTHESIZE: " << program.source_dataset << ";\n";
    for (const auto& cmd : program.commands) {
        out << action_text(cmd.action) << ": ";
        const std::string param =
            cmd.weight ? " PARAM " + detail::fmt_number(*cmd.weight) : std::string();
        switch (cmd.kind) {
        case Command::Kind::Dp:
            out << "DIFFERENTIAL PRIVACY: EPSILON=" << detail::fmt_number(cmd.epsilon)
                << ", DELTA=" << detail::fmt_number(cmd.delta) << ";";
            break;
        case Command::Kind::RowConstraint:
            out << "ROW CONSTRAINT" << param << ": " << detail::format_row(*cmd.expr) << ";";
            break;
        case Command::Kind::Implication:
            out << "IMPLICATION" << param << ": " << detail::format_row(*cmd.expr)
                << " IMPLIES " << detail::format_row(*cmd.rhs) << ";";
            break;
        case Command::Kind::Statistical:
            out << "STATISTICAL" << param << ": " << detail::format_stat(*cmd.stat) << ";";
            break;
        case Command::Kind::Downstream: {
            out << (cmd.ds_kind == DownstreamKind::DownstreamAccuracy ? "UTILITY" : "FAIRNESS")
                << param << ": " << downstream_kind_text(cmd.ds_kind) << "(";
            bool first = true;
            auto arg = [&](const std::string& k, const std::string& v) {
                if (!first) out << ", ";
                out << k << "=" << v;
                first = false;
            };
            if (cmd.ds_kind != DownstreamKind::DownstreamAccuracy && !cmd.protected_feature.empty()) {
                arg("protected", cmd.protected_feature);
            }
            if (cmd.ds_kind == DownstreamKind::DownstreamAccuracy) {
                arg("features", cmd.features_arg);
            } else if (cmd.features_arg != "all") {
                arg("features", cmd.features_arg);
            }
            if (!cmd.target_feature.empty()) arg("target", cmd.target_feature);
            arg("lr", detail::fmt_number(cmd.surrogate.lr));
            arg("n_epochs", std::to_string(cmd.surrogate.n_epochs));
            arg("batch_size", std::to_string(cmd.surrogate.batch_size));
            out << ");";
            break;
        }
        }
        out << "\n";
    }
    out << "END;\n";
    return out.str();
}

}  // namespace cuts::spec

#endif  // CUTS_SPEC_FORMAT_HPP
