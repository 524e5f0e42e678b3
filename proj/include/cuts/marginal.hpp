#ifndef CUTS_MARGINAL_HPP
#define CUTS_MARGINAL_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/table.hpp"

namespace cuts {

// Ordered subset of feature indices defining an m-way marginal. Cell order is
// row-major over the selected features, matching the Kronecker product of the
// one-hot blocks in feature order.
struct MarginalSpec {
    std::vector<std::size_t> feature_indices;

    static MarginalSpec of(std::initializer_list<std::size_t> idx) {
        return MarginalSpec{std::vector<std::size_t>(idx)};
    }

    void validate(const Schema& schema) const {
        if (feature_indices.empty()) fail(ErrorCode::InvalidArgument, "empty marginal spec");
        for (std::size_t i = 0; i < feature_indices.size(); ++i) {
            if (feature_indices[i] >= schema.num_features()) {
                fail(ErrorCode::InvalidArgument, "feature index out of range");
            }
            if (i > 0 && feature_indices[i] <= feature_indices[i - 1]) {
                fail(ErrorCode::InvalidArgument, "marginal features must be distinct ascending");
            }
        }
    }

    std::size_t domain_size(const Schema& schema) const {
        std::size_t n = 1;
        for (auto f : feature_indices) n *= schema.column(f).domain_size();
        return n;
    }

    std::string to_string(const Schema& schema) const {
        std::string s;
        for (std::size_t i = 0; i < feature_indices.size(); ++i) {
            if (i) s += "*";
            s += schema.column(feature_indices[i]).name;
        }
        return s;
    }

    bool operator==(const MarginalSpec& other) const {
        return feature_indices == other.feature_indices;
    }
};

struct MarginalVector {
    Vector values;
    bool normalized = false;
};

// Exact marginal by per-row tuple counting; integer arithmetic until the
// optional normalization. Equals the Kronecker-product computation on the
// one-hot view.
inline MarginalVector marginal(const EncodedTable& table, const MarginalSpec& spec,
                               bool normalize = true) {
    spec.validate(table.schema());
    if (normalize && table.num_rows() == 0) {
        fail(ErrorCode::EmptyTable, "cannot normalize marginal of an empty table");
    }
    const Schema& schema = table.schema();
    std::vector<std::int64_t> counts(spec.domain_size(schema), 0);
    for (std::size_t i = 0; i < table.num_rows(); ++i) {
        std::size_t cell_index = 0;
        for (auto f : spec.feature_indices) {
            cell_index = cell_index * schema.column(f).domain_size() + table.cell(i, f);
        }
        ++counts[cell_index];
    }
    MarginalVector out;
    out.values.resize(static_cast<Eigen::Index>(counts.size()));
    for (std::size_t j = 0; j < counts.size(); ++j) {
        out.values[static_cast<Eigen::Index>(j)] = static_cast<double>(counts[j]);
    }
    if (normalize) {
        out.values /= static_cast<double>(table.num_rows());
        out.normalized = true;
    }
    return out;
}

enum class WorkloadMode { All3Way, ThreeWayWithLabel };

// Deterministic marginal workload: lexicographically ordered index triples.
// With fewer than three features, `degrade` falls back to all pairs.
inline std::vector<MarginalSpec> marginal_workload(const Schema& schema, WorkloadMode mode,
                                                   bool degrade = false) {
    const std::size_t k = schema.num_features();
    std::vector<MarginalSpec> out;
    if (k < 3) {
        if (!degrade) {
            fail(ErrorCode::InvalidArgument,
                 "workload needs K >= 3 features (pass --workload-degrade for pairs)");
        }
        if (mode == WorkloadMode::ThreeWayWithLabel) {
            auto label = schema.label_column();
            if (!label) fail(ErrorCode::MissingLabel, "workload mode requires a label column");
            for (std::size_t i = 0; i < k; ++i) {
                if (i == *label) continue;
                std::vector<std::size_t> idx{i, *label};
                std::sort(idx.begin(), idx.end());
                out.push_back(MarginalSpec{idx});
            }
        } else {
            for (std::size_t i = 0; i < k; ++i) {
                for (std::size_t j = i + 1; j < k; ++j) {
                    out.push_back(MarginalSpec{{i, j}});
                }
            }
        }
        return out;
    }
    if (mode == WorkloadMode::All3Way) {
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t b = a + 1; b < k; ++b) {
                for (std::size_t c = b + 1; c < k; ++c) {
                    out.push_back(MarginalSpec{{a, b, c}});
                }
            }
        }
        return out;
    }
    auto label = schema.label_column();
    if (!label) fail(ErrorCode::MissingLabel, "workload mode requires a label column");
    for (std::size_t a = 0; a < k; ++a) {
        if (a == *label) continue;
        for (std::size_t b = a + 1; b < k; ++b) {
            if (b == *label) continue;
            std::vector<std::size_t> idx{a, b, *label};
            std::sort(idx.begin(), idx.end());
            out.push_back(MarginalSpec{idx});
        }
    }
    std::sort(out.begin(), out.end(), [](const MarginalSpec& x, const MarginalSpec& y) {
        return x.feature_indices < y.feature_indices;
    });
    return out;
}

// Half the L1 distance between two normalized marginals; in [0, 1].
inline double tv_distance(const MarginalVector& a, const MarginalVector& b) {
    if (a.values.size() != b.values.size()) {
        fail(ErrorCode::LengthMismatch, "marginal vectors of different length");
    }
    if (!a.normalized || !b.normalized) {
        fail(ErrorCode::InvalidArgument, "tv_distance requires normalized marginals");
    }
    return 0.5 * (a.values - b.values).cwiseAbs().sum();
}

}  // namespace cuts

#endif  // CUTS_MARGINAL_HPP
