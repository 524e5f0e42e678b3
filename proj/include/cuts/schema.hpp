#ifndef CUTS_SCHEMA_HPP
#define CUTS_SCHEMA_HPP

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuts/common.hpp"

namespace cuts {

enum class ColumnKind { Categorical, BinnedNumeric };

enum class ColumnRole { Label, Protected };

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::Categorical;
    std::vector<std::string> categories;     // categorical only
    std::vector<double> bin_edges;           // binned-numeric only, strictly ascending
    std::vector<double> representative_values;
    bool is_label = false;
    bool is_protected = false;

    // Number of discrete values this column can take.
    std::size_t domain_size() const {
        return kind == ColumnKind::Categorical ? categories.size() : bin_edges.size() - 1;
    }
};

// Ordered column descriptions plus the derived one-hot layout. Read-only after
// construction; safe to share across threads.
class Schema {
public:
    Schema() = default;

    explicit Schema(std::vector<ColumnSpec> columns) : columns_(std::move(columns)) {
        finalize();
    }

    const std::vector<ColumnSpec>& columns() const { return columns_; }
    const ColumnSpec& column(std::size_t i) const { return columns_.at(i); }
    std::size_t num_features() const { return columns_.size(); }

    // One-hot width q = sum of domain sizes.
    std::size_t one_hot_width() const { return offsets_.back(); }

    // K+1 offsets delimiting the feature blocks in the one-hot layout.
    const std::vector<std::size_t>& block_offsets() const { return offsets_; }

    std::size_t block_offset(std::size_t feature) const { return offsets_.at(feature); }
    std::size_t block_size(std::size_t feature) const {
        return offsets_.at(feature + 1) - offsets_.at(feature);
    }

    std::optional<std::size_t> find_column(const std::string& name) const {
        for (std::size_t i = 0; i < columns_.size(); ++i) {
            if (columns_[i].name == name) return i;
        }
        return std::nullopt;
    }

    std::optional<std::size_t> label_column() const { return label_; }
    std::optional<std::size_t> protected_column() const { return protected_; }

    // Index of the bin containing v: half-open intervals [e_i, e_{i+1}),
    // last bin closed on the right.
    std::size_t bin_index(std::size_t feature, double v) const {
        const auto& col = columns_.at(feature);
        const auto& e = col.bin_edges;
        if (v < e.front() || v > e.back()) {
            fail(ErrorCode::OutOfDomainValue,
                 "value " + std::to_string(v) + " outside [" + std::to_string(e.front()) +
                     ", " + std::to_string(e.back()) + "] for column " + col.name);
        }
        if (v == e.back()) return e.size() - 2;
        std::size_t lo = 0;
        while (lo + 2 < e.size() && v >= e[lo + 1]) ++lo;
        return lo;
    }

    // Numeric stand-in for category/bin index j of a column, used by the
    // statistical operators.
    double representative_value(std::size_t feature, std::size_t index) const {
        return columns_.at(feature).representative_values.at(index);
    }

    // Canonical serialization; also the input to hash().
    std::string to_json() const {
        nlohmann::ordered_json doc;
        doc["columns"] = nlohmann::ordered_json::array();
        for (const auto& col : columns_) {
            nlohmann::ordered_json c;
            c["name"] = col.name;
            c["kind"] = col.kind == ColumnKind::Categorical ? "categorical" : "binned-numeric";
            if (col.kind == ColumnKind::Categorical) {
                c["categories"] = col.categories;
            } else {
                c["bin_edges"] = col.bin_edges;
            }
            c["representative_values"] = col.representative_values;
            std::vector<std::string> roles;
            if (col.is_label) roles.push_back("label");
            if (col.is_protected) roles.push_back("protected");
            if (!roles.empty()) c["roles"] = roles;
            doc["columns"].push_back(c);
        }
        return doc.dump(2);
    }

    std::uint64_t hash() const { return fnv1a(to_json()); }

    static Schema from_json(const std::string& text) {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::IoError, std::string("schema parse: ") + e.what());
        }
        if (!doc.contains("columns") || !doc["columns"].is_array()) {
            fail(ErrorCode::IoError, "schema must contain a 'columns' array");
        }
        std::vector<ColumnSpec> cols;
        for (const auto& c : doc["columns"]) {
            ColumnSpec col;
            col.name = c.at("name").get<std::string>();
            std::string kind = c.at("kind").get<std::string>();
            if (kind == "categorical") {
                col.kind = ColumnKind::Categorical;
                col.categories = c.at("categories").get<std::vector<std::string>>();
            } else if (kind == "binned-numeric") {
                col.kind = ColumnKind::BinnedNumeric;
                col.bin_edges = c.at("bin_edges").get<std::vector<double>>();
            } else {
                fail(ErrorCode::IoError, "unknown column kind '" + kind + "'");
            }
            if (c.contains("representative_values")) {
                col.representative_values = c["representative_values"].get<std::vector<double>>();
            }
            if (c.contains("roles")) {
                for (const auto& r : c["roles"]) {
                    std::string role = r.get<std::string>();
                    if (role == "label") col.is_label = true;
                    else if (role == "protected") col.is_protected = true;
                    else fail(ErrorCode::IoError, "unknown role '" + role + "'");
                }
            }
            cols.push_back(std::move(col));
        }
        return Schema(std::move(cols));
    }

    static Schema load(const std::string& path) {
        std::ifstream in(path);
        if (!in) fail(ErrorCode::IoError, "cannot open schema file " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return from_json(buf.str());
    }

private:
    void finalize() {
        offsets_.assign(1, 0);
        for (std::size_t i = 0; i < columns_.size(); ++i) {
            auto& col = columns_[i];
            if (col.kind == ColumnKind::Categorical) {
                if (col.categories.empty()) {
                    fail(ErrorCode::InvalidArgument, "column " + col.name + " has no categories");
                }
            } else {
                if (col.bin_edges.size() < 2) {
                    fail(ErrorCode::InvalidArgument, "column " + col.name + " needs >= 2 bin edges");
                }
                for (std::size_t j = 0; j + 1 < col.bin_edges.size(); ++j) {
                    if (!(col.bin_edges[j] < col.bin_edges[j + 1])) {
                        fail(ErrorCode::InvalidArgument,
                             "bin edges of " + col.name + " must be strictly ascending");
                    }
                }
            }
            // Defaults: bin midpoints for numeric columns, category indices for
            // categorical ones.
            if (col.representative_values.empty()) {
                if (col.kind == ColumnKind::Categorical) {
                    for (std::size_t j = 0; j < col.categories.size(); ++j) {
                        col.representative_values.push_back(static_cast<double>(j));
                    }
                } else {
                    for (std::size_t j = 0; j + 1 < col.bin_edges.size(); ++j) {
                        col.representative_values.push_back(
                            0.5 * (col.bin_edges[j] + col.bin_edges[j + 1]));
                    }
                }
            }
            if (col.representative_values.size() != col.domain_size()) {
                fail(ErrorCode::InvalidArgument,
                     "column " + col.name + ": representative_values size mismatch");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (columns_[j].name == col.name) {
                    fail(ErrorCode::InvalidArgument, "duplicate column name " + col.name);
                }
            }
            if (col.is_label) {
                if (label_) fail(ErrorCode::InvalidArgument, "more than one label column");
                label_ = i;
            }
            if (col.is_protected && !protected_) protected_ = i;
            offsets_.push_back(offsets_.back() + col.domain_size());
        }
    }

    std::vector<ColumnSpec> columns_;
    std::vector<std::size_t> offsets_{0};
    std::optional<std::size_t> label_;
    std::optional<std::size_t> protected_;
};

}  // namespace cuts

#endif  // CUTS_SCHEMA_HPP
