#ifndef CUTS_TABLE_HPP
#define CUTS_TABLE_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/schema.hpp"

namespace cuts {

// One-hot encoded table. Rows are stored as per-feature category indices;
// the one-hot view (N x q, row sums K, block sums 1) is materialized on
// demand. Read-only after construction.
class EncodedTable {
public:
    EncodedTable() = default;

    EncodedTable(const Schema& schema, std::vector<std::uint32_t> cells)
        : schema_(&schema), cells_(std::move(cells)) {
        if (schema.num_features() == 0) {
            fail(ErrorCode::InvalidArgument, "empty schema");
        }
        if (cells_.size() % schema.num_features() != 0) {
            fail(ErrorCode::InvalidArgument, "cell count not divisible by feature count");
        }
        rows_ = cells_.size() / schema.num_features();
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t k = 0; k < schema.num_features(); ++k) {
                if (cell(i, k) >= schema.column(k).domain_size()) {
                    fail(ErrorCode::OutOfDomainValue,
                         "row " + std::to_string(i) + ", column " + schema.column(k).name);
                }
            }
        }
    }

    const Schema& schema() const { return *schema_; }
    std::size_t num_rows() const { return rows_; }
    std::size_t num_features() const { return schema_->num_features(); }

    // Category/bin index of feature k in row i.
    std::uint32_t cell(std::size_t i, std::size_t k) const {
        return cells_[i * schema_->num_features() + k];
    }

    // Dense one-hot view, N x q.
    Matrix one_hot() const {
        const std::size_t q = schema_->one_hot_width();
        Matrix m = Matrix::Zero(static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(q));
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t k = 0; k < num_features(); ++k) {
                m(static_cast<Eigen::Index>(i),
                  static_cast<Eigen::Index>(schema_->block_offset(k) + cell(i, k))) = 1.0;
            }
        }
        return m;
    }

    EncodedTable head(std::size_t n) const {
        n = std::min(n, rows_);
        std::vector<std::uint32_t> cells(cells_.begin(),
                                         cells_.begin() + static_cast<std::ptrdiff_t>(n * num_features()));
        return EncodedTable(*schema_, std::move(cells));
    }

    EncodedTable rows_where(const std::vector<bool>& keep) const {
        std::vector<std::uint32_t> cells;
        for (std::size_t i = 0; i < rows_; ++i) {
            if (!keep[i]) continue;
            for (std::size_t k = 0; k < num_features(); ++k) cells.push_back(cell(i, k));
        }
        return EncodedTable(*schema_, std::move(cells));
    }

    static EncodedTable concat(const EncodedTable& a, const EncodedTable& b) {
        std::vector<std::uint32_t> cells = a.cells_;
        cells.insert(cells.end(), b.cells_.begin(), b.cells_.end());
        return EncodedTable(a.schema(), std::move(cells));
    }

private:
    const Schema* schema_ = nullptr;
    std::vector<std::uint32_t> cells_;
    std::size_t rows_ = 0;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(line);
    while (std::getline(in, cur, ',')) out.push_back(trim(cur));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline std::uint32_t encode_cell(const Schema& schema, std::size_t feature,
                                 const std::string& raw, std::size_t row_index) {
    const auto& col = schema.column(feature);
    if (col.kind == ColumnKind::Categorical) {
        for (std::size_t j = 0; j < col.categories.size(); ++j) {
            if (col.categories[j] == raw) return static_cast<std::uint32_t>(j);
        }
        fail(ErrorCode::OutOfDomainValue,
             "row " + std::to_string(row_index) + ": '" + raw + "' not a category of " + col.name);
    }
    char* end = nullptr;
    double v = std::strtod(raw.c_str(), &end);
    if (end == raw.c_str() || *end != '\0') {
        fail(ErrorCode::OutOfDomainValue,
             "row " + std::to_string(row_index) + ": '" + raw + "' is not numeric for " + col.name);
    }
    try {
        return static_cast<std::uint32_t>(schema.bin_index(feature, v));
    } catch (const Error&) {
        fail(ErrorCode::OutOfDomainValue,
             "row " + std::to_string(row_index) + ": " + raw + " outside bins of " + col.name);
    }
}

}  // namespace detail

inline EncodedTable load_csv_stream(std::istream& in, const Schema& schema,
                                    const std::string& origin = "<stream>") {
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::IoError, origin + ": missing header row");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = detail::split_csv_line(line);
    if (header.size() != schema.num_features()) {
        fail(ErrorCode::UnknownColumn,
             origin + ": header has " + std::to_string(header.size()) + " columns, schema has " +
                 std::to_string(schema.num_features()));
    }
    for (std::size_t k = 0; k < header.size(); ++k) {
        if (header[k] != schema.column(k).name) {
            fail(ErrorCode::UnknownColumn,
                 origin + ": header column '" + header[k] + "' does not match schema column '" +
                     schema.column(k).name + "'");
        }
    }
    std::vector<std::uint32_t> cells;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim(line).empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != schema.num_features()) {
            fail(ErrorCode::RaggedRow,
                 origin + ": row " + std::to_string(row) + " has " +
                     std::to_string(fields.size()) + " fields");
        }
        for (std::size_t k = 0; k < fields.size(); ++k) {
            cells.push_back(detail::encode_cell(schema, k, fields[k], row));
        }
        ++row;
    }
    return EncodedTable(schema, std::move(cells));
}

inline EncodedTable load_csv(const std::string& path, const Schema& schema) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path);
    return load_csv_stream(in, schema, path);
}

// Decoded, human-readable form: category strings and bin representative
// values. Reloading the output reproduces the table bit-exactly as long as
// the representative values lie inside their bins (true for the defaults).
inline void write_csv_stream(std::ostream& out, const EncodedTable& table) {
    const Schema& schema = table.schema();
    for (std::size_t k = 0; k < schema.num_features(); ++k) {
        if (k) out << ',';
        out << schema.column(k).name;
    }
    out << '\n';
    std::ostringstream cell;
    for (std::size_t i = 0; i < table.num_rows(); ++i) {
        for (std::size_t k = 0; k < schema.num_features(); ++k) {
            if (k) out << ',';
            const auto& col = schema.column(k);
            if (col.kind == ColumnKind::Categorical) {
                out << col.categories[table.cell(i, k)];
            } else {
                cell.str("");
                cell << col.representative_values[table.cell(i, k)];
                out << cell.str();
            }
        }
        out << '\n';
    }
}

inline void write_csv(const std::string& path, const EncodedTable& table) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path);
    write_csv_stream(out, table);
}

}  // namespace cuts

#endif  // CUTS_TABLE_HPP
