#ifndef CUTS_COMMON_HPP
#define CUTS_COMMON_HPP

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace cuts {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class ErrorCode {
    // schema / data
    UnknownColumn,
    OutOfDomainValue,
    RaggedRow,
    EmptyTable,
    MissingLabel,
    LengthMismatch,
    // grad core
    ShapeMismatch,
    DomainError,
    NonScalarRoot,
    // generator
    SchemaHashMismatch,
    CorruptCheckpoint,
    // privacy
    InvalidBudget,
    BudgetExhausted,
    // spec language
    SyntaxError,
    DuplicateDP,
    MissingEnd,
    UnknownFeature,
    UnknownCategory,
    TypeMismatch,
    ProtectedColumnMissing,
    BinBoundary,
    // compile / eval
    EmptyProtectedGroup,
    NonBinaryTarget,
    EmptyGroup,
    SingleClassTrain,
    AcceptanceTooLow,
    // generic
    IoError,
    InvalidArgument,
};

inline std::string_view error_code_name(ErrorCode c) {
    switch (c) {
    case ErrorCode::UnknownColumn: return "UnknownColumn";
    case ErrorCode::OutOfDomainValue: return "OutOfDomainValue";
    case ErrorCode::RaggedRow: return "RaggedRow";
    case ErrorCode::EmptyTable: return "EmptyTable";
    case ErrorCode::MissingLabel: return "MissingLabel";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::NonScalarRoot: return "NonScalarRoot";
    case ErrorCode::SchemaHashMismatch: return "SchemaHashMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::InvalidBudget: return "InvalidBudget";
    case ErrorCode::BudgetExhausted: return "BudgetExhausted";
    case ErrorCode::SyntaxError: return "SyntaxError";
    case ErrorCode::DuplicateDP: return "DuplicateDP";
    case ErrorCode::MissingEnd: return "MissingEnd";
    case ErrorCode::UnknownFeature: return "UnknownFeature";
    case ErrorCode::UnknownCategory: return "UnknownCategory";
    case ErrorCode::TypeMismatch: return "TypeMismatch";
    case ErrorCode::ProtectedColumnMissing: return "ProtectedColumnMissing";
    case ErrorCode::BinBoundary: return "BinBoundary";
    case ErrorCode::EmptyProtectedGroup: return "EmptyProtectedGroup";
    case ErrorCode::NonBinaryTarget: return "NonBinaryTarget";
    case ErrorCode::EmptyGroup: return "EmptyGroup";
    case ErrorCode::SingleClassTrain: return "SingleClassTrain";
    case ErrorCode::AcceptanceTooLow: return "AcceptanceTooLow";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
          code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

// Deterministic 64-bit RNG. All randomness in the project flows through
// instances of this type, seeded explicitly.
using Rng = std::mt19937_64;

// Derives an independent child seed from a master seed and a stream tag, so
// that separate pipeline stages do not share streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    std::seed_seq seq{master, stream};
    std::uint64_t out[2];
    seq.generate(out, out + 2);
    return out[0] ^ (out[1] << 1);
}

// FNV-1a, used for schema hashes and manifest keys.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 14695981039346656037ull) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace cuts

#endif  // CUTS_COMMON_HPP
