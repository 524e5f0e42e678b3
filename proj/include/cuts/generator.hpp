#ifndef CUTS_GENERATOR_HPP
#define CUTS_GENERATOR_HPP

#include <algorithm>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/schema.hpp"
#include "cuts/table.hpp"
#include "cuts/tape.hpp"

namespace cuts {

struct GumbelConfig {
    double temperature = 1.0;  // > 0
    bool hard = true;          // straight-through output head
};

// Fully connected generator g: R^p -> one-hot row space. Four layers with
// identity skips wherever input and output widths match (the p->100 and the
// 200->200 layer). Parameters are [W1,b1,W2,b2,W3,b3,W4,b4].
class Generator {
public:
    static constexpr Eigen::Index kNoiseDim = 100;
    static constexpr Eigen::Index kHidden1 = 100;
    static constexpr Eigen::Index kHidden2 = 200;

    Generator() = default;

    Generator(const Schema& schema, std::uint64_t seed) : schema_(&schema) {
        schema_hash_ = schema.hash();
        q_ = static_cast<Eigen::Index>(schema.one_hot_width());
        for (auto off : schema.block_offsets()) {
            offsets_.push_back(static_cast<Eigen::Index>(off));
        }
        Rng rng(seed);
        params_.push_back(init_weight(kNoiseDim, kHidden1, rng));
        params_.push_back(Matrix::Zero(1, kHidden1));
        params_.push_back(init_weight(kHidden1, kHidden2, rng));
        params_.push_back(Matrix::Zero(1, kHidden2));
        params_.push_back(init_weight(kHidden2, kHidden2, rng));
        params_.push_back(Matrix::Zero(1, kHidden2));
        params_.push_back(init_weight(kHidden2, q_, rng));
        params_.push_back(Matrix::Zero(1, q_));
    }

    const Schema& schema() const { return *schema_; }
    std::uint64_t schema_hash() const { return schema_hash_; }
    Eigen::Index output_width() const { return q_; }
    const std::vector<Eigen::Index>& block_offsets() const { return offsets_; }

    std::vector<Matrix>& params() { return params_; }
    const std::vector<Matrix>& params() const { return params_; }

    struct Forward {
        grad::Node output;  // hard one-hot batch (straight-through)
        grad::Node soft;    // relaxed gumbel-softmax probabilities
    };

    // Builds the forward graph on `tape`. `param_nodes` must hold one node
    // per parameter (tape params when training, constants when sampling).
    Forward forward(grad::Tape& tape, const std::vector<grad::Node>& param_nodes,
                    const Matrix& z, const Matrix& gumbel, const GumbelConfig& gc) const {
        if (gc.temperature <= 0.0) fail(ErrorCode::InvalidArgument, "temperature must be > 0");
        if (z.cols() != kNoiseDim) fail(ErrorCode::ShapeMismatch, "noise width != p");
        auto zc = tape.constant(z);
        auto h1 = tape.relu(tape.add(tape.matmul(zc, param_nodes[0]), param_nodes[1]));
        h1 = tape.add(h1, zc);  // p == first hidden width
        auto h2 = tape.relu(tape.add(tape.matmul(h1, param_nodes[2]), param_nodes[3]));
        auto h3 = tape.relu(tape.add(tape.matmul(h2, param_nodes[4]), param_nodes[5]));
        h3 = tape.add(h3, h2);
        auto logits = tape.add(tape.matmul(h3, param_nodes[6]), param_nodes[7]);
        auto perturbed = tape.scale(tape.add(logits, tape.constant(gumbel)), 1.0 / gc.temperature);
        auto soft = tape.block_softmax(perturbed, offsets_);
        Matrix hard = harden(tape.value(soft));
        auto out = gc.hard ? tape.straight_through(soft, std::move(hard)) : soft;
        return Forward{out, soft};
    }

    // One training-step forward with fresh noise drawn from `rng`.
    Forward forward_fresh(grad::Tape& tape, const std::vector<grad::Node>& param_nodes,
                          Eigen::Index batch, const GumbelConfig& gc, Rng& rng) const {
        return forward(tape, param_nodes, draw_noise(batch, rng), draw_gumbel(batch, rng), gc);
    }

    Matrix draw_noise(Eigen::Index batch, Rng& rng) const {
        std::normal_distribution<double> normal(0.0, 1.0);
        Matrix z(batch, kNoiseDim);
        for (Eigen::Index i = 0; i < batch; ++i) {
            for (Eigen::Index j = 0; j < kNoiseDim; ++j) z(i, j) = normal(rng);
        }
        return z;
    }

    Matrix draw_gumbel(Eigen::Index batch, Rng& rng) const {
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        Matrix g(batch, q_);
        for (Eigen::Index i = 0; i < batch; ++i) {
            for (Eigen::Index j = 0; j < q_; ++j) {
                double u = std::clamp(unif(rng), 1e-12, 1.0 - 1e-12);
                g(i, j) = -std::log(-std::log(u));
            }
        }
        return g;
    }

    std::vector<grad::Node> param_nodes(grad::Tape& tape, bool trainable = true) const {
        std::vector<grad::Node> nodes;
        nodes.reserve(params_.size());
        for (const auto& p : params_) {
            nodes.push_back(trainable ? tape.param(p) : tape.constant(p));
        }
        return nodes;
    }

    // Draws n rows; no tape survives the call.
    EncodedTable sample(std::size_t n, std::uint64_t seed,
                        const GumbelConfig& gc = GumbelConfig{}) const {
        Rng rng(seed);
        std::vector<std::uint32_t> cells;
        cells.reserve(n * (offsets_.size() - 1));
        const std::size_t chunk = 10000;
        std::size_t done = 0;
        while (done < n) {
            const std::size_t take = std::min(chunk, n - done);
            grad::Tape tape;
            auto nodes = param_nodes(tape, false);
            auto fwd = forward(tape, nodes, draw_noise(static_cast<Eigen::Index>(take), rng),
                               draw_gumbel(static_cast<Eigen::Index>(take), rng), gc);
            append_cells(tape.value(fwd.output), cells);
            done += take;
        }
        return EncodedTable(*schema_, std::move(cells));
    }

    // Decodes a hard one-hot batch into table cells.
    void append_cells(const Matrix& hard, std::vector<std::uint32_t>& cells) const {
        for (Eigen::Index i = 0; i < hard.rows(); ++i) {
            for (std::size_t b = 0; b + 1 < offsets_.size(); ++b) {
                const Eigen::Index off = offsets_[b];
                const Eigen::Index len = offsets_[b + 1] - off;
                Eigen::Index arg = 0;
                hard.row(i).segment(off, len).maxCoeff(&arg);
                cells.push_back(static_cast<std::uint32_t>(arg));
            }
        }
    }

    EncodedTable batch_to_table(const Matrix& hard) const {
        std::vector<std::uint32_t> cells;
        cells.reserve(static_cast<std::size_t>(hard.rows()) * (offsets_.size() - 1));
        append_cells(hard, cells);
        return EncodedTable(*schema_, std::move(cells));
    }

    // ---- checkpoint io: magic + version + schema hash + float64 LE blob ----

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) fail(ErrorCode::IoError, "cannot write checkpoint " + path);
        out.write(kMagic, 8);
        write_u32(out, 1);
        write_u64(out, schema_hash_);
        write_u32(out, static_cast<std::uint32_t>(params_.size()));
        for (const auto& p : params_) {
            write_u32(out, static_cast<std::uint32_t>(p.rows()));
            write_u32(out, static_cast<std::uint32_t>(p.cols()));
            out.write(reinterpret_cast<const char*>(p.data()),
                      static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.size())));
        }
        if (!out) fail(ErrorCode::IoError, "short write to " + path);
    }

    static Generator load(const std::string& path, const Schema& schema) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(ErrorCode::IoError, "cannot open checkpoint " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, kMagic, 8) != 0) {
            fail(ErrorCode::CorruptCheckpoint, path + ": bad magic");
        }
        const std::uint32_t version = read_u32(in, path);
        if (version != 1) fail(ErrorCode::CorruptCheckpoint, path + ": unsupported version");
        const std::uint64_t hash = read_u64(in, path);
        if (hash != schema.hash()) {
            fail(ErrorCode::SchemaHashMismatch,
                 path + ": checkpoint was trained against a different schema");
        }
        Generator g(schema, 0);
        const std::uint32_t count = read_u32(in, path);
        if (count != g.params_.size()) fail(ErrorCode::CorruptCheckpoint, path + ": bad tensor count");
        for (auto& p : g.params_) {
            const std::uint32_t rows = read_u32(in, path);
            const std::uint32_t cols = read_u32(in, path);
            if (rows != p.rows() || cols != p.cols()) {
                fail(ErrorCode::CorruptCheckpoint, path + ": tensor shape mismatch");
            }
            in.read(reinterpret_cast<char*>(p.data()),
                    static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.size())));
            if (!in) fail(ErrorCode::CorruptCheckpoint, path + ": truncated blob");
        }
        return g;
    }

private:
    static constexpr const char kMagic[9] = "CUTSGEN1";

    static Matrix init_weight(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> unif(-bound, bound);
        Matrix w(fan_in, fan_out);
        for (Eigen::Index i = 0; i < fan_in; ++i) {
            for (Eigen::Index j = 0; j < fan_out; ++j) w(i, j) = unif(rng);
        }
        return w;
    }

    Matrix harden(const Matrix& soft) const {
        Matrix hard = Matrix::Zero(soft.rows(), soft.cols());
        for (Eigen::Index i = 0; i < soft.rows(); ++i) {
            for (std::size_t b = 0; b + 1 < offsets_.size(); ++b) {
                const Eigen::Index off = offsets_[b];
                const Eigen::Index len = offsets_[b + 1] - off;
                Eigen::Index arg = 0;
                soft.row(i).segment(off, len).maxCoeff(&arg);
                hard(i, off + arg) = 1.0;
            }
        }
        return hard;
    }

    static void write_u32(std::ostream& out, std::uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
    static void write_u64(std::ostream& out, std::uint64_t v) {
        out.write(reinterpret_cast<const char*>(&v), 8);
    }
    static std::uint32_t read_u32(std::istream& in, const std::string& path) {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        if (!in) fail(ErrorCode::CorruptCheckpoint, path + ": truncated header");
        return v;
    }
    static std::uint64_t read_u64(std::istream& in, const std::string& path) {
        std::uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        if (!in) fail(ErrorCode::CorruptCheckpoint, path + ": truncated header");
        return v;
    }

    const Schema* schema_ = nullptr;
    std::uint64_t schema_hash_ = 0;
    Eigen::Index q_ = 0;
    std::vector<Eigen::Index> offsets_;
    std::vector<Matrix> params_;
};

}  // namespace cuts

#endif  // CUTS_GENERATOR_HPP
