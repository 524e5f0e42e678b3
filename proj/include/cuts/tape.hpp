#ifndef CUTS_TAPE_HPP
#define CUTS_TAPE_HPP

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cuts/common.hpp"

namespace cuts::grad {

class Tape;

// Handle to a tape entry. Cheap to copy; valid for the lifetime of the tape.
struct Node {
    Tape* tape = nullptr;
    std::size_t id = 0;

    Eigen::Index rows() const;
    Eigen::Index cols() const;
    const Matrix& value() const;
};

// Reverse-mode tape over dense float64 matrices. Nodes are appended in
// topological order; backward visits them in strictly descending id order,
// so gradients are deterministic for identical tapes.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    struct Gradients {
        std::vector<Matrix> grad;
        std::vector<char> present;

        bool has(Node n) const { return n.id < present.size() && present[n.id]; }
        const Matrix& operator[](Node n) const { return grad[n.id]; }
    };

private:
    struct Entry {
        Matrix value;
        bool needs_grad = false;
        // Receives the incoming gradient and scatters into the inputs.
        std::function<void(const Matrix&, Gradients&)> backward;
    };

    std::vector<Entry> entries_;

    Node push(Matrix value, bool needs_grad,
              std::function<void(const Matrix&, Gradients&)> backward) {
        entries_.push_back(Entry{std::move(value), needs_grad, std::move(backward)});
        return Node{this, entries_.size() - 1};
    }

    void accumulate(Gradients& g, std::size_t id, const Matrix& delta) const {
        if (!entries_[id].needs_grad) return;
        if (g.present[id]) {
            g.grad[id] += delta;
        } else {
            g.grad[id] = delta;
            g.present[id] = 1;
        }
    }

    static void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
        if (a.rows() != b.rows() || a.cols() != b.cols()) {
            fail(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
        }
    }

    static std::string shape_str(const Matrix& m) {
        return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
    }

public:
    std::size_t size() const { return entries_.size(); }
    const Matrix& value(std::size_t id) const { return entries_.at(id).value; }
    const Matrix& value(Node n) const { return entries_.at(n.id).value; }
    bool needs_grad(Node n) const { return entries_.at(n.id).needs_grad; }

    // ---- leaves ----

    Node constant(Matrix v) { return push(std::move(v), false, nullptr); }

    Node constant_scalar(double v) {
        Matrix m(1, 1);
        m(0, 0) = v;
        return constant(std::move(m));
    }

    // Leaf that participates in backward (model parameters, probe inputs).
    Node param(Matrix v) { return push(std::move(v), true, nullptr); }

    // ---- elementwise binaries with broadcasting ----
    // Shapes: equal, or one side is 1x1, or one side is 1xC against RxC.

    enum class Broadcast { None, LeftScalar, RightScalar, LeftRow, RightRow };

    static Broadcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
        if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::None;
        if (a.rows() == 1 && a.cols() == 1) return Broadcast::LeftScalar;
        if (b.rows() == 1 && b.cols() == 1) return Broadcast::RightScalar;
        if (a.rows() == 1 && a.cols() == b.cols()) return Broadcast::LeftRow;
        if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::RightRow;
        fail(ErrorCode::ShapeMismatch,
             std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
    }

    static Matrix expand(const Matrix& m, Broadcast kind, Eigen::Index rows, Eigen::Index cols,
                         bool left) {
        const bool is_broadcast = left ? (kind == Broadcast::LeftScalar || kind == Broadcast::LeftRow)
                                       : (kind == Broadcast::RightScalar || kind == Broadcast::RightRow);
        if (!is_broadcast) return m;
        if (kind == Broadcast::LeftScalar || kind == Broadcast::RightScalar) {
            return Matrix::Constant(rows, cols, m(0, 0));
        }
        return m.replicate(rows, 1);
    }

    // Reduce an output-shaped gradient back onto a possibly-broadcast input.
    static Matrix reduce_to(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
        if (g.rows() == rows && g.cols() == cols) return g;
        if (rows == 1 && cols == 1) {
            Matrix r(1, 1);
            r(0, 0) = g.sum();
            return r;
        }
        // 1 x C row broadcast
        return g.colwise().sum();
    }

private:
    template <typename Fwd, typename BwdL, typename BwdR>
    Node binary(Node a, Node b, const char* name, Fwd fwd, BwdL bwd_l, BwdR bwd_r) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        Broadcast kind = broadcast_kind(av, bv, name);
        const Eigen::Index rows = std::max(av.rows(), bv.rows());
        const Eigen::Index cols = std::max(av.cols(), bv.cols());
        Matrix ae = expand(av, kind, rows, cols, true);
        Matrix be = expand(bv, kind, rows, cols, false);
        Matrix out = fwd(ae, be);
        bool ng = needs_grad(a) || needs_grad(b);
        auto backward = [this, a, b, ae, be, bwd_l, bwd_r](const Matrix& g, Gradients& grads) {
            if (entries_[a.id].needs_grad) {
                accumulate(grads, a.id, reduce_to(bwd_l(g, ae, be), value(a).rows(), value(a).cols()));
            }
            if (entries_[b.id].needs_grad) {
                accumulate(grads, b.id, reduce_to(bwd_r(g, ae, be), value(b).rows(), value(b).cols()));
            }
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

public:
    Node add(Node a, Node b) {
        return binary(
            a, b, "add", [](const Matrix& x, const Matrix& y) { return Matrix(x + y); },
            [](const Matrix& g, const Matrix&, const Matrix&) { return g; },
            [](const Matrix& g, const Matrix&, const Matrix&) { return g; });
    }

    Node sub(Node a, Node b) {
        return binary(
            a, b, "sub", [](const Matrix& x, const Matrix& y) { return Matrix(x - y); },
            [](const Matrix& g, const Matrix&, const Matrix&) { return g; },
            [](const Matrix& g, const Matrix&, const Matrix&) { return Matrix(-g); });
    }

    Node mul(Node a, Node b) {
        return binary(
            a, b, "mul",
            [](const Matrix& x, const Matrix& y) { return Matrix(x.cwiseProduct(y)); },
            [](const Matrix& g, const Matrix&, const Matrix& y) { return Matrix(g.cwiseProduct(y)); },
            [](const Matrix& g, const Matrix& x, const Matrix&) { return Matrix(g.cwiseProduct(x)); });
    }

    Node div(Node a, Node b) {
        if ((value(b).array() == 0.0).any()) {
            fail(ErrorCode::DomainError, "div: zero denominator");
        }
        return binary(
            a, b, "div",
            [](const Matrix& x, const Matrix& y) { return Matrix(x.cwiseQuotient(y)); },
            [](const Matrix& g, const Matrix&, const Matrix& y) { return Matrix(g.cwiseQuotient(y)); },
            [](const Matrix& g, const Matrix& x, const Matrix& y) {
                return Matrix(-g.cwiseProduct(x).cwiseQuotient(y.cwiseProduct(y)));
            });
    }

    // Elementwise max of two same-shaped nodes; gradient follows the larger
    // side (ties go to the first argument).
    Node max2(Node a, Node b) {
        check_same_shape(value(a), value(b), "max2");
        Matrix out = value(a).cwiseMax(value(b));
        bool ng = needs_grad(a) || needs_grad(b);
        Matrix take_a = (value(a).array() >= value(b).array()).cast<double>();
        auto backward = [this, a, b, take_a](const Matrix& g, Gradients& grads) {
            if (entries_[a.id].needs_grad) accumulate(grads, a.id, g.cwiseProduct(take_a));
            if (entries_[b.id].needs_grad) {
                accumulate(grads, b.id, Matrix(g.cwiseProduct((1.0 - take_a.array()).matrix())));
            }
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    // ---- scalar-constant convenience ops ----

    Node scale(Node a, double c) {
        Matrix out = value(a) * c;
        bool ng = needs_grad(a);
        auto backward = [this, a, c](const Matrix& g, Gradients& grads) {
            accumulate(grads, a.id, Matrix(g * c));
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node add_const(Node a, double c) {
        Matrix out = value(a).array() + c;
        bool ng = needs_grad(a);
        auto backward = [this, a](const Matrix& g, Gradients& grads) { accumulate(grads, a.id, g); };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node neg(Node a) { return scale(a, -1.0); }

    // ---- elementwise unaries ----

private:
    template <typename Fwd, typename Bwd>
    Node unary(Node a, Fwd fwd, Bwd bwd) {
        Matrix out = fwd(value(a));
        bool ng = needs_grad(a);
        auto backward = [this, a, bwd](const Matrix& g, Gradients& grads) {
            accumulate(grads, a.id, bwd(g, value(a)));
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

public:
    Node abs(Node a) {
        return unary(
            a, [](const Matrix& x) { return Matrix(x.cwiseAbs()); },
            [](const Matrix& g, const Matrix& x) {
                return Matrix(g.cwiseProduct(x.unaryExpr(
                    [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); })));
            });
    }

    // max(x, 0); also the hinge used by the DL2-style comparison losses.
    Node relu(Node a) {
        return unary(
            a, [](const Matrix& x) { return Matrix(x.cwiseMax(0.0)); },
            [](const Matrix& g, const Matrix& x) {
                return Matrix(g.cwiseProduct(
                    x.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; })));
            });
    }

    Node exp(Node a) {
        return unary(
            a, [](const Matrix& x) { return Matrix(x.array().exp().matrix()); },
            [](const Matrix& g, const Matrix& x) {
                return Matrix(g.cwiseProduct(x.array().exp().matrix()));
            });
    }

    Node log(Node a) {
        if ((value(a).array() <= 0.0).any()) {
            fail(ErrorCode::DomainError, "log: non-positive argument");
        }
        return unary(
            a, [](const Matrix& x) { return Matrix(x.array().log().matrix()); },
            [](const Matrix& g, const Matrix& x) { return Matrix(g.cwiseQuotient(x)); });
    }

    Node sigmoid(Node a) {
        Matrix s = value(a).unaryExpr([](double v) {
            return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        });
        bool ng = needs_grad(a);
        auto backward = [this, a, s](const Matrix& g, Gradients& grads) {
            accumulate(grads, a.id,
                       Matrix(g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix()))));
        };
        return push(std::move(s), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    // ---- structural ops ----

    Node matmul(Node a, Node b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (av.cols() != bv.rows()) {
            fail(ErrorCode::ShapeMismatch, "matmul: " + shape_str(av) + " * " + shape_str(bv));
        }
        Matrix out = av * bv;
        bool ng = needs_grad(a) || needs_grad(b);
        auto backward = [this, a, b](const Matrix& g, Gradients& grads) {
            if (entries_[a.id].needs_grad) accumulate(grads, a.id, Matrix(g * value(b).transpose()));
            if (entries_[b.id].needs_grad) accumulate(grads, b.id, Matrix(value(a).transpose() * g));
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node transpose(Node a) {
        Matrix out = value(a).transpose();
        bool ng = needs_grad(a);
        auto backward = [this, a](const Matrix& g, Gradients& grads) {
            accumulate(grads, a.id, Matrix(g.transpose()));
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node sum(Node a) {
        Matrix out(1, 1);
        out(0, 0) = value(a).sum();
        bool ng = needs_grad(a);
        auto backward = [this, a](const Matrix& g, Gradients& grads) {
            accumulate(grads, a.id,
                       Matrix(Matrix::Constant(value(a).rows(), value(a).cols(), g(0, 0))));
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node mean(Node a) {
        const double n = static_cast<double>(value(a).size());
        return scale(sum(a), 1.0 / n);
    }

    // Column sums: R x C -> 1 x C.
    Node col_sum(Node a) {
        Matrix out = value(a).colwise().sum();
        bool ng = needs_grad(a);
        auto backward = [this, a](const Matrix& g, Gradients& grads) {
            accumulate(grads, a.id, Matrix(g.replicate(value(a).rows(), 1)));
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node col_mean(Node a) {
        return scale(col_sum(a), 1.0 / static_cast<double>(value(a).rows()));
    }

    // Column slice [start, start+len): the row-slice-by-column-mask primitive
    // specialized to contiguous feature blocks.
    Node slice_cols(Node a, Eigen::Index start, Eigen::Index len) {
        const Matrix& av = value(a);
        if (start < 0 || len < 0 || start + len > av.cols()) {
            fail(ErrorCode::ShapeMismatch, "slice_cols out of range");
        }
        Matrix out = av.middleCols(start, len);
        bool ng = needs_grad(a);
        auto backward = [this, a, start, len](const Matrix& g, Gradients& grads) {
            Matrix d = Matrix::Zero(value(a).rows(), value(a).cols());
            d.middleCols(start, len) = g;
            accumulate(grads, a.id, d);
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node slice_rows(Node a, Eigen::Index start, Eigen::Index len) {
        const Matrix& av = value(a);
        if (start < 0 || len < 0 || start + len > av.rows()) {
            fail(ErrorCode::ShapeMismatch, "slice_rows out of range");
        }
        Matrix out = av.middleRows(start, len);
        bool ng = needs_grad(a);
        auto backward = [this, a, start, len](const Matrix& g, Gradients& grads) {
            Matrix d = Matrix::Zero(value(a).rows(), value(a).cols());
            d.middleRows(start, len) = g;
            accumulate(grads, a.id, d);
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    Node concat_cols(Node a, Node b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (av.rows() != bv.rows()) {
            fail(ErrorCode::ShapeMismatch, "concat_cols: " + shape_str(av) + " vs " + shape_str(bv));
        }
        Matrix out(av.rows(), av.cols() + bv.cols());
        out << av, bv;
        bool ng = needs_grad(a) || needs_grad(b);
        auto backward = [this, a, b](const Matrix& g, Gradients& grads) {
            const Eigen::Index ac = value(a).cols();
            if (entries_[a.id].needs_grad) accumulate(grads, a.id, Matrix(g.leftCols(ac)));
            if (entries_[b.id].needs_grad) accumulate(grads, b.id, Matrix(g.rightCols(g.cols() - ac)));
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    // Per-row Kronecker (outer) product of two blocks:
    // (R x A), (R x B) -> (R x A*B), out[k, i*B+j] = a[k,i] * b[k,j].
    Node row_kron(Node a, Node b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (av.rows() != bv.rows()) {
            fail(ErrorCode::ShapeMismatch, "row_kron: " + shape_str(av) + " vs " + shape_str(bv));
        }
        const Eigen::Index rows = av.rows(), na = av.cols(), nb = bv.cols();
        Matrix out(rows, na * nb);
        for (Eigen::Index k = 0; k < rows; ++k) {
            for (Eigen::Index i = 0; i < na; ++i) {
                out.row(k).segment(i * nb, nb) = av(k, i) * bv.row(k);
            }
        }
        bool ng = needs_grad(a) || needs_grad(b);
        auto backward = [this, a, b, na, nb](const Matrix& g, Gradients& grads) {
            const Matrix& av2 = value(a);
            const Matrix& bv2 = value(b);
            const bool ga = entries_[a.id].needs_grad;
            const bool gb = entries_[b.id].needs_grad;
            Matrix da = ga ? Matrix::Zero(av2.rows(), na) : Matrix();
            Matrix db = gb ? Matrix::Zero(bv2.rows(), nb) : Matrix();
            for (Eigen::Index k = 0; k < av2.rows(); ++k) {
                for (Eigen::Index i = 0; i < na; ++i) {
                    const auto gseg = g.row(k).segment(i * nb, nb);
                    if (ga) da(k, i) = gseg.dot(bv2.row(k));
                    if (gb) db.row(k) += av2(k, i) * gseg;
                }
            }
            if (ga) accumulate(grads, a.id, da);
            if (gb) accumulate(grads, b.id, db);
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    // Softmax within each column block delimited by `offsets` (length m+1,
    // last entry == cols), independently per row.
    Node block_softmax(Node a, std::vector<Eigen::Index> offsets) {
        const Matrix& av = value(a);
        if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != av.cols()) {
            fail(ErrorCode::ShapeMismatch, "block_softmax: bad offsets");
        }
        Matrix s(av.rows(), av.cols());
        for (std::size_t bi = 0; bi + 1 < offsets.size(); ++bi) {
            const Eigen::Index off = offsets[bi], len = offsets[bi + 1] - offsets[bi];
            for (Eigen::Index k = 0; k < av.rows(); ++k) {
                auto seg = av.row(k).segment(off, len);
                double mx = seg.maxCoeff();
                Eigen::ArrayXd e = (seg.array() - mx).exp();
                s.row(k).segment(off, len) = (e / e.sum()).matrix();
            }
        }
        bool ng = needs_grad(a);
        Matrix saved = s;
        auto backward = [this, a, saved, offsets](const Matrix& g, Gradients& grads) {
            Matrix d(saved.rows(), saved.cols());
            for (std::size_t bi = 0; bi + 1 < offsets.size(); ++bi) {
                const Eigen::Index off = offsets[bi], len = offsets[bi + 1] - offsets[bi];
                for (Eigen::Index k = 0; k < saved.rows(); ++k) {
                    auto sseg = saved.row(k).segment(off, len);
                    auto gseg = g.row(k).segment(off, len);
                    const double dot = sseg.dot(gseg);
                    d.row(k).segment(off, len) =
                        sseg.cwiseProduct((gseg.array() - dot).matrix());
                }
            }
            accumulate(grads, a.id, d);
        };
        return push(std::move(s), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    // Unnormalized Kronecker-product marginal over the given feature blocks:
    // out (1 x prod(len_s)) = sum_k  x_k[b_1] (x) ... (x) x_k[b_m].
    // Equivalent to col_sum(row_kron(...)) but never materializes the
    // B x n_r intermediate. Rows that are exact one-hot take a counting
    // fast path.
    Node block_marginal(Node x, std::vector<std::pair<Eigen::Index, Eigen::Index>> blocks) {
        const Matrix& xv = value(x);
        Eigen::Index n_r = 1;
        for (auto [off, len] : blocks) {
            if (off < 0 || len <= 0 || off + len > xv.cols()) {
                fail(ErrorCode::ShapeMismatch, "block_marginal: block out of range");
            }
            n_r *= len;
        }
        const std::size_t m = blocks.size();
        Matrix out = Matrix::Zero(1, n_r);
        std::vector<double> cur, next;
        for (Eigen::Index k = 0; k < xv.rows(); ++k) {
            Eigen::Index hard_index = 0;
            bool hard = true;
            for (auto [off, len] : blocks) {
                Eigen::Index hot = -1;
                for (Eigen::Index j = 0; j < len && hard; ++j) {
                    const double v = xv(k, off + j);
                    if (v == 1.0 && hot < 0) hot = j;
                    else if (v != 0.0) hard = false;
                }
                if (hot < 0) hard = false;
                if (!hard) break;
                hard_index = hard_index * len + hot;
            }
            if (hard) {
                out(0, hard_index) += 1.0;
                continue;
            }
            cur.assign(1, 1.0);
            for (auto [off, len] : blocks) {
                next.assign(cur.size() * static_cast<std::size_t>(len), 0.0);
                for (std::size_t i = 0; i < cur.size(); ++i) {
                    for (Eigen::Index j = 0; j < len; ++j) {
                        next[i * static_cast<std::size_t>(len) + static_cast<std::size_t>(j)] =
                            cur[i] * xv(k, off + j);
                    }
                }
                cur.swap(next);
            }
            for (Eigen::Index j = 0; j < n_r; ++j) out(0, j) += cur[static_cast<std::size_t>(j)];
        }
        bool ng = needs_grad(x);
        // strides of each axis in the flattened combo index
        std::vector<Eigen::Index> strides(m, 1);
        for (std::size_t s = m; s-- > 1;) strides[s - 1] = strides[s] * blocks[s].second;
        auto backward = [this, x, blocks, strides, n_r, m](const Matrix& g, Gradients& grads) {
            const Matrix& xv2 = value(x);
            Matrix d = Matrix::Zero(xv2.rows(), xv2.cols());
            std::vector<Eigen::Index> idx(m);
            std::vector<double> pre(m + 1), post(m + 1);
            for (Eigen::Index k = 0; k < xv2.rows(); ++k) {
                Eigen::Index hard_index = 0;
                bool hard = true;
                std::vector<Eigen::Index> hot(m, -1);
                for (std::size_t s = 0; s < m && hard; ++s) {
                    auto [off, len] = blocks[s];
                    for (Eigen::Index j = 0; j < len && hard; ++j) {
                        const double v = xv2(k, off + j);
                        if (v == 1.0 && hot[s] < 0) hot[s] = j;
                        else if (v != 0.0) hard = false;
                    }
                    if (hot[s] < 0) hard = false;
                    if (hard) hard_index = hard_index * len + hot[s];
                }
                if (hard) {
                    // every single-axis substitution of the hot combo has a
                    // leave-one-out product of one
                    for (std::size_t s = 0; s < m; ++s) {
                        const Eigen::Index base = hard_index - hot[s] * strides[s];
                        for (Eigen::Index i = 0; i < blocks[s].second; ++i) {
                            d(k, blocks[s].first + i) += g(0, base + i * strides[s]);
                        }
                    }
                    continue;
                }
                for (Eigen::Index cell = 0; cell < n_r; ++cell) {
                    Eigen::Index rest = cell;
                    for (std::size_t s = m; s-- > 0;) {
                        idx[s] = rest % blocks[s].second;
                        rest /= blocks[s].second;
                    }
                    pre[0] = 1.0;
                    for (std::size_t s = 0; s < m; ++s) {
                        pre[s + 1] = pre[s] * xv2(k, blocks[s].first + idx[s]);
                    }
                    post[m] = 1.0;
                    for (std::size_t s = m; s-- > 0;) {
                        post[s] = post[s + 1] * xv2(k, blocks[s].first + idx[s]);
                    }
                    const double gz = g(0, cell);
                    if (gz == 0.0) continue;
                    for (std::size_t s = 0; s < m; ++s) {
                        d(k, blocks[s].first + idx[s]) += gz * pre[s] * post[s + 1];
                    }
                }
            }
            accumulate(grads, x.id, d);
        };
        return push(std::move(out), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    // Straight-through: forward takes the externally computed hard value,
    // backward passes the gradient through to `soft` unchanged.
    Node straight_through(Node soft, Matrix hard) {
        check_same_shape(value(soft), hard, "straight_through");
        bool ng = needs_grad(soft);
        auto backward = [this, soft](const Matrix& g, Gradients& grads) {
            accumulate(grads, soft.id, g);
        };
        return push(std::move(hard), ng, ng ? std::function<void(const Matrix&, Gradients&)>(backward) : nullptr);
    }

    // ---- backward pass ----

    Gradients backward(Node root) {
        const Matrix& rv = value(root);
        if (rv.rows() != 1 || rv.cols() != 1) {
            fail(ErrorCode::NonScalarRoot, "backward root must be scalar, got " + shape_str(rv));
        }
        Gradients g;
        g.grad.resize(entries_.size());
        g.present.assign(entries_.size(), 0);
        if (!entries_[root.id].needs_grad) return g;
        g.grad[root.id] = Matrix::Ones(1, 1);
        g.present[root.id] = 1;
        for (std::size_t i = root.id + 1; i-- > 0;) {
            if (!g.present[i] || !entries_[i].backward) continue;
            entries_[i].backward(g.grad[i], g);
        }
        return g;
    }
};

inline Eigen::Index Node::rows() const { return tape->value(id).rows(); }
inline Eigen::Index Node::cols() const { return tape->value(id).cols(); }
inline const Matrix& Node::value() const { return tape->value(id); }

// Operator sugar for readable loss construction.
inline Node operator+(Node a, Node b) { return a.tape->add(a, b); }
inline Node operator-(Node a, Node b) { return a.tape->sub(a, b); }
inline Node operator*(Node a, Node b) { return a.tape->mul(a, b); }
inline Node operator/(Node a, Node b) { return a.tape->div(a, b); }
inline Node operator-(Node a) { return a.tape->neg(a); }

}  // namespace cuts::grad

#endif  // CUTS_TAPE_HPP
