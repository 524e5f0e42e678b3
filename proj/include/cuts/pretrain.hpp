#ifndef CUTS_PRETRAIN_HPP
#define CUTS_PRETRAIN_HPP

#include <algorithm>
#include <numeric>
#include <utility>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/generator.hpp"
#include "cuts/marginal.hpp"
#include "cuts/optim.hpp"
#include "cuts/tape.hpp"

namespace cuts {

struct PretrainConfig {
    Eigen::Index batch_size = 15000;
    long epochs = 2000;
    std::size_t group_size = 16;     // marginals per update
    double base_lr = 1e-3;           // Adam default, cosine-annealed
    std::uint64_t seed = 42;
    GumbelConfig gumbel;
};

// A marginal-matching target: feature blocks in one-hot space plus the
// normalized distribution the generator should reproduce.
struct MarginalTarget {
    MarginalSpec spec;
    std::vector<std::pair<Eigen::Index, Eigen::Index>> blocks;
    Vector target;  // normalized
};

inline MarginalTarget make_target(const Schema& schema, const MarginalSpec& spec, Vector target) {
    MarginalTarget t;
    t.spec = spec;
    for (auto f : spec.feature_indices) {
        t.blocks.emplace_back(static_cast<Eigen::Index>(schema.block_offset(f)),
                              static_cast<Eigen::Index>(schema.block_size(f)));
    }
    t.target = std::move(target);
    return t;
}

// Measures every workload marginal of `table` once; training afterwards only
// sees the targets, never the rows.
inline std::vector<MarginalTarget> measure_targets(const EncodedTable& table,
                                                   const std::vector<MarginalSpec>& workload) {
    std::vector<MarginalTarget> out;
    out.reserve(workload.size());
    for (const auto& spec : workload) {
        out.push_back(make_target(table.schema(), spec, marginal(table, spec, true).values));
    }
    return out;
}

// Differentiable generated marginal, normalized by the batch size.
inline grad::Node generated_marginal(grad::Tape& tape, grad::Node batch,
                                     const MarginalTarget& target) {
    auto counts = tape.block_marginal(batch, target.blocks);
    return tape.scale(counts, 1.0 / static_cast<double>(batch.rows()));
}

// Sum over the group of TV distances between target and generated marginals.
inline grad::Node marginal_loss(grad::Tape& tape, grad::Node batch,
                                const std::vector<const MarginalTarget*>& group) {
    grad::Node loss = tape.constant_scalar(0.0);
    for (const auto* t : group) {
        auto gen = generated_marginal(tape, batch, *t);
        if (gen.cols() != t->target.size()) {
            fail(ErrorCode::LengthMismatch, "marginal_loss: target length mismatch");
        }
        auto target_const = tape.constant(t->target.transpose());
        auto tv = tape.scale(tape.sum(tape.abs(tape.sub(gen, target_const))), 0.5);
        loss = tape.add(loss, tv);
    }
    return loss;
}

struct EpochStats {
    long epoch = 0;
    double mean_tv = 0.0;
    double lr = 0.0;
};

// Shared TV-matching loop: one epoch shuffles the target list, partitions it
// into groups of `group_size`, and performs one Adam update per group with
// fresh noise. Used by both non-private pretraining and the DP refit.
inline std::vector<EpochStats> train_to_targets(Generator& gen,
                                                const std::vector<MarginalTarget>& targets,
                                                const PretrainConfig& cfg,
                                                long total_schedule_updates = -1) {
    if (targets.empty()) fail(ErrorCode::InvalidArgument, "no marginal targets");
    if (cfg.batch_size < 1 || cfg.group_size < 1) {
        fail(ErrorCode::InvalidArgument, "batch_size and group_size must be >= 1");
    }
    Rng rng(cfg.seed);
    AdamConfig adam;
    adam.lr = cfg.base_lr;
    AdamState state;
    state.reset(gen.params());

    const long groups_per_epoch =
        static_cast<long>((targets.size() + cfg.group_size - 1) / cfg.group_size);
    const long total_updates = total_schedule_updates > 0 ? total_schedule_updates
                                                          : cfg.epochs * groups_per_epoch;
    std::vector<std::size_t> order(targets.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<EpochStats> history;
    long update = 0;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double tv_sum = 0.0;
        double lr_last = cfg.base_lr;
        for (std::size_t start = 0; start < order.size(); start += cfg.group_size) {
            std::vector<const MarginalTarget*> group;
            for (std::size_t i = start; i < std::min(start + cfg.group_size, order.size()); ++i) {
                group.push_back(&targets[order[i]]);
            }
            grad::Tape tape;
            auto nodes = gen.param_nodes(tape, true);
            auto fwd = gen.forward_fresh(tape, nodes, cfg.batch_size, cfg.gumbel, rng);
            auto loss = marginal_loss(tape, fwd.output, group);
            tv_sum += tape.value(loss)(0, 0);
            auto grads = tape.backward(loss);
            std::vector<Matrix> g;
            g.reserve(nodes.size());
            for (auto n : nodes) {
                g.push_back(grads.has(n) ? grads[n]
                                         : Matrix::Zero(n.rows(), n.cols()));
            }
            lr_last = cfg.base_lr * cosine_lr_multiplier(update, total_updates);
            adam_step(gen.params(), g, state, adam, lr_last);
            ++update;
        }
        history.push_back(EpochStats{epoch, tv_sum / static_cast<double>(targets.size()), lr_last});
    }
    return history;
}

// Non-private pre-training: measure the workload once, then match it.
inline std::vector<EpochStats> pretrain(Generator& gen, const EncodedTable& table,
                                        const std::vector<MarginalSpec>& workload,
                                        const PretrainConfig& cfg) {
    auto targets = measure_targets(table, workload);
    return train_to_targets(gen, targets, cfg);
}

// Mean TV between the targets and the marginals of a concrete sample.
inline double mean_workload_tv(const EncodedTable& sample,
                               const std::vector<MarginalTarget>& targets) {
    double sum = 0.0;
    for (const auto& t : targets) {
        MarginalVector a{t.target, true};
        sum += tv_distance(a, marginal(sample, t.spec, true));
    }
    return sum / static_cast<double>(targets.size());
}

}  // namespace cuts

#endif  // CUTS_PRETRAIN_HPP
