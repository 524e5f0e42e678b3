#ifndef CUTS_PRIVACY_HPP
#define CUTS_PRIVACY_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cuts/common.hpp"
#include "cuts/generator.hpp"
#include "cuts/marginal.hpp"
#include "cuts/pretrain.hpp"

namespace cuts {

// Largest rho satisfying rho + 2*sqrt(rho*ln(1/delta)) <= eps, by bisection.
inline double eps_delta_to_rho(double eps, double delta) {
    if (!(eps > 0.0) || !(delta > 0.0) || !(delta < 1.0)) {
        fail(ErrorCode::InvalidBudget, "need eps > 0 and 0 < delta < 1");
    }
    const double log1d = std::log(1.0 / delta);
    auto eps_of = [&](double rho) { return rho + 2.0 * std::sqrt(rho * log1d); };
    double lo = 0.0, hi = std::max(eps, 1.0);
    while (eps_of(hi) < eps) hi *= 2.0;
    while (hi - lo > 1e-12) {
        const double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;  // interval narrower than one ulp
        if (eps_of(mid) <= eps) lo = mid;
        else hi = mid;
    }
    return lo;
}

struct LedgerRound {
    int round = 0;
    double gamma = 0.0;  // 0 when the round spent nothing on selection
    double sigma = 0.0;
    MarginalSpec spec;
    double rho_cost = 0.0;
    double cumulative_rho = 0.0;
};

// zCDP accountant. The Gaussian mechanism costs 1/(2 sigma^2), the
// exponential mechanism gamma^2/8; costs compose additively and may never
// exceed the total budget.
class PrivacyLedger {
public:
    static PrivacyLedger from_eps_delta(double eps, double delta) {
        PrivacyLedger l;
        l.eps_ = eps;
        l.delta_ = delta;
        if (std::isinf(eps)) {
            l.infinite_ = true;
            l.total_rho_ = std::numeric_limits<double>::infinity();
        } else {
            l.total_rho_ = eps_delta_to_rho(eps, delta);
        }
        return l;
    }

    double eps() const { return eps_; }
    double delta() const { return delta_; }
    double total_rho() const { return total_rho_; }
    double spent_rho() const { return spent_; }
    bool infinite() const { return infinite_; }
    double remaining_rho() const { return infinite_ ? total_rho_ : total_rho_ - spent_; }
    const std::vector<LedgerRound>& rounds() const { return rounds_; }

    void charge(double rho, const LedgerRound& round_info) {
        if (rho < 0.0) fail(ErrorCode::InvalidBudget, "negative rho charge");
        if (!infinite_ && spent_ + rho > total_rho_ * (1.0 + 1e-12) + 1e-15) {
            fail(ErrorCode::BudgetExhausted,
                 "charge of " + std::to_string(rho) + " exceeds remaining budget");
        }
        spent_ += rho;
        LedgerRound r = round_info;
        r.rho_cost = rho;
        r.cumulative_rho = spent_;
        rounds_.push_back(std::move(r));
    }

    // Recomputes the spend from the round list and checks it against the cap.
    bool audit() const {
        if (infinite_) return true;
        double sum = 0.0;
        for (const auto& r : rounds_) sum += r.rho_cost;
        return sum <= total_rho_ * (1.0 + 1e-12) + 1e-15 && std::abs(sum - spent_) < 1e-9;
    }

    void write_csv(std::ostream& out, const Schema& schema) const {
        out << "round,gamma,sigma,spec,rho_cost,cumulative_rho\n";
        for (const auto& r : rounds_) {
            out << r.round << ',' << r.gamma << ',' << r.sigma << ','
                << (r.spec.feature_indices.empty() ? std::string("-") : r.spec.to_string(schema))
                << ',' << r.rho_cost << ',' << r.cumulative_rho << '\n';
        }
    }

private:
    double eps_ = 0.0;
    double delta_ = 0.0;
    double total_rho_ = 0.0;
    double spent_ = 0.0;
    bool infinite_ = false;
    std::vector<LedgerRound> rounds_;
};

// Unnormalized counts plus N(0, sigma^2) per cell; L2 sensitivity 1.
inline Vector gaussian_measure(const EncodedTable& table, const MarginalSpec& spec, double sigma,
                               Rng& rng, PrivacyLedger& ledger, int round) {
    if (sigma <= 0.0) fail(ErrorCode::InvalidBudget, "sigma must be positive");
    Vector counts = marginal(table, spec, false).values;
    if (!ledger.infinite()) {
        std::normal_distribution<double> noise(0.0, sigma);
        for (Eigen::Index i = 0; i < counts.size(); ++i) counts[i] += noise(rng);
    }
    LedgerRound info;
    info.round = round;
    info.sigma = sigma;
    info.spec = spec;
    ledger.charge(ledger.infinite() ? 0.0 : 1.0 / (2.0 * sigma * sigma), info);
    return counts;
}

// Exponential mechanism: P(i) proportional to exp(gamma * score_i / 2) for
// score sensitivity 1; costs gamma^2/8.
inline std::size_t exp_select(const std::vector<double>& scores, double gamma, Rng& rng,
                              PrivacyLedger& ledger, int round) {
    if (scores.empty()) fail(ErrorCode::InvalidArgument, "no candidates");
    if (gamma < 0.0) fail(ErrorCode::InvalidBudget, "gamma must be >= 0");
    const double mx = *std::max_element(scores.begin(), scores.end());
    std::vector<double> w(scores.size());
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        w[i] = std::exp(gamma * (scores[i] - mx) / 2.0);
        total += w[i];
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(rng) * total;
    double acc = 0.0;
    std::size_t pick = scores.size() - 1;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        acc += w[i];
        if (u < acc) {
            pick = i;
            break;
        }
    }
    LedgerRound info;
    info.round = round;
    info.gamma = gamma;
    ledger.charge(ledger.infinite() ? 0.0 : gamma * gamma / 8.0, info);
    return pick;
}

// Two-sided budget annealing. xi compares the model movement on the selected
// marginal against the expected noise magnitude; the per-round adaptation is
// capped at a factor of sqrt(2) in both directions.
inline std::pair<double, double> anneal(const Vector& m_now, const Vector& m_prev, double sigma,
                                        double gamma, std::size_t n_r) {
    const double expected = std::sqrt(2.0 / M_PI) * sigma * static_cast<double>(n_r);
    const double xi = (m_now - m_prev).cwiseAbs().sum() / expected;
    double factor;
    if (xi <= 1.0) {
        factor = std::max(xi, 1.0 / std::sqrt(2.0));
    } else {
        factor = std::min(xi, std::sqrt(2.0));
    }
    return {sigma * factor, gamma / factor};
}

struct DpPretrainConfig {
    Eigen::Index batch_size = 1000;   // also the sample size for model marginals
    long refit_epochs = 1000;         // generator epochs per outer round
    std::size_t group_size = 16;
    double base_lr = 1e-3;
    std::uint64_t seed = 42;
    bool spend_remainder = true;
    long max_rounds = 0;              // 0: until the budget runs out
    GumbelConfig gumbel;
};

struct DpPretrainResult {
    std::vector<MarginalTarget> measurements;  // clamped + renormalized
    std::vector<EpochStats> last_refit_history;
    long rounds = 0;
};

namespace detail {

// Clamp noisy counts at zero and renormalize into a TV target.
inline Vector project_to_simplex(const Vector& noisy) {
    Vector v = noisy.cwiseMax(0.0);
    const double s = v.sum();
    if (s <= 0.0) return Vector::Constant(noisy.size(), 1.0 / static_cast<double>(noisy.size()));
    return v / s;
}

inline Vector model_marginal_counts(const Generator& gen, const MarginalSpec& spec,
                                    Eigen::Index batch, double n_scale, Rng& rng) {
    auto sample = gen.sample(static_cast<std::size_t>(batch), rng());
    return marginal(sample, spec, true).values * n_scale;
}

}  // namespace detail

// AIM-style select/measure/refit loop with two-sided annealing. Reads the
// original table only for true marginal counts; the returned measurement set
// is what any later stage trains against.
inline DpPretrainResult dp_pretrain(Generator& gen, const EncodedTable& table,
                                    const std::vector<MarginalSpec>& workload,
                                    PrivacyLedger& ledger, const DpPretrainConfig& cfg) {
    if (workload.empty()) fail(ErrorCode::InvalidArgument, "empty workload");
    const Schema& schema = table.schema();
    const double n_data = static_cast<double>(table.num_rows());
    Rng rng(cfg.seed);

    DpPretrainResult result;

    PretrainConfig refit;
    refit.batch_size = cfg.batch_size;
    refit.epochs = cfg.refit_epochs;
    refit.group_size = cfg.group_size;
    refit.base_lr = cfg.base_lr;
    refit.gumbel = cfg.gumbel;

    // Infinite-budget sentinel: measure the whole workload exactly, refit once.
    if (ledger.infinite()) {
        for (std::size_t i = 0; i < workload.size(); ++i) {
            Vector exact = gaussian_measure(table, workload[i], 1.0, rng, ledger,
                                            static_cast<int>(i));
            result.measurements.push_back(
                make_target(schema, workload[i], detail::project_to_simplex(exact)));
        }
        refit.seed = derive_seed(cfg.seed, 1);
        result.last_refit_history = train_to_targets(gen, result.measurements, refit);
        result.rounds = 1;
        return result;
    }

    const double rho_total = ledger.total_rho();
    const long t_max = 16 * static_cast<long>(schema.num_features());
    // Even split across planned rounds, half per mechanism per round.
    double sigma = std::sqrt(static_cast<double>(t_max) / rho_total);
    double gamma = 2.0 * std::sqrt(rho_total / static_cast<double>(t_max));

    std::vector<Vector> true_counts;
    true_counts.reserve(workload.size());
    for (const auto& spec : workload) {
        true_counts.push_back(marginal(table, spec, false).values);
    }
    std::vector<std::optional<Vector>> last_noisy(workload.size());

    auto scores_now = [&](double sig) {
        auto sample = gen.sample(static_cast<std::size_t>(cfg.batch_size), rng());
        std::vector<double> scores(workload.size());
        for (std::size_t i = 0; i < workload.size(); ++i) {
            const double n_r = static_cast<double>(workload[i].domain_size(schema));
            Vector model = marginal(sample, workload[i], true).values * n_data;
            const Vector& ref = last_noisy[i] ? *last_noisy[i] : true_counts[i];
            const double gap = (model - ref).cwiseAbs().sum();
            scores[i] = std::max(0.0, gap - std::sqrt(2.0 / M_PI) * sig * n_r);
        }
        return scores;
    };

    auto refit_all = [&](long round) {
        refit.seed = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(round));
        result.measurements.clear();
        for (std::size_t i = 0; i < workload.size(); ++i) {
            if (!last_noisy[i]) continue;
            result.measurements.push_back(
                make_target(schema, workload[i], detail::project_to_simplex(*last_noisy[i])));
        }
        result.last_refit_history = train_to_targets(gen, result.measurements, refit);
    };

    long round = 0;
    while (true) {
        if (cfg.max_rounds > 0 && round >= cfg.max_rounds) break;
        const double round_cost = gamma * gamma / 8.0 + 1.0 / (2.0 * sigma * sigma);
        if (ledger.remaining_rho() < round_cost) break;

        auto scores = scores_now(sigma);
        const std::size_t pick = exp_select(scores, gamma, rng, ledger, static_cast<int>(round));
        const MarginalSpec& spec = workload[pick];
        const std::size_t n_r = spec.domain_size(schema);

        Vector before = detail::model_marginal_counts(gen, spec, cfg.batch_size, n_data, rng);
        last_noisy[pick] =
            gaussian_measure(table, spec, sigma, rng, ledger, static_cast<int>(round));
        refit_all(round);
        Vector after = detail::model_marginal_counts(gen, spec, cfg.batch_size, n_data, rng);

        auto [next_sigma, next_gamma] = anneal(after, before, sigma, gamma, n_r);
        sigma = next_sigma;
        gamma = next_gamma;
        ++round;
        if (!ledger.audit()) fail(ErrorCode::InvalidBudget, "ledger audit failed");
    }

    // Spend what is left on one more measurement. Selection runs through the
    // exponential mechanism when affordable; otherwise the pick is uniform
    // (data independent, free).
    if (cfg.spend_remainder && ledger.remaining_rho() > 1e-9 &&
        (cfg.max_rounds <= 0 || round < cfg.max_rounds)) {
        std::size_t pick;
        const double sel_cost = gamma * gamma / 8.0;
        if (ledger.remaining_rho() > 2.0 * sel_cost) {
            auto scores = scores_now(sigma);
            pick = exp_select(scores, gamma, rng, ledger, static_cast<int>(round));
        } else {
            pick = static_cast<std::size_t>(rng() % workload.size());
        }
        const double rest = ledger.remaining_rho();
        const double final_sigma = std::sqrt(1.0 / (2.0 * rest));
        last_noisy[pick] = gaussian_measure(table, workload[pick], final_sigma, rng, ledger,
                                            static_cast<int>(round));
        refit_all(round);
        ++round;
    }

    result.rounds = round;
    return result;
}

}  // namespace cuts

#endif  // CUTS_PRIVACY_HPP
