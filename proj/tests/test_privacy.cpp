#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cuts/privacy.hpp"
#include "oracles.hpp"
#include "toy_data.hpp"

using namespace cuts;

TEST_CASE("eps-delta to rho conversion") {
    SECTION("satisfies the defining inequality tightly") {
        const double eps = 1.0, delta = 1e-9;
        const double rho = eps_delta_to_rho(eps, delta);
        auto eps_of = [&](double r) { return r + 2.0 * std::sqrt(r * std::log(1.0 / delta)); };
        CHECK(eps_of(rho) <= eps);
        CHECK(eps_of(rho + 1e-9) > eps);
    }
    SECTION("invalid budgets are rejected") {
        CHECK_THROWS_AS(eps_delta_to_rho(0.0, 1e-9), Error);
        CHECK_THROWS_AS(eps_delta_to_rho(1.0, 0.0), Error);
        CHECK_THROWS_AS(eps_delta_to_rho(1.0, 1.0), Error);
    }
    SECTION("monotone in eps") {
        Rng rng(4);
        std::uniform_real_distribution<double> u(0.01, 20.0);
        for (int i = 0; i < 30; ++i) {
            double a = u(rng), b = u(rng);
            if (a > b) std::swap(a, b);
            const double delta = 1e-7;
            CHECK(eps_delta_to_rho(a, delta) <= eps_delta_to_rho(b, delta) + 1e-12);
        }
    }
}

TEST_CASE("gaussian measurement") {
    auto toy = testing::product_binary({0.3, 0.7}, 100, 1);
    SECTION("sigma = 1 costs exactly one half") {
        auto ledger = PrivacyLedger::from_eps_delta(20.0, 1e-6);
        Rng rng(1);
        gaussian_measure(toy.table, MarginalSpec::of({0}), 1.0, rng, ledger, 0);
        CHECK(ledger.spent_rho() == 0.5);
        CHECK(ledger.audit());
    }
    SECTION("seeded noise is reproducible") {
        auto l1 = PrivacyLedger::from_eps_delta(20.0, 1e-6);
        auto l2 = PrivacyLedger::from_eps_delta(20.0, 1e-6);
        Rng r1(9), r2(9);
        auto a = gaussian_measure(toy.table, MarginalSpec::of({0, 1}), 2.0, r1, l1, 0);
        auto b = gaussian_measure(toy.table, MarginalSpec::of({0, 1}), 2.0, r2, l2, 0);
        CHECK(a == b);
    }
    SECTION("large sigma means cost near zero") {
        auto ledger = PrivacyLedger::from_eps_delta(1.0, 1e-9);
        Rng rng(2);
        gaussian_measure(toy.table, MarginalSpec::of({0}), 1e6, rng, ledger, 0);
        CHECK(ledger.spent_rho() < 1e-9);
    }
    SECTION("exceeding the budget throws BudgetExhausted") {
        auto ledger = PrivacyLedger::from_eps_delta(0.1, 1e-9);
        Rng rng(3);
        try {
            gaussian_measure(toy.table, MarginalSpec::of({0}), 0.01, rng, ledger, 0);
            FAIL("expected BudgetExhausted");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::BudgetExhausted);
        }
    }
}

TEST_CASE("exponential mechanism") {
    SECTION("gamma = 0 selects uniformly and costs nothing") {
        auto ledger = PrivacyLedger::from_eps_delta(1.0, 1e-9);
        Rng rng(5);
        std::vector<int> counts(3, 0);
        for (int i = 0; i < 30000; ++i) {
            ++counts[exp_select({0.0, 5.0, 10.0}, 0.0, rng, ledger, i)];
        }
        for (int c : counts) CHECK(std::abs(c / 30000.0 - 1.0 / 3.0) < 0.02);
        CHECK(ledger.spent_rho() == 0.0);
    }
    SECTION("single candidate is always selected and still charged") {
        auto ledger = PrivacyLedger::from_eps_delta(10.0, 1e-9);
        Rng rng(6);
        CHECK(exp_select({3.0}, 0.4, rng, ledger, 0) == 0);
        CHECK(ledger.spent_rho() == Catch::Approx(0.4 * 0.4 / 8.0));
    }
    SECTION("selection frequencies match exponential weights within 2%") {
        auto ledger = PrivacyLedger::from_eps_delta(1e6, 1e-9);
        Rng rng(7);
        const std::vector<double> scores{1.0, 2.0, 3.5};
        const double gamma = 1.3;
        std::vector<double> w(3);
        double total = 0.0;
        for (int i = 0; i < 3; ++i) total += (w[i] = std::exp(gamma * scores[i] / 2.0));
        std::vector<int> counts(3, 0);
        const int n = 100000;
        for (int i = 0; i < n; ++i) ++counts[exp_select(scores, gamma, rng, ledger, i)];
        for (int i = 0; i < 3; ++i) {
            CHECK(std::abs(counts[i] / static_cast<double>(n) - w[i] / total) < 0.02);
        }
    }
}

TEST_CASE("budget annealing follows the two-sided rule") {
    const double sigma = 2.0, gamma = 0.5;
    const std::size_t n_r = 4;
    const double expected = std::sqrt(2.0 / M_PI) * sigma * static_cast<double>(n_r);
    auto vec_with_gap = [&](double l1) {
        Vector a = Vector::Zero(4), b = Vector::Zero(4);
        a[0] = l1;  // |a - b|_1 == l1
        return std::make_pair(a, b);
    };

    SECTION("xi = 1 leaves both parameters unchanged") {
        auto [a, b] = vec_with_gap(expected);
        auto [s, g] = anneal(a, b, sigma, gamma, n_r);
        CHECK(s == Catch::Approx(sigma));
        CHECK(g == Catch::Approx(gamma));
    }
    SECTION("xi = 0.5 contracts sigma by sqrt(2) and expands gamma") {
        auto [a, b] = vec_with_gap(0.5 * expected);
        auto [s, g] = anneal(a, b, sigma, gamma, n_r);
        CHECK(s == Catch::Approx(sigma / std::sqrt(2.0)));
        CHECK(g == Catch::Approx(gamma * std::sqrt(2.0)));
    }
    SECTION("xi = 4 hits the sqrt(2) cap") {
        auto [a, b] = vec_with_gap(4.0 * expected);
        auto [s, g] = anneal(a, b, sigma, gamma, n_r);
        CHECK(s == Catch::Approx(sigma * std::sqrt(2.0)));
        CHECK(g == Catch::Approx(gamma / std::sqrt(2.0)));
    }
    SECTION("adaptation factor is always within [1/sqrt(2), sqrt(2)]") {
        Rng rng(8);
        std::uniform_real_distribution<double> u(0.0, 10.0);
        for (int i = 0; i < 200; ++i) {
            auto [a, b] = vec_with_gap(u(rng) * expected);
            auto [s, g] = anneal(a, b, sigma, gamma, n_r);
            CHECK(s / sigma >= 1.0 / std::sqrt(2.0) - 1e-12);
            CHECK(s / sigma <= std::sqrt(2.0) + 1e-12);
            CHECK(gamma / g >= 1.0 / std::sqrt(2.0) - 1e-12);
            CHECK(gamma / g <= std::sqrt(2.0) + 1e-12);
        }
    }
}

TEST_CASE("dp pretraining") {
    auto toy = testing::product_binary({0.5, 0.25, 0.7, 0.4}, 2000, 21);
    auto workload = marginal_workload(*toy.schema, WorkloadMode::All3Way);

    SECTION("infinite epsilon reduces to exact targets") {
        auto ledger = PrivacyLedger::from_eps_delta(std::numeric_limits<double>::infinity(), 1e-9);
        Generator gen(*toy.schema, 42);
        DpPretrainConfig cfg;
        cfg.batch_size = 300;
        cfg.refit_epochs = 30;
        cfg.seed = 5;
        auto result = dp_pretrain(gen, toy.table, workload, ledger, cfg);
        REQUIRE(result.measurements.size() == workload.size());
        for (std::size_t i = 0; i < workload.size(); ++i) {
            Vector exact = marginal(toy.table, workload[i], true).values;
            CHECK((result.measurements[i].target - exact).cwiseAbs().maxCoeff() < 1e-12);
        }
        CHECK(ledger.spent_rho() == 0.0);
    }

    SECTION("ledger audit holds and runs are seed-deterministic") {
        DpPretrainConfig cfg;
        cfg.batch_size = 200;
        cfg.refit_epochs = 15;
        cfg.max_rounds = 4;
        cfg.seed = 9;
        auto run = [&]() {
            auto ledger = PrivacyLedger::from_eps_delta(2.0, 1e-9);
            Generator gen(*toy.schema, 42);
            auto result = dp_pretrain(gen, toy.table, workload, ledger, cfg);
            REQUIRE(ledger.audit());
            CHECK(ledger.spent_rho() <= ledger.total_rho() + 1e-12);
            return std::make_pair(ledger.spent_rho(), gen.params()[0]);
        };
        auto [rho1, p1] = run();
        auto [rho2, p2] = run();
        CHECK(rho1 == rho2);
        CHECK(p1 == p2);
    }

    SECTION("toy run at eps=5 reaches usable fidelity") {
        auto ledger = PrivacyLedger::from_eps_delta(5.0, 1e-9);
        Generator gen(*toy.schema, 42);
        DpPretrainConfig cfg;
        cfg.batch_size = 400;
        cfg.refit_epochs = 80;
        cfg.max_rounds = 8;
        cfg.seed = 31;
        dp_pretrain(gen, toy.table, workload, ledger, cfg);
        REQUIRE(ledger.audit());
        auto targets = measure_targets(toy.table, workload);
        const double tv = mean_workload_tv(gen.sample(20000, 3), targets);
        INFO("mean workload tv " << tv);
        CHECK(tv < 0.15);
    }
}
