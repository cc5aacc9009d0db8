#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dice/inference.hpp"
#include "dice/sim.hpp"
#include "oracles.hpp"
#include "test_data.hpp"

using namespace dice;

namespace {

using testing::ks_distance;
using testing::normal_cdf;
using testing::synthetic_cohort;

std::vector<double> column(const PosteriorDraws& d, int c) {
    std::vector<double> v;
    for (const auto& x : d.values) v.push_back(x[c]);
    return v;
}

}  // namespace

TEST_CASE("no-data posterior reproduces the prior") {
    const PriorSpec prior;
    SamplerConfig cfg;
    cfg.chains = 4;
    cfg.draws_per_chain = 12500;
    cfg.burn_in = 1000;
    cfg.thin = 5;
    const auto draws = sample_posterior([](const ModelParams&) { return 0.0; }, prior, cfg, 17);
    REQUIRE(draws.size() == 50000);
    const double za = normal_cdf(prior.alpha_lower, -3, 2), zb = normal_cdf(prior.alpha_upper, -3, 2);
    const double ks_a = ks_distance(column(draws, 0), [&](double x) { return (normal_cdf(x, -3, 2) - za) / (zb - za); });
    const double ks_b = ks_distance(column(draws, 1), [](double x) { return normal_cdf(x, 0, 2); });
    const double ks_g = ks_distance(column(draws, 2), [](double x) { return normal_cdf(x, 0, 2); });
    CHECK(ks_a < 0.02);
    CHECK(ks_b < 0.02);
    CHECK(ks_g < 0.02);
    for (const auto& v : draws.values) REQUIRE((v[0] >= -10.0 && v[0] <= 5.0));
}

TEST_CASE("posterior recovers generating parameters from a 200-patient cohort") {
    const auto panel = testing::recovery_panel();
    const auto g = CycleWeight::linear(5);
    const ModelParams truth{-1.0, 0.0, 0.0};
    const auto pts = synthetic_cohort(panel, g, truth, 200, 5);
    const auto draws = sample_posterior(LikelihoodTerms(pts, panel, g), PriorSpec{}, SamplerConfig{}, 3);
    CHECK(std::abs(sample_median(column(draws, 0)) - truth.alpha) < 0.3);
    CHECK(std::abs(sample_median(column(draws, 1)) - truth.beta) < 0.3);
    CHECK(std::abs(sample_median(column(draws, 2)) - truth.gamma) < 0.3);
    CHECK_FALSE(draws.diagnostics.convergence_warning);
    for (double a : draws.diagnostics.acceptance) CHECK((a > 0.15 && a < 0.6));
}

TEST_CASE("posterior concentrates on the truth as the cohort grows") {
    const auto panel = testing::sim_panel();
    const auto g = CycleWeight::linear(5);
    const ModelParams truth{-1.2, 0.3, -0.2};
    const auto pts = synthetic_cohort(panel, g, truth, 5000, 5);
    const auto draws = sample_posterior(LikelihoodTerms(pts, panel, g), PriorSpec{}, SamplerConfig{}, 3);
    CHECK(std::abs(sample_median(column(draws, 0)) - truth.alpha) < 0.1);
    CHECK(std::abs(sample_median(column(draws, 1)) - truth.beta) < 0.15);
    CHECK(std::abs(sample_median(column(draws, 2)) - truth.gamma) < 0.1);
}

TEST_CASE("sampling is deterministic and chain parallelism does not change draws") {
    const auto panel = testing::sim_panel();
    const auto g = CycleWeight::linear(5);
    std::vector<PatientRecord> pts{{"a", 0, {5, 5, 5}, false}, {"b", 1, {7}, true}, {"c", 2, {10, 10}, false}};
    const LikelihoodTerms ll(pts, panel, g);
    SamplerConfig cfg;
    cfg.draws_per_chain = 500;
    cfg.parallel_chains = true;
    const auto a = sample_posterior(ll, PriorSpec{}, cfg, 42);
    const auto b = sample_posterior(ll, PriorSpec{}, cfg, 42);
    cfg.parallel_chains = false;
    const auto c = sample_posterior(ll, PriorSpec{}, cfg, 42);
    CHECK(a.values == b.values);
    CHECK(a.values == c.values);
    const auto d = sample_posterior(ll, PriorSpec{}, cfg, 43);
    CHECK(a.values != d.values);
}

TEST_CASE("degenerate prior collapses onto its means") {
    PriorSpec p;
    p.alpha.sd = p.beta.sd = p.gamma.sd = 1e-6;
    SamplerConfig cfg;
    cfg.draws_per_chain = 300;
    const auto draws = sample_posterior([](const ModelParams&) { return 0.0; }, p, cfg, 1);
    for (const auto& v : draws.values) {
        CHECK(std::abs(v[0] + 3.0) < 1e-3);
        CHECK(std::abs(v[1]) < 1e-3);
        CHECK(std::abs(v[2]) < 1e-3);
    }
}

TEST_CASE("quantiles follow the linear-interpolation definition") {
    const std::vector<double> x{3, 1, 4, 1, 5, 9, 2, 6};
    CHECK(sample_median(x) == doctest::Approx(3.5));
    CHECK(sample_quantile(x, 0.1) == doctest::Approx(1.0));
    CHECK(sample_quantile(x, 0.9) == doctest::Approx(6.9));
    CHECK(sample_quantile(x, 0.25) == doctest::Approx(1.75));
    CHECK(sample_mean(x) == doctest::Approx(3.875));
}

TEST_CASE("beta moment matching") {
    const auto f = beta_from_moments(0.3, 0.01);
    CHECK(f.ess == doctest::Approx(20.0));
    CHECK(f.a == doctest::Approx(6.0));
    CHECK(f.b == doctest::Approx(14.0));
    CHECK_THROWS_AS(beta_from_moments(0.3, 0.21), InferenceError);
    CHECK(beta_from_moments(0.3, 1e-20).capped);
}

TEST_CASE("prior ESS table matches the golden file") {
    const json golden = read_json_file(testing::data_path("golden/prior_ess.json"));
    const auto panel = testing::sim_panel();
    const auto g = CycleWeight::linear(5);
    const auto n = golden.at("n_draws").get<std::size_t>();
    const auto seed = golden.at("seed").get<std::uint64_t>();
    for (std::size_t j = 0; j < 5; ++j) {
        const auto fit = induced_prior_ess(PriorSpec{}, panel, g, j, n, seed);
        const auto& row = golden.at("sequences").at(j);
        CHECK(fit.ess == doctest::Approx(row.at("ess").get<double>()).epsilon(1e-12));
        CHECK(fit.median == doctest::Approx(row.at("median").get<double>()).epsilon(1e-12));
        // Independent large-sample computation; agreement up to Monte Carlo error.
        const auto& ind = golden.at("independent_check");
        CHECK(std::abs(fit.ess - ind.at("ess").at(j).get<double>()) < 0.03);
        CHECK(std::abs(fit.median - ind.at("median").at(j).get<double>()) < 0.01);
    }
    CHECK_THROWS_AS(induced_prior_ess(PriorSpec{}, panel, g, 0, 999, 1), InferenceError);
}

TEST_CASE("prior validation") {
    PriorSpec p;
    p.beta.sd = 0.0;
    CHECK_THROWS(p.validate());
    p = PriorSpec{};
    p.alpha_lower = 6.0;
    CHECK_THROWS(p.validate());
}

TEST_CASE("exceedance and panel estimates from draws") {
    const auto panel = testing::sim_panel();
    const auto g = CycleWeight::linear(5);
    PosteriorDraws d;
    d.values = {{-1.0, 0.0, 0.0}, {0.5, 0.0, 0.0}, {-5.0, 0.0, 0.0}};
    const double p1 = sequence_pT({0.5, 0.0, 0.0}, panel, g, 0, 5);
    CHECK(p1 > 0.3);
    CHECK(exceedance_prob(d, panel, g, 0, 0.3) == doctest::Approx(1.0 / 3.0));
    const auto est = estimate_panel(d, panel, g, 5, Estimator::posterior_median);
    CHECK(est.size() == 5);
    CHECK(std::is_sorted(est.begin(), est.end()));
}
