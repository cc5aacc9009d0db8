// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "dice/comparators.hpp"
#include "dice/config.hpp"
#include "dice/inference.hpp"
#include "dice/results.hpp"
#include "dice/retrospective.hpp"
#include "dice/sim.hpp"
#include "oracles.hpp"
#include "service_fuzz.hpp"
#include "test_data.hpp"

using namespace dice;
namespace fs = std::filesystem;

namespace {

const fs::path kData = DICE_DATA_DIR;
const fs::path kConfigs = kData / ".." / "configs";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool within(double x, double target, double tol) { return std::abs(x - target) <= tol; }

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

// "name=observed (target +- tol)"
std::string obs(const std::string& name, double x, double target, double tol) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s=%.3f (%.3f +- %.3f)", name.c_str(), x, target, tol);
    return buf;
}

struct Check {
    bool ok = true;
    std::string detail;

    void add(bool pass, const std::string& what) {
        ok = ok && pass;
        if (!detail.empty()) detail += "; ";
        detail += what + (pass ? "" : " [miss]");
    }
};

struct Simulations {
    std::map<std::string, OperatingCharacteristics> cache;

    const OperatingCharacteristics& get(int scenario, Method m, std::size_t cohort) {
        const std::string key = std::to_string(scenario) + to_string(m) + std::to_string(cohort);
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        StudyOverrides o;
        o.cohort = cohort;
        const auto cfg = load_study_config(kConfigs / ("scenario" + std::to_string(scenario) + ".json"), o);
        const auto t0 = Clock::now();
        auto oc = run_study(m, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed);
        std::fprintf(stderr, "  [study] scenario %d %s cohort %zu: %zu replicates in %.1f s\n", scenario,
                     to_string(m).c_str(), cohort, cfg.n_sims, seconds_since(t0));
        return cache.emplace(key, std::move(oc)).first->second;
    }
};

Check identities() {
    Check c;
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int s = 1; s <= 6; ++s) {
        const auto sc = load_scenario(kData / "scenarios" / ("scenario" + std::to_string(s) + ".json"));
        for (const auto& row : sc.cumulative) {
            const auto back = cumulative_from_conditionals(conditionals_from_cumulative(row));
            for (std::size_t k = 0; k < row.size(); ++k) worst = std::max(worst, std::abs(back[k] - row[k]));
        }
    }
    c.add(worst <= 1e-12, "round-trip max error " + fmt("%.1e", worst) + " over 30 rows (<= 1e-12)");

    Rng rng(99);
    const auto panel = testing::sim_panel();
    const auto g = CycleWeight::linear(5);
    double tel = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const ModelParams t{-4.0 + 6.0 * rng.uniform(), rng.normal(0, 1), rng.normal(0, 1)};
        const auto& seq = panel[static_cast<std::size_t>(rng.uniform() * 5)].doses;
        double total = no_tox_prob(t, seq, 5, panel, g);
        for (std::size_t k = 1; k <= 5; ++k) total += cycle_tox_prob(t, seq, k, panel, g);
        tel = std::max(tel, std::abs(total - 1.0));
    }
    c.add(tel <= 1e-12, "telescoping max error " + fmt("%.1e", tel) + " over 1000 draws (<= 1e-12)");
    const double secs = seconds_since(t0);
    c.add(secs < 1.0, "runtime " + fmt("%.3f", secs) + " s (< 1 s)");
    return c;
}

Check likelihood_oracle() {
    Check c;
    const auto t0 = Clock::now();
    Rng rng(2024);
    const auto panel = testing::sim_panel();
    const auto g = CycleWeight::linear(5);
    double worst = 0.0;
    for (int i = 0; i < 500; ++i) {
        const auto pts = testing::random_cohort(panel, rng);
        const ModelParams t{-3.0 + 3.0 * rng.uniform(), rng.normal(0, 0.8), rng.normal(0, 0.8)};
        const double want = testing::oracle_loglik(t, pts, 10.0, 40.0, 5);
        worst = std::max(worst, std::abs(log_likelihood(t, pts, panel, g) - want) / std::abs(want));
        worst = std::max(worst, std::abs(LikelihoodTerms(pts, panel, g)(t) - want) / std::abs(want));
    }
    c.add(worst <= 1e-10, "max relative error " + fmt("%.1e", worst) + " over 500 cohorts (<= 1e-10)");
    const double secs = seconds_since(t0);
    c.add(secs < 10.0, "runtime " + fmt("%.3f", secs) + " s (< 10 s)");
    return c;
}

std::vector<double> column(const PosteriorDraws& d, int j) {
    std::vector<double> v;
    for (const auto& x : d.values) v.push_back(x[j]);
    return v;
}

Check posterior_sanity() {
    Check c;
    using testing::ks_distance;
    using testing::normal_cdf;
    const PriorSpec prior;
    SamplerConfig cfg;
    cfg.chains = 4;
    cfg.draws_per_chain = 12500;
    cfg.burn_in = 1000;
    cfg.thin = 5;
    const auto draws = sample_posterior([](const ModelParams&) { return 0.0; }, prior, cfg, 17);
    const double za = normal_cdf(prior.alpha_lower, -3, 2), zb = normal_cdf(prior.alpha_upper, -3, 2);
    const double ks[] = {
        ks_distance(column(draws, 0), [&](double x) { return (normal_cdf(x, -3, 2) - za) / (zb - za); }),
        ks_distance(column(draws, 1), [](double x) { return normal_cdf(x, 0, 2); }),
        ks_distance(column(draws, 2), [](double x) { return normal_cdf(x, 0, 2); })};
    const char* names[] = {"alpha", "beta", "gamma"};
    for (int j = 0; j < 3; ++j) {
        c.add(ks[j] < 0.02, std::string("KS ") + names[j] + "=" + fmt("%.4f", ks[j]) + " (< 0.02, " +
                                std::to_string(draws.size()) + " draws)");
    }

    const auto panel = testing::recovery_panel();
    const auto g = CycleWeight::linear(5);
    const ModelParams truth{-1.0, 0.0, 0.0};
    const auto pts = testing::synthetic_cohort(panel, g, truth, 200, 5);
    const auto post = sample_posterior(LikelihoodTerms(pts, panel, g), PriorSpec{}, SamplerConfig{}, 3);
    const double want[] = {truth.alpha, truth.beta, truth.gamma};
    for (int j = 0; j < 3; ++j) {
        const double m = sample_median(column(post, j));
        c.add(within(m, want[j], 0.3), obs(std::string("recovered ") + names[j], m, want[j], 0.3));
    }
    return c;
}

Check scenario1(Simulations& sims) {
    Check c;
    const auto t0 = Clock::now();
    const auto& oc = sims.get(1, Method::dice, 1);
    const double secs = seconds_since(t0);
    c.add(within(oc.pcs, 0.65, 0.07), obs("PCS", oc.pcs, 0.65, 0.07));
    c.add(within(oc.allocation[2], 0.441, 0.07), obs("allocation seq3", oc.allocation[2], 0.441, 0.07));
    c.add(within(oc.dlt_median, 10, 1), obs("DLT median", oc.dlt_median, 10, 1));
    c.add(secs < 1800, "runtime " + fmt("%.0f", secs) + " s (< 1800 s)");
    return c;
}

Check scenario3(Simulations& sims) {
    Check c;
    const auto& d = sims.get(3, Method::dice, 3);
    const auto& t = sims.get(3, Method::tite_crm, 3);
    c.add(within(d.pcs, 0.664, 0.07), obs("DICE PCS", d.pcs, 0.664, 0.07));
    c.add(within(t.pcs, 0.33, 0.08), obs("TITE-CRM PCS", t.pcs, 0.33, 0.08));
    c.add(d.pcs - t.pcs >= 0.2, "gap=" + fmt("%.3f", d.pcs - t.pcs) + " (>= 0.2)");
    return c;
}

Check scenario5(Simulations& sims) {
    Check c;
    const auto& oc = sims.get(5, Method::dice, 1);
    c.add(within(oc.pcs, 0.688, 0.07), obs("PCS", oc.pcs, 0.688, 0.07));
    c.add(within(oc.none, 0.144, 0.06), obs("none", oc.none, 0.144, 0.06));
    c.add(within(oc.benchmark_pcs, 0.929, 0.03), obs("benchmark PCS", oc.benchmark_pcs, 0.929, 0.03));
    return c;
}

Check scenario2_benchmark(Simulations& sims) {
    Check c;
    const auto& oc = sims.get(2, Method::dice, 1);
    c.add(within(oc.benchmark_pcs, 0.756, 0.05), obs("benchmark PCS", oc.benchmark_pcs, 0.756, 0.05));
    return c;
}

Check predictions(Simulations& sims) {
    Check c;
    for (std::size_t cohort : {std::size_t{1}, std::size_t{3}}) {
        const auto& oc = sims.get(2, Method::dice, cohort);
        const double pcs = predict_mts_study(oc, 4, 0.3)[4 + 1];  // true MTS_4 is sequence 5
        c.add(within(pcs, 0.84, 0.07), obs("scenario 2 MTS_4 PCS cohort " + std::to_string(cohort), pcs, 0.84, 0.07));
    }
    const auto& oc5 = sims.get(5, Method::dice, 1);
    const double pcs5 = predict_mts_study(oc5, 3, 0.3)[1 + 1];  // true MTS_3 is sequence 2
    c.add(within(pcs5, 0.53, 0.08), obs("scenario 5 MTS_3 PCS", pcs5, 0.53, 0.08));
    return c;
}

Check conditional_hazard_bias() {
    Check c;
    const auto hi = fernandes_config_from_json(read_json_file(kConfigs / "fernandes_rho08.json"), kConfigs);
    const auto lo = fernandes_config_from_json(read_json_file(kConfigs / "fernandes_rho04.json"), kConfigs);
    c.add(hi.study.n_sims == 200 && lo.study.n_sims == 200, "replicates " + std::to_string(hi.study.n_sims) + "/" +
                                                                std::to_string(lo.study.n_sims) + " (200)");
    const auto rh = fernandes_bias_study(hi.study);
    const auto rl = fernandes_bias_study(lo.study);
    c.add(within(rh.rho.estimate_median, 0.809, 0.05), obs("rho=0.8 median estimate", rh.rho.estimate_median, 0.809, 0.05));
    c.add(within(rl.rho.bias_median, 0.327, 0.08), obs("rho=0.4 median bias", rl.rho.bias_median, 0.327, 0.08));
    c.add(rl.rho.bias_median > 0.2 && rl.rho.bias_median > 5 * std::abs(rh.rho.bias_median),
          "large positive bias at rho=0.4 (" + fmt("%.3f", rl.rho.bias_median) + " vs " +
              fmt("%.3f", rh.rho.bias_median) + ")");
    return c;
}

Check scenario6_structure() {
    Check c;
    const auto cfg = load_study_config(kConfigs / "scenario6.json");
    std::size_t total = 0, first = 0;
    for (std::size_t r = 0; r < cfg.n_sims; ++r) {
        const auto lat = generate_complete_outcomes(cfg.scenario, cfg.settings.trial.max_sample_size,
                                                    derive_seed(replicate_seed(cfg.seed, r), 0));
        for (std::size_t i = 0; i < lat.patients(); ++i) {
            for (std::size_t j = 0; j < lat.sequences(); ++j) {
                if (const auto k = lat.dlt_cycle(i, j)) {
                    ++total;
                    first += k == 1;
                }
            }
        }
    }
    c.add(total > 0 && first == total,
          std::to_string(first) + " of " + std::to_string(total) + " generated DLTs at cycle 1 (100%)");
    return c;
}

Check determinism() {
    Check c;
    StudyOverrides o;
    o.n_sims = 100;
    o.cohort = 3;
    const auto cfg = load_study_config(kConfigs / "scenario4.json", o);
    auto results = [&](bool serial) {
        std::vector<MethodResult> out;
        for (Method m : cfg.methods) {
            MethodResult mr;
            mr.oc = serial ? run_study_serial(m, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed)
                           : run_study(m, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed);
            out.push_back(std::move(mr));
        }
        return study_results_json(cfg, out).dump();
    };
    const auto a = results(false), b = results(false), s = results(true);
    c.add(a == b, "re-run bit-identical (" + std::to_string(a.size()) + " bytes)");
    c.add(a == s, "parallel equals serial");

    const fs::path tmp = fs::temp_directory_path() / ("dice-acceptance-" + std::to_string(::getpid()));
    fs::remove_all(tmp);
    fs::create_directories(tmp / "ref");
    fs::create_directories(tmp / "crash");
    const auto rep = testing::crash_replay_fuzz(testing::fuzz_trial_config(kConfigs), tmp / "ref", tmp / "crash", 50);
    fs::remove_all(tmp);
    c.add(rep.steps == 50 && rep.crashes > 0 && rep.live_equal && rep.cold_equal,
          "crash/replay over " + std::to_string(rep.steps) + " requests, " + std::to_string(rep.events) + " events, " +
              std::to_string(rep.crashes) + " crashes: " + (rep.live_equal && rep.cold_equal ? "equal" : "diverged"));
    return c;
}

Check retrospective() {
    Check c;
    const auto cfg = trial_config_from_json(read_json_file(kConfigs / "retrospective_trial.json"));
    const auto records = records_from_rows(read_patient_csv(kData / "examples" / "synthetic_retrospective.csv"), cfg.panel);
    const auto r = retrospective_analysis(cfg, records);
    const std::size_t K = cfg.panel.cycles(), J = cfg.panel.size();
    bool shape = r.summary.estimate.size() == K;
    for (std::size_t k : {std::size_t{0}, K - 1}) {
        shape = shape && r.summary.estimate[k].size() == J;
        for (std::size_t j = 0; shape && j < J; ++j) {
            shape = r.summary.lower[k][j] <= r.summary.estimate[k][j] && r.summary.estimate[k][j] <= r.summary.upper[k][j];
        }
    }
    c.add(shape, std::to_string(J) + " sequences summarised at cycles 1 and " + std::to_string(K) +
                     " from " + std::to_string(r.patients) + " patients");
    c.add(r.stop == (r.summary.exceedance > cfg.tau),
          "stopping check applied (exceedance " + fmt("%.3f", r.summary.exceedance) + ", stop=" +
              (r.stop ? "yes" : "no") + ")");
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string only = argc > 1 ? argv[1] : "";
    Simulations sims;
    const std::vector<std::pair<std::string, std::function<Check()>>> criteria = {
        {"model-identities", identities},
        {"likelihood-oracle", likelihood_oracle},
        {"posterior-sanity", posterior_sanity},
        {"scenario1-dice-cohort1", [&] { return scenario1(sims); }},
        {"scenario3-dice-vs-tite", [&] { return scenario3(sims); }},
        {"scenario5-dice-cohort1", [&] { return scenario5(sims); }},
        {"scenario2-benchmark", [&] { return scenario2_benchmark(sims); }},
        {"horizon-predictions", [&] { return predictions(sims); }},
        {"conditional-hazard-bias", conditional_hazard_bias},
        {"scenario6-structure", scenario6_structure},
        {"determinism", determinism},
        {"retrospective-import", retrospective},
    };
    int failed = 0, run = 0;
    for (const auto& [name, fn] : criteria) {
        if (!only.empty() && name.find(only) == std::string::npos) continue;
        ++run;
        Check c;
        try {
            c = fn();
        } catch (const std::exception& e) {
            c.ok = false;
            c.detail = std::string("error: ") + e.what();
        }
        failed += !c.ok;
        std::printf("%s %s: %s\n", c.ok ? "PASS" : "FAIL", name.c_str(), c.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %d criteria passed\n", run - failed, run);
    return failed ? 1 : 0;
}
