#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dice/inference.hpp"

namespace dice {

class ComparatorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---- TITE-CRM (logistic working model, one parameter) ----

struct Skeleton {
    std::vector<double> probabilities;
    std::size_t prior_mtd = 0;  // 0-based
    double halfwidth = 0.1;
    double intercept = 3.0;
};

/*
 * Indifference-interval skeleton for the logistic working model
 * p_j(b) = expit(a0 + exp(b) x_j). The prior MTD level is set to the target;
 * moving down (up) one level, b is solved so the current level sits at
 * target + delta (target - delta) and the neighbour is placed at
 * target - delta (target + delta) under that b.
 */
Skeleton skeleton_indifference(std::size_t levels, double target, std::size_t prior_mtd, double halfwidth,
                               double intercept = 3.0);

struct TiteObservation {
    std::size_t dose = 0;  // 0-based level
    double weight = 1.0;
    bool dlt = false;
};

struct TiteConfig {
    double prior_sd = std::sqrt(1.34);
    std::size_t grid_intervals = 2000;  // Simpson intervals, must be even
    double grid_halfwidth = 10.0;       // in prior sd units around 0
};

struct TitePosterior {
    double b_mean = 0.0;
    std::vector<double> estimate;  // plug-in at the posterior mean of b
    std::vector<double> lower;     // central credible band, per dose
    std::vector<double> upper;
    double coverage = 0.8;
    bool interval_computable = true;
};

double tite_dose_prob(const Skeleton& skeleton, std::size_t j, double b);

TitePosterior tite_posterior(std::span<const TiteObservation> obs, const Skeleton& skeleton, const TiteConfig& cfg,
                             double coverage);

// Credible coverage implied by a stopping threshold, 1 - 2 (1 - tau).
inline double tite_coverage(double tau) { return 1.0 - 2.0 * (1.0 - tau); }

struct TiteDecision {
    bool stop = false;
    std::size_t next = 0;
};

TiteDecision tite_next_and_stop(const TitePosterior& post, double target, std::optional<std::size_t> highest_tried);

// ---- Nonparametric benchmark over a complete outcome lattice ----

// dlt_counts[j] = patients with a DLT by the last cycle on sequence j, out of n.
std::size_t benchmark_select(std::span<const std::size_t> dlt_counts, std::size_t n, double target);

// ---- Conditional-hazard comparison model ----

struct FernandesParams {
    double alpha = 1.0;
    double beta = 0.5;
    double rho = 0.8;
};

// p = 1 - exp(-alpha (d - rho ddot)^+ - beta Dtilde d)
double fernandes_cond_prob(const FernandesParams& p, double dose, double max_prev_dose, double cum_prev_dose);

struct FernandesPatient {
    std::vector<double> doses;  // administered per completed cycle
    bool dlt = false;           // DLT in the last completed cycle
};

double fernandes_log_likelihood(const FernandesParams& p, std::span<const FernandesPatient> patients);

// Lognormal priors given as (log-mean, precision); rho ~ Beta(a, b).
struct FernandesPrior {
    double alpha_logmean = -0.8047190;
    double alpha_precision = 0.6213349;
    double beta_logmean = -1.498;
    double beta_precision = 0.621;
    double rho_a = 5.0;
    double rho_b = 1.0;
};

// Draws are (alpha, beta, rho) on the natural scale.
PosteriorDraws fernandes_posterior(std::span<const FernandesPatient> patients, const FernandesPrior& prior,
                                   const SamplerConfig& cfg, std::uint64_t seed);

struct FernandesStudyConfig {
    FernandesParams truth{1.0, 0.5, 0.8};
    std::vector<double> doses{0.02, 0.05, 0.10, 0.15, 0.23};
    std::size_t patients_per_dose = 6;
    std::size_t cycles = 6;
    std::size_t n_sims = 200;
    std::uint64_t seed = 1;
    FernandesPrior prior;
    SamplerConfig sampler = [] {
        SamplerConfig c;
        c.chains = 2;
        c.draws_per_chain = 2000;
        c.parallel_chains = false;
        return c;
    }();
};

struct ParameterSummary {
    double truth = 0.0;
    double estimate_median = 0.0, estimate_q1 = 0.0, estimate_q3 = 0.0;
    double bias_median = 0.0, bias_q1 = 0.0, bias_q3 = 0.0;
};

struct FernandesStudyResult {
    ParameterSummary alpha, beta, rho;
    std::size_t replicates_used = 0;
    std::size_t replicates_excluded = 0;
    std::vector<FernandesParams> estimates;  // posterior medians per used replicate
};

std::vector<FernandesPatient> simulate_fernandes_trial(const FernandesStudyConfig& cfg, Rng& rng);

FernandesStudyResult fernandes_bias_study(const FernandesStudyConfig& cfg);

}  // namespace dice
