#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dice/core_model.hpp"
#include "dice/rng.hpp"

namespace dice {

class InferenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct NormalPrior {
    double mean = 0.0;
    double sd = 1.0;

    double log_density(double x) const {
        const double z = (x - mean) / sd;
        return -0.5 * z * z - std::log(sd);
    }
};

/*
 * Independent normal priors on (alpha, beta, gamma); alpha is truncated
 * to [alpha_lower, alpha_upper].
 */
struct PriorSpec {
    NormalPrior alpha{-3.0, 2.0};
    NormalPrior beta{0.0, 2.0};
    NormalPrior gamma{0.0, 2.0};
    double alpha_lower = -10.0;
    double alpha_upper = 5.0;

    void validate() const;
    bool in_support(const ModelParams& theta) const {
        return theta.alpha >= alpha_lower && theta.alpha <= alpha_upper;
    }
    // Unnormalized; kLogZero outside the truncation bounds.
    double log_density(const ModelParams& theta) const;
    ModelParams mean() const { return {alpha.mean, beta.mean, gamma.mean}; }
    ModelParams draw(Rng& rng) const;
};

struct SamplerConfig {
    std::size_t chains = 4;
    std::size_t draws_per_chain = 2500;
    std::size_t burn_in = 1000;
    std::size_t thin = 1;
    std::size_t adapt_window = 50;
    double target_accept_low = 0.23;
    double target_accept_high = 0.44;
    double rhat_threshold = 1.1;
    std::size_t min_draws = 100;
    bool parallel_chains = true;

    void validate() const;
    static SamplerConfig simulation_default() {
        SamplerConfig c;
        c.chains = 1;
        c.draws_per_chain = 2000;
        c.parallel_chains = false;
        return c;
    }
};

struct SamplerDiagnostics {
    std::vector<double> acceptance;   // per chain, averaged over coordinates
    std::array<double, 3> rhat{};     // split-chain potential scale reduction
    std::array<double, 3> final_scale{};
    bool convergence_warning = false;
};

// Draws of a three-parameter vector; for the DICE model (alpha, beta, gamma).
struct PosteriorDraws {
    std::vector<std::array<double, 3>> values;
    std::uint64_t seed = 0;
    SamplerDiagnostics diagnostics;

    std::size_t size() const { return values.size(); }
    bool empty() const { return values.empty(); }
    ModelParams theta(std::size_t i) const { return ModelParams::from(values[i]); }
};

struct Box3 {
    std::array<double, 3> lower{-INFINITY, -INFINITY, -INFINITY};
    std::array<double, 3> upper{INFINITY, INFINITY, INFINITY};

    bool contains(const std::array<double, 3>& x) const {
        for (int c = 0; c < 3; ++c) {
            if (x[c] < lower[c] || x[c] > upper[c]) return false;
        }
        return true;
    }
};

namespace detail {

struct ChainOutput {
    std::vector<std::array<double, 3>> draws;
    double acceptance = 0.0;
    std::array<double, 3> scale{};
};

/*
 * Componentwise random-walk Metropolis. Proposal scales are tuned in
 * windows during burn-in toward the configured acceptance band and then
 * frozen. Proposals leaving the support box are rejected outright.
 */
template <class LogTarget>
ChainOutput run_chain(const LogTarget& target, std::array<double, 3> x, std::array<double, 3> scale,
                      const Box3& box, const SamplerConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ChainOutput out;
    out.draws.reserve(cfg.draws_per_chain);
    double lp = target(x);
    std::array<std::size_t, 3> window_accept{};
    std::size_t kept_accept = 0;
    std::size_t kept_proposals = 0;
    const std::size_t total = cfg.burn_in + cfg.draws_per_chain * cfg.thin;
    for (std::size_t it = 0; it < total; ++it) {
        const bool burning = it < cfg.burn_in;
        for (int c = 0; c < 3; ++c) {
            std::array<double, 3> y = x;
            y[c] += scale[c] * rng.normal();
            const double log_u = std::log(rng.uniform_open());
            bool accept = false;
            if (y[c] >= box.lower[c] && y[c] <= box.upper[c]) {
                const double lpy = target(y);
                if (lpy != kLogZero && !std::isnan(lpy) && log_u < lpy - lp) {
                    x = y;
                    lp = lpy;
                    accept = true;
                }
            }
            if (burning) {
                window_accept[c] += accept ? 1 : 0;
            } else {
                kept_accept += accept ? 1 : 0;
                ++kept_proposals;
            }
        }
        if (burning && (it + 1) % cfg.adapt_window == 0) {
            for (int c = 0; c < 3; ++c) {
                const double rate = static_cast<double>(window_accept[c]) / static_cast<double>(cfg.adapt_window);
                if (rate < cfg.target_accept_low) {
                    scale[c] *= rate < 0.05 ? 0.4 : 0.75;
                } else if (rate > cfg.target_accept_high) {
                    scale[c] *= rate > 0.8 ? 2.0 : 1.35;
                }
                window_accept[c] = 0;
            }
        }
        if (!burning && (it - cfg.burn_in + 1) % cfg.thin == 0) out.draws.push_back(x);
    }
    out.acceptance = kept_proposals ? static_cast<double>(kept_accept) / static_cast<double>(kept_proposals) : 0.0;
    out.scale = scale;
    return out;
}

std::array<double, 3> split_rhat(std::span<const detail::ChainOutput> chains);

}  // namespace detail

/*
 * Generic sampler over a 3-vector. init(chain, rng) proposes a starting
 * point; up to 100 attempts per chain are made to find one with a finite
 * log target.
 */
template <class LogTarget, class InitFn>
PosteriorDraws sample_metropolis(const LogTarget& target, InitFn init, std::array<double, 3> initial_scale,
                                 const Box3& box, const SamplerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::vector<std::array<double, 3>> starts(cfg.chains);
    for (std::size_t ch = 0; ch < cfg.chains; ++ch) {
        Rng rng(derive_seed(seed, 1000 + ch));
        bool found = false;
        for (int attempt = 0; attempt < 100 && !found; ++attempt) {
            auto x = init(ch, attempt, rng);
            if (!box.contains(x)) continue;
            const double lp = target(x);
            if (lp != kLogZero && std::isfinite(lp)) {
                starts[ch] = x;
                found = true;
            }
        }
        if (!found) throw InferenceError("no starting point with finite log posterior");
    }
    std::vector<detail::ChainOutput> chains(cfg.chains);
    const long n_chains = static_cast<long>(cfg.chains);
#pragma omp parallel for schedule(static) if (cfg.parallel_chains && n_chains > 1)
    for (long ch = 0; ch < n_chains; ++ch) {
        chains[ch] = detail::run_chain(target, starts[ch], initial_scale, box, cfg,
                                       derive_seed(seed, static_cast<std::uint64_t>(ch)));
    }
    PosteriorDraws out;
    out.seed = seed;
    out.values.reserve(cfg.chains * cfg.draws_per_chain);
    for (const auto& c : chains) {
        out.values.insert(out.values.end(), c.draws.begin(), c.draws.end());
        out.diagnostics.acceptance.push_back(c.acceptance);
    }
    out.diagnostics.final_scale = chains.front().scale;
    out.diagnostics.rhat = detail::split_rhat(chains);
    for (double r : out.diagnostics.rhat) {
        if (!(r <= cfg.rhat_threshold)) out.diagnostics.convergence_warning = true;
    }
    if (out.values.size() < cfg.min_draws) throw InferenceError("too few posterior draws retained");
    return out;
}

// DICE posterior: log_lik(theta) plus the prior, alpha truncation enforced by rejection.
template <class LogLik>
PosteriorDraws sample_posterior(const LogLik& log_lik, const PriorSpec& prior, const SamplerConfig& cfg,
                                std::uint64_t seed) {
    prior.validate();
    auto target = [&](const std::array<double, 3>& v) {
        const ModelParams theta = ModelParams::from(v);
        const double lp = prior.log_density(theta);
        if (lp == kLogZero) return kLogZero;
        const double ll = log_lik(theta);
        if (ll == kLogZero || std::isnan(ll)) return kLogZero;
        return lp + ll;
    };
    auto init = [&](std::size_t chain, int attempt, Rng& rng) {
        ModelParams m = prior.mean();
        if (chain == 0 && attempt == 0) return m.as_array();
        // Overdispersed starts for the remaining chains and retries.
        const double spread = attempt == 0 ? 0.5 : 1.0;
        m.alpha = std::clamp(m.alpha + spread * prior.alpha.sd * rng.normal(), prior.alpha_lower, prior.alpha_upper);
        m.beta += spread * prior.beta.sd * rng.normal();
        m.gamma += spread * prior.gamma.sd * rng.normal();
        return m.as_array();
    };
    const std::array<double, 3> scale{0.5 * std::min(prior.alpha.sd, 1.0), 0.5 * std::min(prior.beta.sd, 1.0),
                                      0.5 * std::min(prior.gamma.sd, 1.0)};
    Box3 box;
    box.lower[0] = prior.alpha_lower;
    box.upper[0] = prior.alpha_upper;
    return sample_metropolis(target, init, scale, box, cfg, seed);
}

enum class Estimator { posterior_mean, posterior_median };

Estimator parse_estimator(const std::string& s);
std::string to_string(Estimator e);

// p_T of sequence j (0-based) truncated at cycle k.
double sequence_pT(const ModelParams& theta, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                   std::size_t k);

std::vector<double> sequence_pT_sample(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g,
                                       std::size_t j, std::size_t k);

double estimate_pT(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                   std::size_t k, Estimator estimator);

// Estimates for every sequence at horizon k.
std::vector<double> estimate_panel(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g,
                                   std::size_t k, Estimator estimator);

// P(p_T(sequence j) > threshold) under the draws, at the last cycle.
double exceedance_prob(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                       double threshold);

double sample_mean(std::span<const double> x);
double sample_median(std::span<const double> x);
double sample_quantile(std::span<const double> x, double q);

struct EssFit {
    double a = 0.0;
    double b = 0.0;
    double ess = 0.0;
    double mean = 0.0;
    double variance = 0.0;
    double median = 0.0;
    bool capped = false;
};

inline constexpr double kEssCap = 1e6;

// Beta moment match; throws when var >= mean (1 - mean).
EssFit beta_from_moments(double mean, double variance);

EssFit induced_prior_ess(const PriorSpec& prior, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                         std::size_t n_draws, std::uint64_t seed);

// Draws from the prior itself, shaped like a posterior (for prior checks and tests).
PosteriorDraws draw_prior(const PriorSpec& prior, std::size_t n, std::uint64_t seed);

}  // namespace dice
