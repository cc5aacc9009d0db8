#include "dice/comparators.hpp"

#include <algorithm>
#include <map>

#include "dice/design.hpp"

namespace dice {

Skeleton skeleton_indifference(std::size_t levels, double target, std::size_t prior_mtd, double halfwidth,
                               double intercept) {
    if (levels < 1) throw ComparatorError("skeleton needs at least one level");
    if (prior_mtd >= levels) throw ComparatorError("prior MTD level out of range");
    if (!(target > 0.0 && target < 1.0)) throw ComparatorError("target must lie in (0, 1)");
    if (!(halfwidth > 0.0 && halfwidth < std::min(target, 1.0 - target))) {
        throw ComparatorError("halfwidth must lie in (0, min(target, 1 - target))");
    }
    if (!(logit(target + halfwidth) < intercept)) throw ComparatorError("intercept too small for target");

    const double up = logit(target + halfwidth) - intercept;
    const double down = logit(target - halfwidth) - intercept;
    std::vector<double> x(levels);
    x[prior_mtd] = logit(target) - intercept;
    for (std::size_t k = prior_mtd; k > 0; --k) {
        const double eb = up / x[k];  // exp(b) placing level k at target + delta
        x[k - 1] = down / eb;
    }
    for (std::size_t k = prior_mtd; k + 1 < levels; ++k) {
        const double eb = down / x[k];  // exp(b) placing level k at target - delta
        x[k + 1] = up / eb;
    }
    Skeleton s;
    s.prior_mtd = prior_mtd;
    s.halfwidth = halfwidth;
    s.intercept = intercept;
    s.probabilities.resize(levels);
    for (std::size_t k = 0; k < levels; ++k) {
        s.probabilities[k] = expit(intercept + x[k]);
        if (!(s.probabilities[k] > 0.0 && s.probabilities[k] < 1.0)) throw ComparatorError("skeleton left (0, 1)");
        if (k > 0 && !(s.probabilities[k] > s.probabilities[k - 1])) {
            throw ComparatorError("skeleton not strictly increasing");
        }
    }
    s.probabilities[prior_mtd] = target;
    return s;
}

double tite_dose_prob(const Skeleton& skeleton, std::size_t j, double b) {
    const double x = logit(skeleton.probabilities[j]) - skeleton.intercept;
    return expit(skeleton.intercept + std::exp(b) * x);
}

namespace {

struct TiteTerm {
    double x;
    double weight;
    bool dlt;
    double count;
};

std::vector<TiteTerm> tite_terms(std::span<const TiteObservation> obs, const Skeleton& skeleton) {
    std::map<std::tuple<std::size_t, double, bool>, double> counts;
    for (const auto& o : obs) {
        if (o.dose >= skeleton.probabilities.size()) throw ComparatorError("observation dose level out of range");
        if (!(o.weight >= 0.0 && o.weight <= 1.0)) throw ComparatorError("TITE weight outside [0, 1]");
        if (o.dlt && o.weight != 1.0) throw ComparatorError("DLT observations carry weight 1");
        counts[{o.dose, o.weight, o.dlt}] += 1.0;
    }
    std::vector<TiteTerm> terms;
    for (const auto& [key, n] : counts) {
        const auto& [dose, w, y] = key;
        terms.push_back({logit(skeleton.probabilities[dose]) - skeleton.intercept, w, y, n});
    }
    return terms;
}

}  // namespace

TitePosterior tite_posterior(std::span<const TiteObservation> obs, const Skeleton& skeleton, const TiteConfig& cfg,
                             double coverage) {
    if (skeleton.probabilities.empty()) throw ComparatorError("empty skeleton");
    for (double p : skeleton.probabilities) {
        if (!(p > 0.0 && p < expit(skeleton.intercept))) throw ComparatorError("skeleton value incompatible with intercept");
    }
    if (cfg.grid_intervals < 2 || cfg.grid_intervals % 2) throw ComparatorError("grid intervals must be even");
    if (!(coverage > 0.0 && coverage < 1.0)) throw ComparatorError("coverage must lie in (0, 1)");
    const auto terms = tite_terms(obs, skeleton);
    const std::size_t n = cfg.grid_intervals;
    const double lo = -cfg.grid_halfwidth * cfg.prior_sd;
    const double hi = cfg.grid_halfwidth * cfg.prior_sd;
    const double h = (hi - lo) / static_cast<double>(n);

    std::vector<double> b(n + 1), logpost(n + 1);
    double max_lp = -INFINITY;
    for (std::size_t i = 0; i <= n; ++i) {
        b[i] = lo + h * static_cast<double>(i);
        const double eb = std::exp(b[i]);
        double lp = -0.5 * (b[i] / cfg.prior_sd) * (b[i] / cfg.prior_sd);
        for (const auto& t : terms) {
            const double wp = t.weight * expit(skeleton.intercept + eb * t.x);
            lp += t.count * (t.dlt ? std::log(wp) : std::log1p(-wp));
        }
        logpost[i] = lp;
        if (lp > max_lp) max_lp = lp;
    }
    if (!std::isfinite(max_lp)) throw ComparatorError("TITE likelihood is identically zero");

    std::vector<double> dens(n + 1);
    for (std::size_t i = 0; i <= n; ++i) dens[i] = std::exp(logpost[i] - max_lp);
    double z = 0.0, m1 = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        z += w * dens[i];
        m1 += w * dens[i] * b[i];
    }
    TitePosterior post;
    post.coverage = coverage;
    const std::size_t J = skeleton.probabilities.size();
    post.estimate.resize(J);
    post.lower.assign(J, NAN);
    post.upper.assign(J, NAN);
    if (!(z > 0.0) || !std::isfinite(z)) {
        post.interval_computable = false;
        post.b_mean = 0.0;
        for (std::size_t j = 0; j < J; ++j) post.estimate[j] = skeleton.probabilities[j];
        return post;
    }
    post.b_mean = m1 / z;
    for (std::size_t j = 0; j < J; ++j) post.estimate[j] = tite_dose_prob(skeleton, j, post.b_mean);

    // Trapezoid CDF on the grid for the quantiles of b.
    std::vector<double> cdf(n + 1, 0.0);
    for (std::size_t i = 1; i <= n; ++i) cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]);
    const double total = cdf[n];
    auto quantile = [&](double q) -> std::optional<double> {
        const double target = q * total;
        const auto it = std::lower_bound(cdf.begin(), cdf.end(), target);
        if (it == cdf.begin() || it == cdf.end()) return std::nullopt;
        const std::size_t i = static_cast<std::size_t>(it - cdf.begin());
        if (i >= n) return std::nullopt;  // mass piled on the upper edge
        const double span = cdf[i] - cdf[i - 1];
        const double frac = span > 0.0 ? (target - cdf[i - 1]) / span : 0.0;
        return b[i - 1] + frac * h;
    };
    const auto b_lo = quantile(0.5 - coverage / 2.0);
    const auto b_hi = quantile(0.5 + coverage / 2.0);
    if (!b_lo || !b_hi || !(*b_hi > *b_lo) || !(total > 0.0)) {
        post.interval_computable = false;
        return post;
    }
    // p_j decreases in b, so the upper quantile of b gives the lower bound.
    for (std::size_t j = 0; j < J; ++j) {
        post.lower[j] = tite_dose_prob(skeleton, j, *b_hi);
        post.upper[j] = tite_dose_prob(skeleton, j, *b_lo);
    }
    return post;
}

TiteDecision tite_next_and_stop(const TitePosterior& post, double target, std::optional<std::size_t> highest_tried) {
    TiteDecision d;
    d.stop = !post.interval_computable || !std::isfinite(post.lower.at(0)) || post.lower[0] > target;
    d.next = recommend_next(post.estimate, target, highest_tried);
    return d;
}

std::size_t benchmark_select(std::span<const std::size_t> dlt_counts, std::size_t n, double target) {
    if (n == 0) throw ComparatorError("benchmark needs at least one patient");
    std::vector<double> p(dlt_counts.size());
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = static_cast<double>(dlt_counts[j]) / static_cast<double>(n);
    return closest_to_target(p, target);
}

double fernandes_cond_prob(const FernandesParams& p, double dose, double max_prev_dose, double cum_prev_dose) {
    const double excess = std::max(dose - p.rho * max_prev_dose, 0.0);
    return -std::expm1(-p.alpha * excess - p.beta * cum_prev_dose * dose);
}

namespace {

// log P(no DLT at this cycle) and log P(DLT at this cycle) given survival so far.
double fernandes_patient_loglik(const FernandesParams& p, const FernandesPatient& pt) {
    double ll = 0.0;
    double max_prev = 0.0;
    double cum_prev = 0.0;
    for (std::size_t k = 0; k < pt.doses.size(); ++k) {
        const double d = pt.doses[k];
        const double hazard = p.alpha * std::max(d - p.rho * max_prev, 0.0) + p.beta * cum_prev * d;
        const bool last = k + 1 == pt.doses.size();
        if (last && pt.dlt) {
            const double prob = -std::expm1(-hazard);
            if (!(prob > 1e-300)) return kLogZero;
            ll += std::log(prob);
        } else {
            ll -= hazard;
        }
        max_prev = std::max(max_prev, d);
        cum_prev += d;
    }
    return ll;
}

}  // namespace

double fernandes_log_likelihood(const FernandesParams& p, std::span<const FernandesPatient> patients) {
    double ll = 0.0;
    for (const auto& pt : patients) {
        const double v = fernandes_patient_loglik(p, pt);
        if (v == kLogZero) return kLogZero;
        ll += v;
    }
    return ll;
}

PosteriorDraws fernandes_posterior(std::span<const FernandesPatient> patients, const FernandesPrior& prior,
                                   const SamplerConfig& cfg, std::uint64_t seed) {
    // Collapse identical histories.
    std::map<std::pair<std::vector<double>, bool>, double> groups;
    for (const auto& pt : patients) groups[{pt.doses, pt.dlt}] += 1.0;
    std::vector<std::pair<FernandesPatient, double>> terms;
    for (const auto& [key, n] : groups) terms.push_back({FernandesPatient{key.first, key.second}, n});

    const NormalPrior la{prior.alpha_logmean, 1.0 / std::sqrt(prior.alpha_precision)};
    const NormalPrior lb{prior.beta_logmean, 1.0 / std::sqrt(prior.beta_precision)};
    // Sampled on (log alpha, log beta, logit rho); the last block includes the Jacobian.
    auto target = [&](const std::array<double, 3>& u) {
        const double rho = expit(u[2]);
        if (!(rho > 0.0 && rho < 1.0)) return kLogZero;
        const FernandesParams p{std::exp(u[0]), std::exp(u[1]), rho};
        double lp = la.log_density(u[0]) + lb.log_density(u[1]) + prior.rho_a * log_expit(u[2]) +
                    prior.rho_b * log_expit(-u[2]);
        for (const auto& [pt, n] : terms) {
            const double v = fernandes_patient_loglik(p, pt);
            if (v == kLogZero) return kLogZero;
            lp += n * v;
        }
        return lp;
    };
    const double rho_mean = prior.rho_a / (prior.rho_a + prior.rho_b);
    auto init = [&](std::size_t chain, int attempt, Rng& rng) {
        std::array<double, 3> u{la.mean, lb.mean, logit(std::clamp(rho_mean, 0.05, 0.95))};
        if (chain == 0 && attempt == 0) return u;
        u[0] += 0.5 * la.sd * rng.normal();
        u[1] += 0.5 * lb.sd * rng.normal();
        u[2] += 0.5 * rng.normal();
        return u;
    };
    PosteriorDraws d = sample_metropolis(target, init, {0.5, 0.5, 0.5}, Box3{}, cfg, seed);
    for (auto& v : d.values) v = {std::exp(v[0]), std::exp(v[1]), expit(v[2])};
    return d;
}

std::vector<FernandesPatient> simulate_fernandes_trial(const FernandesStudyConfig& cfg, Rng& rng) {
    std::vector<FernandesPatient> out;
    for (double d : cfg.doses) {
        for (std::size_t i = 0; i < cfg.patients_per_dose; ++i) {
            FernandesPatient pt;
            double max_prev = 0.0, cum_prev = 0.0;
            for (std::size_t k = 0; k < cfg.cycles; ++k) {
                const double p = fernandes_cond_prob(cfg.truth, d, max_prev, cum_prev);
                pt.doses.push_back(d);
                if (rng.uniform() < p) {
                    pt.dlt = true;
                    break;
                }
                max_prev = std::max(max_prev, d);
                cum_prev += d;
            }
            out.push_back(std::move(pt));
        }
    }
    return out;
}

namespace {

ParameterSummary summarize_parameter(std::vector<double> est, double truth) {
    ParameterSummary s;
    s.truth = truth;
    s.estimate_median = sample_quantile(est, 0.5);
    s.estimate_q1 = sample_quantile(est, 0.25);
    s.estimate_q3 = sample_quantile(est, 0.75);
    s.bias_median = s.estimate_median - truth;
    s.bias_q1 = s.estimate_q1 - truth;
    s.bias_q3 = s.estimate_q3 - truth;
    return s;
}

}  // namespace

FernandesStudyResult fernandes_bias_study(const FernandesStudyConfig& cfg) {
    if (cfg.n_sims < 1) throw ComparatorError("n_sims must be >= 1");
    if (cfg.doses.empty() || cfg.cycles < 1 || cfg.patients_per_dose < 1) {
        throw ComparatorError("study needs doses, cycles and patients");
    }
    const long n = static_cast<long>(cfg.n_sims);
    std::vector<std::optional<FernandesParams>> est(cfg.n_sims);
#pragma omp parallel for schedule(dynamic)
    for (long r = 0; r < n; ++r) {
        const std::uint64_t rep_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(r));
        Rng rng(derive_seed(rep_seed, 0));
        const auto patients = simulate_fernandes_trial(cfg, rng);
        try {
            const auto draws = fernandes_posterior(patients, cfg.prior, cfg.sampler, derive_seed(rep_seed, 1));
            std::array<std::vector<double>, 3> cols;
            for (const auto& v : draws.values) {
                for (int c = 0; c < 3; ++c) cols[c].push_back(v[c]);
            }
            est[r] = FernandesParams{sample_median(cols[0]), sample_median(cols[1]), sample_median(cols[2])};
        } catch (const InferenceError&) {
            est[r].reset();
        }
    }
    FernandesStudyResult res;
    std::vector<double> a, b, rho;
    for (const auto& e : est) {
        if (!e) {
            ++res.replicates_excluded;
            continue;
        }
        res.estimates.push_back(*e);
        a.push_back(e->alpha);
        b.push_back(e->beta);
        rho.push_back(e->rho);
    }
    res.replicates_used = res.estimates.size();
    if (res.replicates_used == 0) throw ComparatorError("every replicate failed to fit");
    res.alpha = summarize_parameter(a, cfg.truth.alpha);
    res.beta = summarize_parameter(b, cfg.truth.beta);
    res.rho = summarize_parameter(rho, cfg.truth.rho);
    return res;
}

}  // namespace dice
