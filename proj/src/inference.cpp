#include "dice/inference.hpp"

#include <numeric>

namespace dice {

void PriorSpec::validate() const {
    for (const NormalPrior* p : {&alpha, &beta, &gamma}) {
        if (!(p->sd > 0.0) || !std::isfinite(p->sd) || !std::isfinite(p->mean)) {
            throw InferenceError("prior sd must be positive and finite");
        }
    }
    if (!(alpha_lower < alpha.mean && alpha.mean < alpha_upper)) {
        throw InferenceError("alpha prior mean must lie strictly inside its truncation bounds");
    }
}

double PriorSpec::log_density(const ModelParams& theta) const {
    if (!in_support(theta)) return kLogZero;
    return alpha.log_density(theta.alpha) + beta.log_density(theta.beta) + gamma.log_density(theta.gamma);
}

ModelParams PriorSpec::draw(Rng& rng) const {
    ModelParams m;
    do {
        m.alpha = rng.normal(alpha.mean, alpha.sd);
    } while (m.alpha < alpha_lower || m.alpha > alpha_upper);
    m.beta = rng.normal(beta.mean, beta.sd);
    m.gamma = rng.normal(gamma.mean, gamma.sd);
    return m;
}

void SamplerConfig::validate() const {
    if (chains < 1) throw InferenceError("sampler needs at least one chain");
    if (draws_per_chain < 1) throw InferenceError("sampler needs at least one draw per chain");
    if (thin < 1) throw InferenceError("thinning must be >= 1");
    if (adapt_window < 1) throw InferenceError("adaptation window must be >= 1");
    if (!(0.0 < target_accept_low && target_accept_low < target_accept_high && target_accept_high < 1.0)) {
        throw InferenceError("invalid acceptance band");
    }
}

namespace detail {

std::array<double, 3> split_rhat(std::span<const ChainOutput> chains) {
    std::array<double, 3> out{};
    std::size_t half = chains.empty() ? 0 : chains.front().draws.size() / 2;
    for (const auto& c : chains) half = std::min(half, c.draws.size() / 2);
    if (half < 2) {
        out.fill(NAN);
        return out;
    }
    const std::size_t m = 2 * chains.size();
    for (int p = 0; p < 3; ++p) {
        std::vector<double> means;
        std::vector<double> vars;
        for (const auto& c : chains) {
            for (std::size_t h = 0; h < 2; ++h) {
                double s = 0.0;
                for (std::size_t i = 0; i < half; ++i) s += c.draws[h * half + i][p];
                const double mu = s / static_cast<double>(half);
                double ss = 0.0;
                for (std::size_t i = 0; i < half; ++i) {
                    const double d = c.draws[h * half + i][p] - mu;
                    ss += d * d;
                }
                means.push_back(mu);
                vars.push_back(ss / static_cast<double>(half - 1));
            }
        }
        const double grand = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(m);
        double b = 0.0;
        for (double mu : means) b += (mu - grand) * (mu - grand);
        b *= static_cast<double>(half) / static_cast<double>(m - 1);
        const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(m);
        const double n = static_cast<double>(half);
        if (w <= 0.0) {
            out[p] = b <= 0.0 ? 1.0 : INFINITY;
            continue;
        }
        out[p] = std::sqrt(((n - 1.0) / n * w + b / n) / w);
    }
    return out;
}

}  // namespace detail

Estimator parse_estimator(const std::string& s) {
    if (s == "median" || s == "posterior-median") return Estimator::posterior_median;
    if (s == "mean" || s == "posterior-mean") return Estimator::posterior_mean;
    throw InferenceError("unknown estimator '" + s + "' (expected median or mean)");
}

std::string to_string(Estimator e) { return e == Estimator::posterior_median ? "median" : "mean"; }

double sequence_pT(const ModelParams& theta, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                   std::size_t k) {
    return cumulative_tox_prob(theta, panel[j].doses, k, panel, g);
}

namespace {

struct Covariate {
    double log_d1;
    double cum;
};

Covariate covariate(const DosePanel& panel, const CycleWeight& g, std::size_t j, std::size_t k) {
    const auto& s = panel[j];
    if (k < 1 || k > panel.cycles()) throw ModelError("horizon outside 1..K");
    return {std::log(s.doses.front() / panel.reference_dose()),
            std::log1p(cumulative_dose(s, k) / panel.reference_cumulative()) * g(k)};
}

void fill_sample(const PosteriorDraws& draws, const Covariate& c, std::vector<double>& out) {
    out.resize(draws.size());
    for (std::size_t i = 0; i < draws.size(); ++i) {
        const auto& v = draws.values[i];
        out[i] = expit(v[0] + std::exp(v[1]) * c.log_d1 + std::exp(v[2]) * c.cum);
    }
}

double summarize(std::vector<double>& sample, Estimator e) {
    if (e == Estimator::posterior_mean) return sample_mean(sample);
    return sample_median(sample);
}

void require_draws(const PosteriorDraws& d) {
    if (d.empty()) throw InferenceError("no posterior draws");
}

}  // namespace

std::vector<double> sequence_pT_sample(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g,
                                       std::size_t j, std::size_t k) {
    std::vector<double> out;
    fill_sample(draws, covariate(panel, g, j, k), out);
    return out;
}

double estimate_pT(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                   std::size_t k, Estimator estimator) {
    require_draws(draws);
    auto s = sequence_pT_sample(draws, panel, g, j, k);
    return summarize(s, estimator);
}

std::vector<double> estimate_panel(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g,
                                   std::size_t k, Estimator estimator) {
    require_draws(draws);
    std::vector<double> est(panel.size());
    std::vector<double> buf;
    for (std::size_t j = 0; j < panel.size(); ++j) {
        fill_sample(draws, covariate(panel, g, j, k), buf);
        est[j] = summarize(buf, estimator);
    }
    return est;
}

double exceedance_prob(const PosteriorDraws& draws, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                       double threshold) {
    require_draws(draws);
    const Covariate c = covariate(panel, g, j, panel.cycles());
    std::size_t above = 0;
    for (const auto& v : draws.values) {
        if (expit(v[0] + std::exp(v[1]) * c.log_d1 + std::exp(v[2]) * c.cum) > threshold) ++above;
    }
    return static_cast<double>(above) / static_cast<double>(draws.size());
}

double sample_mean(std::span<const double> x) {
    if (x.empty()) throw InferenceError("mean of empty sample");
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sample_median(std::span<const double> x) { return sample_quantile(x, 0.5); }

// Linear interpolation between order statistics (type 7).
double sample_quantile(std::span<const double> x, double q) {
    if (x.empty()) throw InferenceError("quantile of empty sample");
    std::vector<double> v(x.begin(), x.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
    const double a = v[lo];
    if (lo + 1 >= v.size()) return a;
    const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
    return a + (h - static_cast<double>(lo)) * (b - a);
}

EssFit beta_from_moments(double mean, double variance) {
    EssFit fit;
    fit.mean = mean;
    fit.variance = variance;
    if (!(mean > 0.0 && mean < 1.0)) throw InferenceError("beta fit needs a mean in (0, 1)");
    const double bound = mean * (1.0 - mean);
    if (variance >= bound) throw InferenceError("sample variance too large for a beta fit");
    if (variance <= bound / (kEssCap + 1.0)) {
        fit.capped = true;
        fit.ess = kEssCap;
        fit.a = mean * kEssCap;
        fit.b = (1.0 - mean) * kEssCap;
        return fit;
    }
    const double common = bound / variance - 1.0;
    fit.a = mean * common;
    fit.b = (1.0 - mean) * common;
    fit.ess = fit.a + fit.b;
    return fit;
}

PosteriorDraws draw_prior(const PriorSpec& prior, std::size_t n, std::uint64_t seed) {
    prior.validate();
    Rng rng(seed);
    PosteriorDraws d;
    d.seed = seed;
    d.values.reserve(n);
    for (std::size_t i = 0; i < n; ++i) d.values.push_back(prior.draw(rng).as_array());
    return d;
}

EssFit induced_prior_ess(const PriorSpec& prior, const DosePanel& panel, const CycleWeight& g, std::size_t j,
                         std::size_t n_draws, std::uint64_t seed) {
    if (n_draws < 1000) throw InferenceError("induced prior ESS needs at least 1000 draws");
    if (j >= panel.size()) throw InferenceError("sequence index out of range");
    const PosteriorDraws d = draw_prior(prior, n_draws, seed);
    const auto sample = sequence_pT_sample(d, panel, g, j, panel.cycles());
    const double m = sample_mean(sample);
    double ss = 0.0;
    for (double x : sample) ss += (x - m) * (x - m);
    const double v = ss / static_cast<double>(sample.size() - 1);
    EssFit fit;
    try {
        fit = beta_from_moments(m, v);
    } catch (const InferenceError&) {
        throw InferenceError("beta fit impossible for sequence " + std::to_string(j + 1) +
                             " (variance exceeds m(1-m))");
    }
    fit.median = sample_median(sample);
    return fit;
}

}  // namespace dice
