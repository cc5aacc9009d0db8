#include "dice/core_model.hpp"

#include <algorithm>
#include <map>
#include <tuple>

namespace dice {

namespace {

constexpr double kMinFactor = 1e-300;
const double kLogMinFactor = std::log(kMinFactor);

void check_cycle(std::size_t k, std::size_t cycles) {
    if (k < 1 || k > cycles) {
        throw ModelError("cycle " + std::to_string(k) + " outside 1.." + std::to_string(cycles));
    }
}

double clamp_log(double v) noexcept {
    return (v < kLogMinFactor || std::isnan(v)) ? kLogZero : v;
}

}  // namespace

double log_expit_diff(double hi, double lo) noexcept {
    if (!(hi > lo)) return kLogZero;
    // log(expit(hi)) + log(1 - expit(lo)/expit(hi))
    const double a = log_expit(hi);
    const double b = log_expit(lo);
    return clamp_log(a + std::log(-std::expm1(b - a)));
}

CycleWeight::CycleWeight(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw ModelError("cycle weight needs at least one cycle");
    for (std::size_t k = 0; k < values_.size(); ++k) {
        if (!(values_[k] >= 0.0) || !std::isfinite(values_[k])) {
            throw ModelError("cycle weight g(" + std::to_string(k + 1) + ") must be finite and >= 0");
        }
        if (k > 0 && values_[k] < values_[k - 1]) {
            throw ModelError("cycle weight must be nondecreasing");
        }
    }
}

CycleWeight CycleWeight::linear(std::size_t cycles) {
    std::vector<double> v(cycles);
    for (std::size_t k = 0; k < cycles; ++k) v[k] = static_cast<double>(k + 1) / static_cast<double>(cycles);
    return CycleWeight(std::move(v));
}

CycleWeight CycleWeight::constant(std::size_t cycles) {
    return CycleWeight(std::vector<double>(cycles, 1.0));
}

double CycleWeight::operator()(std::size_t k) const {
    check_cycle(k, values_.size());
    return values_[k - 1];
}

DosePanel::DosePanel(std::vector<DoseSequence> sequences, std::size_t reference)
    : sequences_(std::move(sequences)), reference_(reference) {
    if (sequences_.empty()) throw ModelError("dose panel is empty");
    cycles_ = sequences_.front().cycles();
    if (cycles_ == 0) throw ModelError("dose sequences need at least one cycle");
    for (std::size_t j = 0; j < sequences_.size(); ++j) {
        const auto& s = sequences_[j];
        if (s.cycles() != cycles_) {
            throw ModelError("sequence " + std::to_string(j + 1) + " has " + std::to_string(s.cycles()) +
                             " cycles, expected " + std::to_string(cycles_));
        }
        for (double d : s.doses) {
            if (!(d > 0.0) || !std::isfinite(d)) {
                throw ModelError("sequence " + std::to_string(j + 1) + " has a nonpositive dose");
            }
        }
        if (j > 0) {
            const auto& prev = sequences_[j - 1];
            for (std::size_t k = 0; k < cycles_; ++k) {
                if (prev.doses[k] > s.doses[k]) {
                    throw ModelError("panel not ordered: sequence " + std::to_string(j) + " exceeds sequence " +
                                     std::to_string(j + 1) + " at cycle " + std::to_string(k + 1));
                }
            }
            if (prev.doses == s.doses) {
                throw ModelError("sequences " + std::to_string(j) + " and " + std::to_string(j + 1) +
                                 " are identical");
            }
        }
    }
    if (reference_ >= sequences_.size()) throw ModelError("reference sequence out of range");
    const auto& ref = sequences_[reference_];
    d_star_ = ref.doses.front();
    cum_star_ = cycles_ > 1 ? cumulative_dose(ref, cycles_) : d_star_;
}

DosePanel DosePanel::constant(std::span<const double> levels, std::size_t cycles) {
    return constant(levels, cycles, levels.empty() ? 0 : (levels.size() - 1) / 2);
}

DosePanel DosePanel::constant(std::span<const double> levels, std::size_t cycles, std::size_t reference) {
    std::vector<DoseSequence> seqs;
    seqs.reserve(levels.size());
    for (double d : levels) {
        std::string label = std::to_string(d);
        label.erase(label.find_last_not_of('0') + 1);
        if (!label.empty() && label.back() == '.') label.pop_back();
        seqs.push_back({std::vector<double>(cycles, d), label});
    }
    return DosePanel(std::move(seqs), reference);
}

void PatientRecord::validate(std::size_t cycles) const {
    const std::size_t k = last_completed_cycle();
    if (k < 1 || k > cycles) {
        throw ModelError("patient " + id + ": completed cycles " + std::to_string(k) + " outside 1.." +
                         std::to_string(cycles));
    }
    for (double d : administered_doses) {
        if (!(d > 0.0) || !std::isfinite(d)) throw ModelError("patient " + id + ": nonpositive dose");
    }
}

double cumulative_dose(std::span<const double> doses, std::size_t k) {
    check_cycle(k, doses.size());
    double total = 0.0;
    for (std::size_t m = 1; m < k; ++m) total += doses[m];
    return total;
}

double cumulative_dose(const DoseSequence& seq, std::size_t k) { return cumulative_dose(seq.doses, k); }

double cumulative_tox_logit(const ModelParams& theta, double d1, std::size_t k, double cum_dose,
                            double d_star, double cum_star, const CycleWeight& g) {
    if (!(d1 > 0.0)) throw ModelError("first dose must be positive");
    if (!(d_star > 0.0) || !(cum_star > 0.0)) throw ModelError("reference doses must be positive");
    if (!(cum_dose >= 0.0)) throw ModelError("cumulative dose must be nonnegative");
    return theta.alpha + std::exp(theta.beta) * std::log(d1 / d_star) +
           std::exp(theta.gamma) * std::log1p(cum_dose / cum_star) * g(k);
}

double cumulative_tox_prob(const ModelParams& theta, double d1, std::size_t k, double cum_dose,
                           double d_star, double cum_star, const CycleWeight& g) {
    return expit(cumulative_tox_logit(theta, d1, k, cum_dose, d_star, cum_star, g));
}

double cumulative_tox_prob(const ModelParams& theta, std::span<const double> doses, std::size_t k,
                           const DosePanel& panel, const CycleWeight& g) {
    check_cycle(k, std::min(doses.size(), panel.cycles()));
    return cumulative_tox_prob(theta, doses[0], k, cumulative_dose(doses, k), panel.reference_dose(),
                               panel.reference_cumulative(), g);
}

double cycle_tox_prob(const ModelParams& theta, std::span<const double> doses, std::size_t k,
                      const DosePanel& panel, const CycleWeight& g) {
    const double fk = cumulative_tox_prob(theta, doses, k, panel, g);
    if (k == 1) return fk;
    return fk - cumulative_tox_prob(theta, doses, k - 1, panel, g);
}

double no_tox_prob(const ModelParams& theta, std::span<const double> doses, std::size_t k,
                   const DosePanel& panel, const CycleWeight& g) {
    return 1.0 - cumulative_tox_prob(theta, doses, k, panel, g);
}

double log_likelihood(const ModelParams& theta, std::span<const PatientRecord> patients,
                      const DosePanel& panel, const CycleWeight& g) {
    double total = 0.0;
    for (const auto& p : patients) {
        p.validate(panel.cycles());
        const std::size_t k = p.last_completed_cycle();
        const double d1 = p.administered_doses.front();
        const double eta_k = cumulative_tox_logit(theta, d1, k, cumulative_dose(p.administered_doses, k),
                                                  panel.reference_dose(), panel.reference_cumulative(), g);
        double term;
        if (!p.dlt) {
            term = clamp_log(log_expit(-eta_k));
        } else if (k == 1) {
            term = clamp_log(log_expit(eta_k));
        } else {
            const double eta_prev =
                cumulative_tox_logit(theta, d1, k - 1, cumulative_dose(p.administered_doses, k - 1),
                                     panel.reference_dose(), panel.reference_cumulative(), g);
            term = log_expit_diff(eta_k, eta_prev);
        }
        if (term == kLogZero) return kLogZero;
        total += term;
    }
    return total;
}

LikelihoodTerms::LikelihoodTerms(std::span<const PatientRecord> patients, const DosePanel& panel,
                                 const CycleWeight& g) {
    const double d_star = panel.reference_dose();
    const double cum_star = panel.reference_cumulative();
    using Key = std::tuple<double, double, double, bool, bool>;
    std::map<Key, double> counts;
    for (const auto& p : patients) {
        p.validate(panel.cycles());
        const std::size_t k = p.last_completed_cycle();
        const double ld1 = std::log(p.administered_doses.front() / d_star);
        const double ck = std::log1p(cumulative_dose(p.administered_doses, k) / cum_star) * g(k);
        const double ckm1 =
            k > 1 ? std::log1p(cumulative_dose(p.administered_doses, k - 1) / cum_star) * g(k - 1) : 0.0;
        counts[Key{ld1, ck, ckm1, k == 1, p.dlt}] += 1.0;
    }
    terms_.reserve(counts.size());
    for (const auto& [key, n] : counts) {
        const auto& [ld1, ck, ckm1, first, dlt] = key;
        terms_.push_back({ld1, ck, ckm1, first, dlt, n});
    }
}

void LikelihoodTerms::add(const Term& t) { terms_.push_back(t); }

double LikelihoodTerms::operator()(const ModelParams& theta) const noexcept {
    const double eb = std::exp(theta.beta);
    const double eg = std::exp(theta.gamma);
    double total = 0.0;
    for (const auto& t : terms_) {
        const double base = theta.alpha + eb * t.log_d1;
        const double eta_k = base + eg * t.cum_k;
        double v;
        if (!t.dlt) {
            v = clamp_log(log_expit(-eta_k));
        } else if (t.first_cycle) {
            v = clamp_log(log_expit(eta_k));
        } else {
            v = log_expit_diff(eta_k, base + eg * t.cum_km1);
        }
        if (v == kLogZero) return kLogZero;
        total += t.count * v;
    }
    return total;
}

std::vector<double> conditionals_from_cumulative(std::span<const double> cumulative) {
    std::vector<double> p(cumulative.size());
    double prev = 0.0;
    for (std::size_t k = 0; k < cumulative.size(); ++k) {
        const double f = cumulative[k];
        if (!(f >= 0.0) || !(f < 1.0)) throw ModelError("cumulative probability outside [0, 1)");
        if (f < prev) throw ModelError("cumulative probabilities must be nondecreasing");
        p[k] = (f - prev) / (1.0 - prev);
        prev = f;
    }
    return p;
}

std::vector<double> cumulative_from_conditionals(std::span<const double> conditional) {
    std::vector<double> f(conditional.size());
    double survive = 1.0;
    for (std::size_t k = 0; k < conditional.size(); ++k) {
        const double p = conditional[k];
        if (!(p >= 0.0) || !(p < 1.0)) throw ModelError("conditional probability outside [0, 1)");
        survive *= 1.0 - p;
        f[k] = 1.0 - survive;
    }
    return f;
}

}  // namespace dice
