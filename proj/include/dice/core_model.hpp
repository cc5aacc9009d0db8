#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dice {

class ModelError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr double kLogZero = -std::numeric_limits<double>::infinity();

// Numerically stable logistic helpers.
inline double expit(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// log(expit(x)) without overflow.
inline double log_expit(double x) noexcept {
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

// log(expit(hi) - expit(lo)) for hi >= lo; kLogZero when the gap underflows.
double log_expit_diff(double hi, double lo) noexcept;

struct ModelParams {
    double alpha = 0.0;
    double beta = 0.0;
    double gamma = 0.0;

    std::array<double, 3> as_array() const { return {alpha, beta, gamma}; }
    static ModelParams from(const std::array<double, 3>& v) { return {v[0], v[1], v[2]}; }
};

struct DoseSequence {
    std::vector<double> doses;  // mg per cycle, cycles 1..K
    std::string label;

    std::size_t cycles() const { return doses.size(); }
};

/*
 * Cycle weight g(k) multiplying the cumulative-dose term. Stored as the
 * table g(1..K); must be nonnegative and nondecreasing.
 */
class CycleWeight {
public:
    explicit CycleWeight(std::vector<double> values);

    static CycleWeight linear(std::size_t cycles);    // g(k) = k/K
    static CycleWeight constant(std::size_t cycles);  // g(k) = 1

    // k is 1-based.
    double operator()(std::size_t k) const;
    std::size_t cycles() const { return values_.size(); }
    std::span<const double> values() const { return values_; }

private:
    std::vector<double> values_;
};

class DosePanel {
public:
    // reference is a 0-based index into sequences.
    DosePanel(std::vector<DoseSequence> sequences, std::size_t reference);

    std::size_t size() const { return sequences_.size(); }
    std::size_t cycles() const { return cycles_; }
    const DoseSequence& operator[](std::size_t j) const { return sequences_.at(j); }
    const std::vector<DoseSequence>& sequences() const { return sequences_; }

    std::size_t reference_index() const { return reference_; }
    double reference_dose() const { return d_star_; }
    double reference_cumulative() const { return cum_star_; }

    // Panel of constant-dose sequences; reference defaults to the middle one.
    static DosePanel constant(std::span<const double> levels, std::size_t cycles);
    static DosePanel constant(std::span<const double> levels, std::size_t cycles,
                              std::size_t reference);

private:
    std::vector<DoseSequence> sequences_;
    std::size_t cycles_ = 0;
    std::size_t reference_ = 0;
    double d_star_ = 0.0;
    double cum_star_ = 0.0;
};

/*
 * One patient's observed history: doses actually administered for each
 * completed cycle. k_i is the number of completed cycles; a DLT, if any,
 * occurred in the last completed cycle.
 */
struct PatientRecord {
    std::string id;
    std::size_t assigned_sequence = 0;
    std::vector<double> administered_doses;
    bool dlt = false;

    std::size_t last_completed_cycle() const { return administered_doses.size(); }
    void validate(std::size_t cycles) const;
};

// Sum of doses for cycles 2..k (0 for k = 1).
double cumulative_dose(std::span<const double> doses, std::size_t k);
double cumulative_dose(const DoseSequence& seq, std::size_t k);

// Linear predictor of the cumulative toxicity model.
double cumulative_tox_logit(const ModelParams& theta, double d1, std::size_t k, double cum_dose,
                            double d_star, double cum_star, const CycleWeight& g);

// F(k): probability of a DLT at or before cycle k.
double cumulative_tox_prob(const ModelParams& theta, double d1, std::size_t k, double cum_dose,
                           double d_star, double cum_star, const CycleWeight& g);

// F evaluated along a dose history at cycle k (history must cover k cycles).
double cumulative_tox_prob(const ModelParams& theta, std::span<const double> doses, std::size_t k,
                           const DosePanel& panel, const CycleWeight& g);

// P(DLT exactly at cycle k) = F(k) - F(k-1), F(0) = 0.
double cycle_tox_prob(const ModelParams& theta, std::span<const double> doses, std::size_t k,
                      const DosePanel& panel, const CycleWeight& g);

// P(no DLT through cycle k) = 1 - F(k).
double no_tox_prob(const ModelParams& theta, std::span<const double> doses, std::size_t k,
                   const DosePanel& panel, const CycleWeight& g);

// Censored multi-cycle log likelihood. Returns kLogZero for impossible data.
double log_likelihood(const ModelParams& theta, std::span<const PatientRecord> patients,
                      const DosePanel& panel, const CycleWeight& g);

/*
 * Likelihood with patients collapsed into distinct covariate patterns.
 * Evaluates to the same value as log_likelihood() up to rounding; used in
 * sampler hot loops.
 */
class LikelihoodTerms {
public:
    LikelihoodTerms() = default;
    LikelihoodTerms(std::span<const PatientRecord> patients, const DosePanel& panel,
                    const CycleWeight& g);

    double operator()(const ModelParams& theta) const noexcept;
    double operator()(const std::array<double, 3>& v) const noexcept {
        return (*this)(ModelParams::from(v));
    }

    std::size_t patterns() const { return terms_.size(); }
    bool empty() const { return terms_.empty(); }

    struct Term {
        double log_d1;   // log(d1 / d*)
        double cum_k;    // log(D_k / D* + 1) g(k)
        double cum_km1;  // same at k - 1 (unused when k = 1)
        bool first_cycle;
        bool dlt;
        double count;
    };

    void add(const Term& t);
    std::span<const Term> terms() const { return terms_; }

private:
    std::vector<Term> terms_;
};

// Conversions between cumulative and conditional curves.
std::vector<double> conditionals_from_cumulative(std::span<const double> cumulative);
std::vector<double> cumulative_from_conditionals(std::span<const double> conditional);

}  // namespace dice
