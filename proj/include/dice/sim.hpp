#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dice/comparators.hpp"
#include "dice/design.hpp"

namespace dice {

class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// True cumulative toxicity F[j][k - 1] for every sequence and cycle.
struct ScenarioSpec {
    std::string name;
    std::vector<std::vector<double>> cumulative;
    double target = 0.3;

    std::size_t sequences() const { return cumulative.size(); }
    std::size_t cycles() const { return cumulative.empty() ? 0 : cumulative.front().size(); }
    void validate() const;
    // True MTS at horizon k (1-based k, 0-based result).
    std::size_t true_mts(std::size_t k) const;
    std::vector<std::vector<double>> conditionals() const;
};

/*
 * Pre-generated outcomes for n patients at every sequence. Only the first
 * DLT cycle of each (patient, sequence) is kept; later cells are ignored
 * under the one-DLT rule.
 */
class CompleteOutcomes {
public:
    CompleteOutcomes(std::size_t patients, std::size_t sequences, std::size_t cycles, std::uint64_t seed);

    std::size_t patients() const { return n_; }
    std::size_t sequences() const { return j_; }
    std::size_t cycles() const { return k_; }
    std::uint64_t seed() const { return seed_; }

    // 0 when the patient never has a DLT on sequence j.
    std::size_t dlt_cycle(std::size_t i, std::size_t j) const { return cells_[i * j_ + j]; }
    bool outcome(std::size_t i, std::size_t j, std::size_t k) const { return dlt_cycle(i, j) == k; }
    void set_dlt_cycle(std::size_t i, std::size_t j, std::size_t k) { cells_[i * j_ + j] = static_cast<std::uint8_t>(k); }
    std::vector<std::size_t> dlt_counts() const;

private:
    std::size_t n_, j_, k_;
    std::uint64_t seed_;
    std::vector<std::uint8_t> cells_;
};

// One uniform per (patient, sequence, cycle), consumed in that order.
CompleteOutcomes generate_complete_outcomes(const ScenarioSpec& scenario, std::size_t n, std::uint64_t seed);

enum class Method { dice, tite_crm };
std::string to_string(Method m);
Method parse_method(const std::string& s);

enum class AccrualPolicy { staggered, full_follow_up };
std::string to_string(AccrualPolicy a);
AccrualPolicy parse_accrual(const std::string& s);

struct SimSettings {
    TrialConfig trial;
    Skeleton skeleton;
    TiteConfig tite;
    AccrualPolicy accrual = AccrualPolicy::staggered;
    std::size_t accrual_interval = 1;  // cycles between cohorts when staggered

    std::size_t cohort_gap() const { return accrual == AccrualPolicy::staggered ? accrual_interval : trial.panel.cycles(); }
};

enum class StopReason { none, safety, interval_not_computable };
std::string to_string(StopReason r);

struct TrialResult {
    std::optional<std::size_t> selected;
    std::vector<std::size_t> allocations;  // patients per sequence
    std::vector<std::size_t> path;         // sequence of each enrolled patient, in order
    std::size_t dlts = 0;
    bool stopped = false;
    bool stopped_at_interim = false;
    StopReason reason = StopReason::none;
    std::size_t enrolled = 0;
    // Final-posterior estimates at every horizon, [k - 1][j]; empty when not available.
    std::vector<std::vector<double>> final_estimates;
    std::size_t benchmark = 0;

    bool operator==(const TrialResult&) const = default;
};

TrialResult run_trial(Method method, const SimSettings& settings, const CompleteOutcomes& outcomes,
                      std::uint64_t seed);

struct OperatingCharacteristics {
    Method method = Method::dice;
    std::string scenario;
    std::size_t cohort_size = 1;
    std::size_t n_sims = 0;
    std::uint64_t base_seed = 0;
    std::size_t true_mts = 0;
    std::vector<double> selection;  // per sequence
    double none = 0.0;
    double none_safety = 0.0;
    double none_not_computable = 0.0;
    std::vector<double> allocation;
    double dlt_median = 0.0, dlt_q1 = 0.0, dlt_q3 = 0.0;
    double proportion_stopped = 0.0;
    std::vector<double> benchmark_selection;
    double pcs = 0.0;
    double benchmark_pcs = 0.0;
    std::vector<TrialResult> trials;
};

std::uint64_t replicate_seed(std::uint64_t base_seed, std::size_t replicate);

OperatingCharacteristics summarize_study(Method method, const ScenarioSpec& scenario, const SimSettings& settings,
                                         std::uint64_t base_seed, std::vector<TrialResult> trials);

// Replicates in parallel (OpenMP); bit-identical to run_study_serial.
OperatingCharacteristics run_study(Method method, const ScenarioSpec& scenario, const SimSettings& settings,
                                   std::size_t n_sims, std::uint64_t base_seed);

OperatingCharacteristics run_study_serial(Method method, const ScenarioSpec& scenario, const SimSettings& settings,
                                          std::size_t n_sims, std::uint64_t base_seed);

// Selection distribution at horizon k: element 0 is "no recommendation", element j + 1 is sequence j.
std::vector<double> predict_mts_study(const OperatingCharacteristics& study, std::size_t k, double target);

}  // namespace dice
