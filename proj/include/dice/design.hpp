#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dice/core_model.hpp"
#include "dice/inference.hpp"

namespace dice {

class TrialError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrialConfig {
    DosePanel panel;
    CycleWeight cycle_weight;
    double target = 0.3;
    double tau = 0.9;  // stopping threshold tau_T
    std::size_t cohort_size = 1;
    std::size_t max_sample_size = 30;
    std::size_t min_patients_for_stopping = 6;
    Estimator estimator = Estimator::posterior_median;
    PriorSpec prior;
    SamplerConfig sampler;
    std::uint64_t seed = 1;

    TrialConfig(DosePanel p, CycleWeight g) : panel(std::move(p)), cycle_weight(std::move(g)) {}
    void validate() const;
};

// Ties within this distance of each other break toward the lower index.
inline constexpr double kTieTolerance = 1e-12;

// argmin_j |estimates[j] - target|, lowest index on ties.
std::size_t closest_to_target(std::span<const double> estimates, double target);

std::size_t first_allocation(const TrialConfig& cfg);

// Closest-to-target sequence, capped at one above the highest tried.
std::size_t recommend_next(std::span<const double> estimates, double target,
                           std::optional<std::size_t> highest_tried);

enum class StopDecision { proceed, stop };

StopDecision check_stopping(std::size_t accrued, double exceedance, const TrialConfig& cfg);

std::optional<std::size_t> select_mts(std::span<const double> estimates_at_k, double target, bool stopped);

enum class TrialStatus { accruing, suspended, stopped_safety, completed };
std::string to_string(TrialStatus s);
TrialStatus parse_status(const std::string& s);
bool is_terminal(TrialStatus s);

enum class EventKind {
    created,
    patient_enrolled,
    cycle_completed,
    dlt_recorded,
    reestimated,
    recommendation_issued,
    suspended,
    resumed,
    stopped,
    completed,
};
std::string to_string(EventKind k);
EventKind parse_event_kind(const std::string& s);

struct TrialEvent {
    std::uint64_t index = 0;
    std::string timestamp;
    EventKind kind = EventKind::created;
    nlohmann::json payload = nlohmann::json::object();

    bool operator==(const TrialEvent&) const = default;
};

nlohmann::json to_json(const TrialEvent& e);
TrialEvent event_from_json(const nlohmann::json& j);

struct TrialPatient {
    std::string id;
    std::size_t sequence = 0;
    std::vector<double> doses;  // administered, one per completed cycle
    bool dlt = false;

    std::size_t completed_cycles() const { return doses.size(); }
    bool closed(std::size_t cycles) const { return dlt || doses.size() >= cycles; }
    bool operator==(const TrialPatient&) const = default;
};

// Posterior summary at every horizon k = 1..K (outer index k - 1) and sequence j.
struct PosteriorSummary {
    std::vector<std::vector<double>> estimate;
    std::vector<std::vector<double>> lower;  // 10% quantile
    std::vector<std::vector<double>> upper;  // 90% quantile
    double exceedance = 0.0;                 // P(p_T(s_1) > target)
    std::size_t patients_used = 0;
    std::uint64_t seed = 0;
    std::size_t draws = 0;
    double acceptance = 0.0;
    bool convergence_warning = false;

    bool operator==(const PosteriorSummary&) const = default;
};

nlohmann::json to_json(const PosteriorSummary& s);
PosteriorSummary summary_from_json(const nlohmann::json& j);

PosteriorSummary summarize_posterior(const PosteriorDraws& draws, const TrialConfig& cfg, std::size_t patients_used);

struct TrialState {
    std::vector<TrialPatient> patients;
    std::optional<std::size_t> highest_tried;
    std::size_t current_recommendation = 0;
    TrialStatus status = TrialStatus::accruing;
    std::string status_reason;
    std::optional<PosteriorSummary> summary;
    std::optional<std::size_t> final_mts;
    std::set<std::string> idempotency_keys;
    std::vector<TrialEvent> event_log;

    const TrialPatient* find(const std::string& id) const;
    std::uint64_t next_event_index() const { return event_log.size(); }
    std::vector<PatientRecord> observed_records() const;
    bool all_followed(std::size_t cycles) const;

    bool operator==(const TrialState&) const = default;
};

nlohmann::json to_json(const TrialState& s);

// The only mutation path for TrialState; live updates and replay share it.
void apply_event(TrialState& state, const TrialConfig& cfg, const TrialEvent& event);

TrialState replay(const TrialConfig& cfg, std::span<const TrialEvent> events);

using Clock = std::function<std::string()>;
Clock system_clock();

// What the engine does when the stopping rule fires.
enum class StopPolicy { terminate, suspend };

struct CycleOutcome {
    std::string patient_id;
    std::size_t cycle = 0;
    bool dlt = false;
    std::optional<double> dose;  // scheduled dose of the assigned sequence when absent
    std::string idempotency_key;
};

/*
 * Collects events against a scratch copy of the state. Events are indexed
 * and stamped as they are emitted and applied immediately, so later
 * decisions in the same transaction see earlier ones.
 */
class Transaction {
public:
    Transaction(const TrialState& base, const TrialConfig& cfg, Clock clock);

    void emit(EventKind kind, nlohmann::json payload);
    const TrialState& state() const { return state_; }
    const TrialConfig& config() const { return cfg_; }
    const std::vector<TrialEvent>& events() const { return new_events_; }
    TrialState take() && { return std::move(state_); }

private:
    TrialState state_;
    const TrialConfig& cfg_;
    Clock clock_;
    std::vector<TrialEvent> new_events_;
};

void create_trial(Transaction& tx, const nlohmann::json& config_document);
void enroll_patient(Transaction& tx, const std::string& patient_id, std::optional<std::size_t> sequence);
// Returns false when the idempotency key was already applied.
bool record_outcome(Transaction& tx, const CycleOutcome& outcome);
void reestimate(Transaction& tx, StopPolicy policy);
void resume_trial(Transaction& tx, const std::string& note);
void confirm_stop(Transaction& tx, const std::string& note);

/*
 * Records a batch of outcomes then re-estimates on all observed data,
 * refreshing the recommendation and applying the stopping rule. An empty
 * batch leaves the state untouched.
 */
TrialState advance_trial(const TrialState& state, const TrialConfig& cfg, std::span<const CycleOutcome> outcomes,
                         StopPolicy policy, const Clock& clock);

}  // namespace dice
