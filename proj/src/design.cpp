#include "dice/design.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>

namespace dice {

using nlohmann::json;

void TrialConfig::validate() const {
    if (!(target > 0.0 && target < 1.0)) throw TrialError("target must lie in (0, 1)");
    if (!(tau > 0.5 && tau < 1.0)) throw TrialError("tau_T must lie in (0.5, 1)");
    if (cohort_size < 1) throw TrialError("cohort_size must be >= 1");
    if (max_sample_size < 1) throw TrialError("max_sample_size must be >= 1");
    if (panel.cycles() != cycle_weight.cycles()) {
        throw TrialError("cycle weight covers " + std::to_string(cycle_weight.cycles()) + " cycles, panel has " +
                         std::to_string(panel.cycles()));
    }
    prior.validate();
    sampler.validate();
}

std::size_t closest_to_target(std::span<const double> estimates, double target) {
    if (estimates.empty()) throw TrialError("no estimates to choose from");
    std::size_t best = 0;
    double best_dist = std::abs(estimates[0] - target);
    for (std::size_t j = 1; j < estimates.size(); ++j) {
        const double d = std::abs(estimates[j] - target);
        if (d < best_dist - kTieTolerance) {
            best = j;
            best_dist = d;
        }
    }
    return best;
}

std::size_t first_allocation(const TrialConfig&) { return 0; }

std::size_t recommend_next(std::span<const double> estimates, double target,
                           std::optional<std::size_t> highest_tried) {
    const std::size_t best = closest_to_target(estimates, target);
    const std::size_t cap = highest_tried ? *highest_tried + 1 : 0;
    return std::min(best, cap);
}

StopDecision check_stopping(std::size_t accrued, double exceedance, const TrialConfig& cfg) {
    if (accrued < cfg.min_patients_for_stopping) return StopDecision::proceed;
    return exceedance > cfg.tau ? StopDecision::stop : StopDecision::proceed;
}

std::optional<std::size_t> select_mts(std::span<const double> estimates_at_k, double target, bool stopped) {
    if (stopped) return std::nullopt;
    return closest_to_target(estimates_at_k, target);
}

namespace {

constexpr std::pair<TrialStatus, const char*> kStatusNames[] = {
    {TrialStatus::accruing, "accruing"},
    {TrialStatus::suspended, "suspended"},
    {TrialStatus::stopped_safety, "stopped_safety"},
    {TrialStatus::completed, "completed"},
};

constexpr std::pair<EventKind, const char*> kEventNames[] = {
    {EventKind::created, "created"},
    {EventKind::patient_enrolled, "patient_enrolled"},
    {EventKind::cycle_completed, "cycle_completed"},
    {EventKind::dlt_recorded, "dlt_recorded"},
    {EventKind::reestimated, "reestimated"},
    {EventKind::recommendation_issued, "recommendation_issued"},
    {EventKind::suspended, "suspended"},
    {EventKind::resumed, "resumed"},
    {EventKind::stopped, "stopped"},
    {EventKind::completed, "completed"},
};

TrialPatient& find_mut(TrialState& s, const std::string& id) {
    for (auto& p : s.patients) {
        if (p.id == id) return p;
    }
    throw TrialError("unknown patient '" + id + "'");
}

json matrix_json(const std::vector<std::vector<double>>& m) { return json(m); }

}  // namespace

std::string to_string(TrialStatus s) {
    for (auto [v, n] : kStatusNames) {
        if (v == s) return n;
    }
    return "unknown";
}

TrialStatus parse_status(const std::string& s) {
    for (auto [v, n] : kStatusNames) {
        if (s == n) return v;
    }
    throw TrialError("unknown trial status '" + s + "'");
}

bool is_terminal(TrialStatus s) { return s == TrialStatus::stopped_safety || s == TrialStatus::completed; }

std::string to_string(EventKind k) {
    for (auto [v, n] : kEventNames) {
        if (v == k) return n;
    }
    return "unknown";
}

EventKind parse_event_kind(const std::string& s) {
    for (auto [v, n] : kEventNames) {
        if (s == n) return v;
    }
    throw TrialError("unknown event kind '" + s + "'");
}

json to_json(const TrialEvent& e) {
    return json{{"index", e.index}, {"timestamp", e.timestamp}, {"kind", to_string(e.kind)}, {"payload", e.payload}};
}

TrialEvent event_from_json(const json& j) {
    TrialEvent e;
    e.index = j.at("index").get<std::uint64_t>();
    e.timestamp = j.at("timestamp").get<std::string>();
    e.kind = parse_event_kind(j.at("kind").get<std::string>());
    e.payload = j.at("payload");
    return e;
}

json to_json(const PosteriorSummary& s) {
    return json{{"estimate", matrix_json(s.estimate)},
                {"lower", matrix_json(s.lower)},
                {"upper", matrix_json(s.upper)},
                {"exceedance", s.exceedance},
                {"patients_used", s.patients_used},
                {"seed", s.seed},
                {"draws", s.draws},
                {"acceptance", s.acceptance},
                {"convergence_warning", s.convergence_warning}};
}

PosteriorSummary summary_from_json(const json& j) {
    PosteriorSummary s;
    s.estimate = j.at("estimate").get<std::vector<std::vector<double>>>();
    s.lower = j.at("lower").get<std::vector<std::vector<double>>>();
    s.upper = j.at("upper").get<std::vector<std::vector<double>>>();
    s.exceedance = j.at("exceedance").get<double>();
    s.patients_used = j.at("patients_used").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.draws = j.at("draws").get<std::size_t>();
    s.acceptance = j.at("acceptance").get<double>();
    s.convergence_warning = j.at("convergence_warning").get<bool>();
    return s;
}

PosteriorSummary summarize_posterior(const PosteriorDraws& draws, const TrialConfig& cfg, std::size_t patients_used) {
    const std::size_t K = cfg.panel.cycles();
    const std::size_t J = cfg.panel.size();
    PosteriorSummary s;
    s.estimate.assign(K, std::vector<double>(J));
    s.lower = s.estimate;
    s.upper = s.estimate;
    for (std::size_t k = 1; k <= K; ++k) {
        for (std::size_t j = 0; j < J; ++j) {
            const auto sample = sequence_pT_sample(draws, cfg.panel, cfg.cycle_weight, j, k);
            s.estimate[k - 1][j] =
                cfg.estimator == Estimator::posterior_mean ? sample_mean(sample) : sample_median(sample);
            s.lower[k - 1][j] = sample_quantile(sample, 0.1);
            s.upper[k - 1][j] = sample_quantile(sample, 0.9);
        }
    }
    s.exceedance = exceedance_prob(draws, cfg.panel, cfg.cycle_weight, 0, cfg.target);
    s.patients_used = patients_used;
    s.seed = draws.seed;
    s.draws = draws.size();
    double acc = 0.0;
    for (double a : draws.diagnostics.acceptance) acc += a;
    s.acceptance = draws.diagnostics.acceptance.empty() ? 0.0 : acc / draws.diagnostics.acceptance.size();
    s.convergence_warning = draws.diagnostics.convergence_warning;
    return s;
}

const TrialPatient* TrialState::find(const std::string& id) const {
    for (const auto& p : patients) {
        if (p.id == id) return &p;
    }
    return nullptr;
}

std::vector<PatientRecord> TrialState::observed_records() const {
    std::vector<PatientRecord> out;
    for (const auto& p : patients) {
        if (p.doses.empty()) continue;
        out.push_back({p.id, p.sequence, p.doses, p.dlt});
    }
    return out;
}

bool TrialState::all_followed(std::size_t cycles) const {
    return std::all_of(patients.begin(), patients.end(), [&](const TrialPatient& p) { return p.closed(cycles); });
}

json to_json(const TrialState& s) {
    json patients = json::array();
    for (const auto& p : s.patients) {
        patients.push_back({{"id", p.id},
                            {"sequence", p.sequence + 1},
                            {"doses", p.doses},
                            {"completed_cycles", p.completed_cycles()},
                            {"dlt", p.dlt}});
    }
    json j{{"status", to_string(s.status)},
           {"status_reason", s.status_reason},
           {"current_recommendation", s.current_recommendation + 1},
           {"highest_sequence_tried", s.highest_tried ? json(*s.highest_tried + 1) : json(nullptr)},
           {"patients", patients},
           {"events", s.event_log.size()},
           {"final_mts", s.final_mts ? json(*s.final_mts + 1) : json(nullptr)}};
    j["summary"] = s.summary ? to_json(*s.summary) : json(nullptr);
    return j;
}

void apply_event(TrialState& state, const TrialConfig& cfg, const TrialEvent& event) {
    if (event.index != state.event_log.size()) {
        throw TrialError("event index " + std::to_string(event.index) + " out of sequence (expected " +
                         std::to_string(state.event_log.size()) + ")");
    }
    const json& p = event.payload;
    switch (event.kind) {
        case EventKind::created:
            state.status = TrialStatus::accruing;
            state.current_recommendation = first_allocation(cfg);
            break;
        case EventKind::patient_enrolled: {
            TrialPatient pt;
            pt.id = p.at("patient").get<std::string>();
            pt.sequence = p.at("sequence").get<std::size_t>() - 1;
            state.highest_tried = std::max(state.highest_tried.value_or(0), pt.sequence);
            state.patients.push_back(std::move(pt));
            break;
        }
        case EventKind::cycle_completed:
        case EventKind::dlt_recorded: {
            auto& pt = find_mut(state, p.at("patient").get<std::string>());
            pt.doses.push_back(p.at("dose").get<double>());
            pt.dlt = event.kind == EventKind::dlt_recorded;
            if (p.contains("idempotency_key")) state.idempotency_keys.insert(p["idempotency_key"].get<std::string>());
            break;
        }
        case EventKind::reestimated:
            state.summary = summary_from_json(p);
            break;
        case EventKind::recommendation_issued:
            state.current_recommendation = p.at("sequence").get<std::size_t>() - 1;
            break;
        case EventKind::suspended:
            state.status = TrialStatus::suspended;
            state.status_reason = p.value("reason", "");
            break;
        case EventKind::resumed:
            state.status = TrialStatus::accruing;
            state.status_reason.clear();
            break;
        case EventKind::stopped:
            state.status = TrialStatus::stopped_safety;
            state.status_reason = p.value("reason", "");
            state.final_mts.reset();
            break;
        case EventKind::completed:
            state.status = TrialStatus::completed;
            state.status_reason.clear();
            if (p.contains("mts") && !p["mts"].is_null()) {
                state.final_mts = p["mts"].get<std::size_t>() - 1;
            } else {
                state.final_mts.reset();
            }
            break;
    }
    state.event_log.push_back(event);
}

TrialState replay(const TrialConfig& cfg, std::span<const TrialEvent> events) {
    TrialState s;
    for (const auto& e : events) apply_event(s, cfg, e);
    return s;
}

Clock system_clock() {
    return [] {
        const auto now = std::chrono::system_clock::now();
        const std::time_t t = std::chrono::system_clock::to_time_t(now);
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[40];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
        char out[48];
        std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
        return std::string(out);
    };
}

Transaction::Transaction(const TrialState& base, const TrialConfig& cfg, Clock clock)
    : state_(base), cfg_(cfg), clock_(std::move(clock)) {}

void Transaction::emit(EventKind kind, json payload) {
    TrialEvent e;
    e.index = state_.next_event_index();
    e.timestamp = clock_();
    e.kind = kind;
    e.payload = std::move(payload);
    apply_event(state_, cfg_, e);
    new_events_.push_back(std::move(e));
}

void create_trial(Transaction& tx, const json& config_document) {
    if (!tx.state().event_log.empty()) throw TrialError("trial already created");
    tx.config().validate();
    tx.emit(EventKind::created, json{{"config", config_document}});
    tx.emit(EventKind::recommendation_issued, json{{"sequence", first_allocation(tx.config()) + 1}, {"basis", "first"}});
}

void enroll_patient(Transaction& tx, const std::string& patient_id, std::optional<std::size_t> sequence) {
    const auto& s = tx.state();
    const auto& cfg = tx.config();
    if (s.status != TrialStatus::accruing) {
        throw TrialError("accrual not open: trial is " + to_string(s.status) +
                         (s.status_reason.empty() ? "" : " (" + s.status_reason + ")"));
    }
    if (patient_id.empty()) throw TrialError("patient id must not be empty");
    if (s.find(patient_id)) throw TrialError("patient '" + patient_id + "' already enrolled");
    if (s.patients.size() >= cfg.max_sample_size) throw TrialError("maximum sample size reached");
    const std::size_t seq = sequence.value_or(s.current_recommendation);
    if (seq >= cfg.panel.size()) throw TrialError("sequence " + std::to_string(seq + 1) + " not in panel");
    const std::size_t cap = s.highest_tried ? *s.highest_tried + 1 : 0;
    if (seq > cap) {
        throw TrialError("sequence " + std::to_string(seq + 1) + " skips untried sequences (highest allowed " +
                         std::to_string(cap + 1) + ")");
    }
    tx.emit(EventKind::patient_enrolled, json{{"patient", patient_id}, {"sequence", seq + 1}});
}

bool record_outcome(Transaction& tx, const CycleOutcome& o) {
    const auto& s = tx.state();
    const auto& cfg = tx.config();
    if (!o.idempotency_key.empty() && s.idempotency_keys.count(o.idempotency_key)) return false;
    if (is_terminal(s.status)) throw TrialError("trial is " + to_string(s.status) + "; no further outcomes accepted");
    const TrialPatient* pt = s.find(o.patient_id);
    if (!pt) throw TrialError("unknown patient '" + o.patient_id + "'");
    if (pt->closed(cfg.panel.cycles())) throw TrialError("patient '" + o.patient_id + "' has no open cycles");
    const std::size_t expected = pt->completed_cycles() + 1;
    if (o.cycle != expected) {
        throw TrialError("patient '" + o.patient_id + "': cycle " + std::to_string(o.cycle) +
                         " out of order (expected " + std::to_string(expected) + ")");
    }
    const double dose = o.dose.value_or(cfg.panel[pt->sequence].doses[o.cycle - 1]);
    if (!(dose > 0.0) || !std::isfinite(dose)) throw TrialError("administered dose must be positive");
    json payload{{"patient", o.patient_id}, {"cycle", o.cycle}, {"dose", dose}};
    if (!o.idempotency_key.empty()) payload["idempotency_key"] = o.idempotency_key;
    tx.emit(o.dlt ? EventKind::dlt_recorded : EventKind::cycle_completed, std::move(payload));
    return true;
}

namespace {

void maybe_complete(Transaction& tx) {
    const auto& s = tx.state();
    const auto& cfg = tx.config();
    if (s.status != TrialStatus::accruing) return;
    if (s.patients.size() < cfg.max_sample_size || !s.all_followed(cfg.panel.cycles())) return;
    json mts = nullptr;
    if (s.summary) {
        mts = *select_mts(s.summary->estimate.back(), cfg.target, false) + 1;
    }
    tx.emit(EventKind::completed, json{{"mts", mts}});
}

}  // namespace

void reestimate(Transaction& tx, StopPolicy policy) {
    const auto& cfg = tx.config();
    if (is_terminal(tx.state().status)) return;
    const auto records = tx.state().observed_records();
    if (records.empty()) return;
    const LikelihoodTerms ll(records, cfg.panel, cfg.cycle_weight);
    const std::uint64_t seed = derive_seed(cfg.seed, tx.state().next_event_index());
    const PosteriorDraws draws = sample_posterior(ll, cfg.prior, cfg.sampler, seed);
    const PosteriorSummary summary = summarize_posterior(draws, cfg, records.size());
    tx.emit(EventKind::reestimated, to_json(summary));

    const auto& s = tx.state();
    const auto& at_k = summary.estimate.back();
    const std::size_t best = closest_to_target(at_k, cfg.target);
    const std::size_t rec = recommend_next(at_k, cfg.target, s.highest_tried);
    tx.emit(EventKind::recommendation_issued, json{{"sequence", rec + 1}, {"unconstrained", best + 1}});

    if (check_stopping(tx.state().patients.size(), summary.exceedance, cfg) == StopDecision::stop) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "P(p_T(sequence 1) > %.3g) = %.4f exceeds tau_T = %.3g", cfg.target,
                      summary.exceedance, cfg.tau);
        if (policy == StopPolicy::terminate) {
            tx.emit(EventKind::stopped, json{{"reason", buf}, {"exceedance", summary.exceedance}});
        } else if (tx.state().status == TrialStatus::accruing) {
            tx.emit(EventKind::suspended, json{{"reason", buf}, {"exceedance", summary.exceedance}});
        }
        return;
    }
    maybe_complete(tx);
}

void resume_trial(Transaction& tx, const std::string& note) {
    if (tx.state().status != TrialStatus::suspended) {
        throw TrialError("trial is " + to_string(tx.state().status) + ", not suspended");
    }
    if (note.empty()) throw TrialError("an authorization note is required to resume");
    tx.emit(EventKind::resumed, json{{"note", note}});
    maybe_complete(tx);
}

void confirm_stop(Transaction& tx, const std::string& note) {
    if (is_terminal(tx.state().status)) throw TrialError("trial is already " + to_string(tx.state().status));
    if (note.empty()) throw TrialError("an authorization note is required to stop");
    tx.emit(EventKind::stopped, json{{"reason", "operator confirmed stop"}, {"note", note}});
}

TrialState advance_trial(const TrialState& state, const TrialConfig& cfg, std::span<const CycleOutcome> outcomes,
                         StopPolicy policy, const Clock& clock) {
    if (outcomes.empty()) return state;
    if (is_terminal(state.status)) throw TrialError("trial is " + to_string(state.status));
    Transaction tx(state, cfg, clock);
    bool changed = false;
    for (const auto& o : outcomes) changed = record_outcome(tx, o) || changed;
    if (!changed) return state;
    reestimate(tx, policy);
    return std::move(tx).take();
}

}  // namespace dice
