#include "dice/sim.hpp"

#include <algorithm>
#include <limits>

namespace dice {

void ScenarioSpec::validate() const {
    if (cumulative.empty()) throw SimulationError("scenario '" + name + "' has no sequences");
    const std::size_t K = cycles();
    if (K == 0) throw SimulationError("scenario '" + name + "' has no cycles");
    if (!(target > 0.0 && target < 1.0)) throw SimulationError("scenario '" + name + "': target outside (0, 1)");
    for (std::size_t j = 0; j < cumulative.size(); ++j) {
        const auto& row = cumulative[j];
        if (row.size() != K) throw SimulationError("scenario '" + name + "': ragged matrix");
        for (std::size_t k = 0; k < K; ++k) {
            const std::string where = " at sequence " + std::to_string(j + 1) + ", cycle " + std::to_string(k + 1);
            if (!(row[k] >= 0.0 && row[k] < 1.0)) throw SimulationError("scenario '" + name + "': entry outside [0, 1)" + where);
            if (k > 0 && row[k] < row[k - 1]) throw SimulationError("scenario '" + name + "': row decreases" + where);
            if (j > 0 && row[k] < cumulative[j - 1][k]) {
                throw SimulationError("scenario '" + name + "': column decreases" + where);
            }
        }
    }
}

std::size_t ScenarioSpec::true_mts(std::size_t k) const {
    if (k < 1 || k > cycles()) throw SimulationError("horizon outside 1..K");
    std::vector<double> col(sequences());
    for (std::size_t j = 0; j < sequences(); ++j) col[j] = cumulative[j][k - 1];
    return closest_to_target(col, target);
}

std::vector<std::vector<double>> ScenarioSpec::conditionals() const {
    std::vector<std::vector<double>> out;
    out.reserve(cumulative.size());
    for (const auto& row : cumulative) out.push_back(conditionals_from_cumulative(row));
    return out;
}

CompleteOutcomes::CompleteOutcomes(std::size_t patients, std::size_t sequences, std::size_t cycles, std::uint64_t seed)
    : n_(patients), j_(sequences), k_(cycles), seed_(seed), cells_(patients * sequences, 0) {
    if (cycles > std::numeric_limits<std::uint8_t>::max()) throw SimulationError("too many cycles for lattice");
}

std::vector<std::size_t> CompleteOutcomes::dlt_counts() const {
    std::vector<std::size_t> c(j_, 0);
    for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t j = 0; j < j_; ++j) c[j] += dlt_cycle(i, j) ? 1 : 0;
    }
    return c;
}

CompleteOutcomes generate_complete_outcomes(const ScenarioSpec& scenario, std::size_t n, std::uint64_t seed) {
    const auto cond = scenario.conditionals();
    const std::size_t J = scenario.sequences();
    const std::size_t K = scenario.cycles();
    CompleteOutcomes out(n, J, K, seed);
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < J; ++j) {
            std::size_t first = 0;
            for (std::size_t k = 0; k < K; ++k) {
                const double u = rng.uniform();
                if (first == 0 && u < cond[j][k]) first = k + 1;
            }
            out.set_dlt_cycle(i, j, first);
        }
    }
    return out;
}

std::string to_string(Method m) { return m == Method::dice ? "dice" : "tite-crm"; }

Method parse_method(const std::string& s) {
    if (s == "dice") return Method::dice;
    if (s == "tite-crm" || s == "tite") return Method::tite_crm;
    throw SimulationError("unknown method '" + s + "'");
}

std::string to_string(AccrualPolicy a) { return a == AccrualPolicy::staggered ? "staggered" : "full_follow_up"; }

AccrualPolicy parse_accrual(const std::string& s) {
    if (s == "staggered") return AccrualPolicy::staggered;
    if (s == "full_follow_up") return AccrualPolicy::full_follow_up;
    throw SimulationError("unknown accrual policy '" + s + "'");
}

std::string to_string(StopReason r) {
    switch (r) {
        case StopReason::none: return "none";
        case StopReason::safety: return "safety";
        case StopReason::interval_not_computable: return "interval_not_computable";
    }
    return "none";
}

namespace {

struct SimPatient {
    std::size_t sequence;
    std::size_t enrolled_at;  // calendar time in cycles
    std::size_t dlt_cycle;    // 0 = none within K cycles
};

// Completed cycles (and whether the DLT has been observed) at calendar time t.
std::pair<std::size_t, bool> observed_at(const SimPatient& p, std::size_t t, std::size_t K) {
    const std::size_t done = std::min(K, t - p.enrolled_at);
    if (p.dlt_cycle && p.dlt_cycle <= done) return {p.dlt_cycle, true};
    return {done, false};
}

constexpr std::size_t kForever = std::numeric_limits<std::size_t>::max() / 2;

class TrialRunner {
public:
    TrialRunner(Method method, const SimSettings& s, const CompleteOutcomes& o, std::uint64_t seed)
        : method_(method), s_(s), cfg_(s.trial), o_(o), seed_(seed), K_(cfg_.panel.cycles()), J_(cfg_.panel.size()) {}

    TrialResult run() {
        TrialResult res;
        res.allocations.assign(J_, 0);
        enroll(first_allocation(cfg_), 0);
        std::size_t t = 0;
        std::size_t interim = 0;
        while (patients_.size() < cfg_.max_sample_size) {
            t += s_.cohort_gap();
            const Step step = analyse(t, interim++);
            if (step.stop) {
                res.stopped = true;
                res.stopped_at_interim = true;
                res.reason = step.reason;
                break;
            }
            enroll(step.next, t);
        }
        if (!res.stopped) {
            const Step final_step = analyse(kForever, interim++);
            res.final_estimates = final_step.estimates;
            if (final_step.stop) {
                res.stopped = true;
                res.reason = final_step.reason;
            } else {
                res.selected = final_step.selection;
            }
        }
        for (const auto& p : patients_) {
            res.allocations[p.sequence] += 1;
            res.path.push_back(p.sequence);
            res.dlts += p.dlt_cycle ? 1 : 0;
        }
        res.enrolled = patients_.size();
        res.benchmark = benchmark_select(o_.dlt_counts(), o_.patients(), cfg_.target);
        return res;
    }

private:
    struct Step {
        bool stop = false;
        StopReason reason = StopReason::none;
        std::size_t next = 0;
        std::size_t selection = 0;
        std::vector<std::vector<double>> estimates;
    };

    void enroll(std::size_t sequence, std::size_t t) {
        const std::size_t room = cfg_.max_sample_size - patients_.size();
        const std::size_t count = std::min(cfg_.cohort_size, room);
        for (std::size_t c = 0; c < count; ++c) {
            const std::size_t i = patients_.size();
            patients_.push_back({sequence, t, o_.dlt_cycle(i, sequence)});
        }
        highest_ = std::max(highest_.value_or(0), sequence);
    }

    Step analyse(std::size_t t, std::size_t interim) {
        return method_ == Method::dice ? analyse_dice(t, interim) : analyse_tite(t);
    }

    Step analyse_dice(std::size_t t, std::size_t interim) {
        std::vector<PatientRecord> records;
        records.reserve(patients_.size());
        for (const auto& p : patients_) {
            const auto [done, dlt] = observed_at(p, t, K_);
            if (done == 0) continue;
            const auto& doses = cfg_.panel[p.sequence].doses;
            records.push_back({{}, p.sequence, std::vector<double>(doses.begin(), doses.begin() + done), dlt});
        }
        const LikelihoodTerms ll(records, cfg_.panel, cfg_.cycle_weight);
        const auto draws = sample_posterior(ll, cfg_.prior, cfg_.sampler, derive_seed(seed_, 1 + interim));
        Step step;
        const bool final_analysis = t == kForever;
        if (final_analysis) {
            for (std::size_t k = 1; k <= K_; ++k) {
                step.estimates.push_back(estimate_panel(draws, cfg_.panel, cfg_.cycle_weight, k, cfg_.estimator));
            }
        } else {
            step.estimates.push_back(estimate_panel(draws, cfg_.panel, cfg_.cycle_weight, K_, cfg_.estimator));
        }
        const auto& at_K = step.estimates.back();
        const double exceed = exceedance_prob(draws, cfg_.panel, cfg_.cycle_weight, 0, cfg_.target);
        if (check_stopping(patients_.size(), exceed, cfg_) == StopDecision::stop) {
            step.stop = true;
            step.reason = StopReason::safety;
            return step;
        }
        step.next = recommend_next(at_K, cfg_.target, highest_);
        step.selection = closest_to_target(at_K, cfg_.target);
        return step;
    }

    Step analyse_tite(std::size_t t) {
        std::vector<TiteObservation> obs;
        obs.reserve(patients_.size());
        for (const auto& p : patients_) {
            const auto [done, dlt] = observed_at(p, t, K_);
            const double w = dlt ? 1.0 : static_cast<double>(done) / static_cast<double>(K_);
            obs.push_back({p.sequence, w, dlt});
        }
        const auto post = tite_posterior(obs, s_.skeleton, s_.tite, tite_coverage(cfg_.tau));
        const auto decision = tite_next_and_stop(post, cfg_.target, highest_);
        Step step;
        if (decision.stop && patients_.size() >= cfg_.min_patients_for_stopping) {
            step.stop = true;
            step.reason = post.interval_computable ? StopReason::safety : StopReason::interval_not_computable;
            return step;
        }
        step.next = decision.next;
        step.selection = closest_to_target(post.estimate, cfg_.target);
        return step;
    }

    Method method_;
    const SimSettings& s_;
    const TrialConfig& cfg_;
    const CompleteOutcomes& o_;
    std::uint64_t seed_;
    std::size_t K_, J_;
    std::vector<SimPatient> patients_;
    std::optional<std::size_t> highest_;
};

}  // namespace

TrialResult run_trial(Method method, const SimSettings& settings, const CompleteOutcomes& outcomes,
                      std::uint64_t seed) {
    const auto& cfg = settings.trial;
    if (outcomes.patients() < cfg.max_sample_size || outcomes.sequences() != cfg.panel.size() ||
        outcomes.cycles() != cfg.panel.cycles()) {
        throw SimulationError("outcome lattice does not match the trial configuration");
    }
    if (method == Method::tite_crm && settings.skeleton.probabilities.size() != cfg.panel.size()) {
        throw SimulationError("skeleton length does not match the panel");
    }
    return TrialRunner(method, settings, outcomes, seed).run();
}

std::uint64_t replicate_seed(std::uint64_t base_seed, std::size_t replicate) {
    return derive_seed(base_seed, static_cast<std::uint64_t>(replicate));
}

namespace {

TrialResult run_replicate(Method method, const ScenarioSpec& scenario, const SimSettings& settings,
                          std::uint64_t base_seed, std::size_t r) {
    const std::uint64_t rs = replicate_seed(base_seed, r);
    const auto outcomes = generate_complete_outcomes(scenario, settings.trial.max_sample_size, derive_seed(rs, 0));
    return run_trial(method, settings, outcomes, derive_seed(rs, 1));
}

void check_study_inputs(const ScenarioSpec& scenario, const SimSettings& settings, std::size_t n_sims) {
    scenario.validate();
    settings.trial.validate();
    if (n_sims < 1) throw SimulationError("n_sims must be >= 1");
    if (scenario.sequences() != settings.trial.panel.size() || scenario.cycles() != settings.trial.panel.cycles()) {
        throw SimulationError("scenario '" + scenario.name + "' does not match the dose panel shape");
    }
}

}  // namespace

OperatingCharacteristics summarize_study(Method method, const ScenarioSpec& scenario, const SimSettings& settings,
                                         std::uint64_t base_seed, std::vector<TrialResult> trials) {
    const std::size_t J = scenario.sequences();
    OperatingCharacteristics oc;
    oc.method = method;
    oc.scenario = scenario.name;
    oc.cohort_size = settings.trial.cohort_size;
    oc.n_sims = trials.size();
    oc.base_seed = base_seed;
    oc.true_mts = scenario.true_mts(scenario.cycles());
    oc.selection.assign(J, 0.0);
    oc.allocation.assign(J, 0.0);
    oc.benchmark_selection.assign(J, 0.0);
    std::vector<std::size_t> sel(J, 0), bench(J, 0), alloc(J, 0);
    std::size_t none = 0, none_safety = 0, none_nc = 0, stopped = 0, enrolled = 0;
    std::vector<double> dlts;
    dlts.reserve(trials.size());
    for (const auto& t : trials) {
        if (t.selected) {
            ++sel[*t.selected];
        } else {
            ++none;
            (t.reason == StopReason::interval_not_computable ? none_nc : none_safety) += 1;
        }
        stopped += t.stopped ? 1 : 0;
        ++bench[t.benchmark];
        for (std::size_t j = 0; j < J; ++j) alloc[j] += t.allocations[j];
        enrolled += t.enrolled;
        dlts.push_back(static_cast<double>(t.dlts));
    }
    const double n = static_cast<double>(trials.size());
    for (std::size_t j = 0; j < J; ++j) {
        oc.selection[j] = static_cast<double>(sel[j]) / n;
        oc.benchmark_selection[j] = static_cast<double>(bench[j]) / n;
        oc.allocation[j] = enrolled ? static_cast<double>(alloc[j]) / static_cast<double>(enrolled) : 0.0;
    }
    oc.none = static_cast<double>(none) / n;
    oc.none_safety = static_cast<double>(none_safety) / n;
    oc.none_not_computable = static_cast<double>(none_nc) / n;
    oc.proportion_stopped = static_cast<double>(stopped) / n;
    oc.dlt_median = sample_quantile(dlts, 0.5);
    oc.dlt_q1 = sample_quantile(dlts, 0.25);
    oc.dlt_q3 = sample_quantile(dlts, 0.75);
    oc.pcs = oc.selection[oc.true_mts];
    oc.benchmark_pcs = oc.benchmark_selection[oc.true_mts];
    oc.trials = std::move(trials);
    return oc;
}

OperatingCharacteristics run_study(Method method, const ScenarioSpec& scenario, const SimSettings& settings,
                                   std::size_t n_sims, std::uint64_t base_seed) {
    check_study_inputs(scenario, settings, n_sims);
    std::vector<TrialResult> trials(n_sims);
    const long n = static_cast<long>(n_sims);
#pragma omp parallel for schedule(dynamic)
    for (long r = 0; r < n; ++r) {
        trials[r] = run_replicate(method, scenario, settings, base_seed, static_cast<std::size_t>(r));
    }
    return summarize_study(method, scenario, settings, base_seed, std::move(trials));
}

OperatingCharacteristics run_study_serial(Method method, const ScenarioSpec& scenario, const SimSettings& settings,
                                          std::size_t n_sims, std::uint64_t base_seed) {
    check_study_inputs(scenario, settings, n_sims);
    std::vector<TrialResult> trials;
    trials.reserve(n_sims);
    for (std::size_t r = 0; r < n_sims; ++r) trials.push_back(run_replicate(method, scenario, settings, base_seed, r));
    return summarize_study(method, scenario, settings, base_seed, std::move(trials));
}

std::vector<double> predict_mts_study(const OperatingCharacteristics& study, std::size_t k, double target) {
    if (study.trials.empty()) throw SimulationError("study has no replicates");
    const std::size_t J = study.selection.size();
    std::vector<double> dist(J + 1, 0.0);
    for (const auto& t : study.trials) {
        if (!t.selected || t.final_estimates.empty()) {
            dist[0] += 1.0;
            continue;
        }
        if (k < 1 || k > t.final_estimates.size()) throw SimulationError("prediction horizon outside 1..K");
        const auto mts = select_mts(t.final_estimates[k - 1], target, false);
        dist[*mts + 1] += 1.0;
    }
    for (double& d : dist) d /= static_cast<double>(study.trials.size());
    return dist;
}

}  // namespace dice
