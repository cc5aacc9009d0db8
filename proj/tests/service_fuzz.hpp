#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dice/rng.hpp"
#include "dice/service.hpp"

namespace dice::testing {

inline json fuzz_trial_config(const std::filesystem::path& configs) {
    json j = read_json_file(configs / "trial_dice.json");
    j["sampler"] = {{"chains", 2}, {"draws_per_chain", 500}, {"burn_in", 250}};
    j["max_sample_size"] = 30;
    j["seed"] = 21;
    return j;
}

// One scripted mutating request.
struct Step {
    std::string op;
    json body;
};

inline json apply(ConductService& svc, const std::string& id, const Step& s) {
    if (s.op == "create") return svc.create_trial(s.body);
    if (s.op == "enroll") return svc.enroll(id, s.body);
    if (s.op == "outcomes") return svc.record_outcomes(id, s.body);
    if (s.op == "resume") return svc.resume(id, s.body);
    return svc.confirm_stop(id, s.body);
}

// Timestamps derive from the request number so a retried request stamps identically.
inline ServiceOptions scripted_options(const std::filesystem::path& dir, const std::shared_ptr<std::size_t>& request,
                                       TrialLog::FaultHook hook = {}) {
    ServiceOptions o;
    o.storage = dir;
    o.clock = [request] { return "request-" + std::to_string(*request); };
    o.fault_hook = std::move(hook);
    return o;
}

inline std::vector<Step> build_script(const json& trial, ConductService& svc,
                                      const std::shared_ptr<std::size_t>& request, std::size_t n) {
    Rng rng(2718);
    std::vector<Step> script;
    script.push_back({"create", trial});
    *request = 0;
    const std::string id = apply(svc, "", script[0]).at("id");
    int next_patient = 0;
    while (script.size() < n) {
        const TrialState s = svc.state(id);
        if (is_terminal(s.status)) break;
        Step step;
        std::vector<std::string> open;
        for (const auto& p : s.patients) {
            if (!p.closed(5)) open.push_back(p.id);
        }
        if (s.status == TrialStatus::suspended) {
            step = Step{"resume", {{"note", "reviewed"}}};
        } else if (open.empty() || (rng.uniform() < 0.35 && s.patients.size() < 30)) {
            json b{{"patient", "p" + std::to_string(next_patient++)}};
            if (rng.uniform() < 0.3) b["idempotency_key"] = "enroll-" + b["patient"].get<std::string>();
            step = {"enroll", b};
        } else {
            json batch = json::array();
            const auto& pid = open[static_cast<std::size_t>(rng.uniform() * open.size())];
            const auto* p = s.find(pid);
            json o{{"patient", pid}, {"cycle", p->completed_cycles() + 1}, {"dlt", rng.uniform() < 0.15}};
            if (rng.uniform() < 0.5) o["idempotency_key"] = "k" + std::to_string(script.size());
            batch.push_back(o);
            step = {"outcomes", {{"outcomes", batch}}};
        }
        *request = script.size();
        try {
            apply(svc, id, step);
        } catch (const ServiceError&) {
        }
        script.push_back(step);
    }
    return script;
}

struct FuzzReport {
    std::size_t steps = 0;
    std::size_t events = 0;
    int crashes = 0;
    bool live_equal = false;
    bool cold_equal = false;
};

/*
 * Runs the script once cleanly, then again with random crashes at line
 * writes, restarting the service and retrying the interrupted request each
 * time. Both runs must end in the same state.
 */
inline FuzzReport crash_replay_fuzz(const json& trial, const std::filesystem::path& ref_dir,
                                    const std::filesystem::path& crash_dir, std::size_t n_steps) {
    FuzzReport rep;
    auto request = std::make_shared<std::size_t>(0);
    std::vector<Step> script;
    TrialState reference;
    {
        ConductService svc(scripted_options(ref_dir, request));
        script = build_script(trial, svc, request, n_steps);
        reference = svc.state("T0001");
    }
    rep.steps = script.size();
    rep.events = reference.event_log.size();

    auto rng = std::make_shared<Rng>(99);
    auto crashes = std::make_shared<int>(0);
    auto hook = [rng, crashes](std::size_t) {
        const double u = rng->uniform();
        if (u >= 0.08) return TrialLog::Fault::none;
        ++*crashes;
        return u < 0.04 ? TrialLog::Fault::torn_line : TrialLog::Fault::drop_line;
    };
    auto svc = std::make_unique<ConductService>(scripted_options(crash_dir, request, hook));
    for (std::size_t i = 0; i < script.size(); ++i) {
        *request = i;
        for (int attempt = 0; attempt < 50; ++attempt) {
            try {
                apply(*svc, "T0001", script[i]);
                break;
            } catch (const SimulatedCrash&) {
                svc.reset();
                svc = std::make_unique<ConductService>(scripted_options(crash_dir, request, hook));
            } catch (const ServiceError&) {
                break;
            }
        }
    }
    rep.crashes = *crashes;
    rep.live_equal = svc->state("T0001") == reference;
    svc.reset();
    ConductService cold(scripted_options(crash_dir, request));
    rep.cold_equal = cold.state("T0001") == reference;
    return rep;
}

}  // namespace dice::testing
