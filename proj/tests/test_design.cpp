#include <doctest.h>

#include "dice/design.hpp"
#include "test_data.hpp"

using namespace dice;

namespace {

TrialConfig small_config() {
    TrialConfig c(testing::sim_panel(), CycleWeight::linear(5));
    c.sampler.chains = 2;
    c.sampler.draws_per_chain = 1000;
    c.sampler.burn_in = 500;
    c.seed = 11;
    return c;
}

Clock counter_clock() {
    auto n = std::make_shared<int>(0);
    return [n] { return "t" + std::to_string((*n)++); };
}

TrialState run(const TrialState& s, const TrialConfig& cfg, const std::function<void(Transaction&)>& f) {
    Transaction tx(s, cfg, counter_clock());
    f(tx);
    return std::move(tx).take();
}

}  // namespace

TEST_CASE("closest-to-target ties break to the lower index") {
    const std::vector<double> e{0.1, 0.25, 0.35, 0.5};
    CHECK(closest_to_target(e, 0.3) == 1);
    const std::vector<double> f{0.1, 0.2, 0.4};
    CHECK(closest_to_target(f, 0.3) == 1);
    const std::vector<double> g{0.31, 0.32};
    CHECK(closest_to_target(g, 0.3) == 0);
}

TEST_CASE("recommendation never skips an untried sequence") {
    const std::vector<double> e{0.05, 0.08, 0.1, 0.2, 0.3};
    CHECK(recommend_next(e, 0.3, std::nullopt) == 0);
    CHECK(recommend_next(e, 0.3, 1) == 2);
    CHECK(recommend_next(e, 0.3, 4) == 4);
    const std::vector<double> h{0.5, 0.6, 0.7};
    CHECK(recommend_next(h, 0.3, 2) == 0);
}

TEST_CASE("stopping rule needs the patient guard and a strict exceedance") {
    const auto cfg = small_config();
    CHECK(check_stopping(5, 0.99, cfg) == StopDecision::proceed);
    CHECK(check_stopping(6, 0.99, cfg) == StopDecision::stop);
    CHECK(check_stopping(6, 0.9, cfg) == StopDecision::proceed);
    CHECK_FALSE(select_mts(std::vector<double>{0.3}, 0.3, true).has_value());
    CHECK(select_mts(std::vector<double>{0.1, 0.29, 0.6}, 0.3, false) == 1u);
}

TEST_CASE("trial config validation") {
    auto cfg = small_config();
    cfg.tau = 1.2;
    CHECK_THROWS_AS(cfg.validate(), TrialError);
    cfg = small_config();
    cfg.target = 0.0;
    CHECK_THROWS_AS(cfg.validate(), TrialError);
    cfg = small_config();
    cfg.cycle_weight = CycleWeight::linear(4);
    CHECK_THROWS_AS(cfg.validate(), TrialError);
}

TEST_CASE("a new trial recommends the first sequence") {
    const auto cfg = small_config();
    const auto s = run(TrialState{}, cfg, [](Transaction& tx) { create_trial(tx, json::object()); });
    CHECK(s.status == TrialStatus::accruing);
    CHECK(s.current_recommendation == 0);
    CHECK(s.event_log.size() == 2);
    CHECK(s.event_log[0].timestamp == "t0");
}

TEST_CASE("outcomes close patients under the one-DLT rule") {
    const auto cfg = small_config();
    auto s = run(TrialState{}, cfg, [](Transaction& tx) {
        create_trial(tx, json::object());
        enroll_patient(tx, "p1", std::nullopt);
        enroll_patient(tx, "p2", std::nullopt);
    });
    CHECK_THROWS_AS(run(s, cfg, [](Transaction& tx) { enroll_patient(tx, "p3", 2); }), TrialError);  // skip
    CHECK_THROWS_AS(run(s, cfg, [](Transaction& tx) { enroll_patient(tx, "p1", 0); }), TrialError);  // duplicate

    std::vector<CycleOutcome> batch{{"p1", 1, false, std::nullopt, ""}, {"p1", 2, true, std::nullopt, ""}};
    s = advance_trial(s, cfg, batch, StopPolicy::suspend, counter_clock());
    const auto* p1 = s.find("p1");
    REQUIRE(p1);
    CHECK(p1->dlt);
    CHECK(p1->completed_cycles() == 2);
    CHECK(p1->closed(5));
    CHECK(s.summary.has_value());

    CHECK_THROWS_AS(run(s, cfg, [](Transaction& tx) { record_outcome(tx, {"p1", 3, false, std::nullopt, ""}); }),
                    TrialError);
    CHECK_THROWS_AS(run(s, cfg, [](Transaction& tx) { record_outcome(tx, {"p2", 2, false, std::nullopt, ""}); }),
                    TrialError);
    CHECK_THROWS_AS(run(s, cfg, [](Transaction& tx) { record_outcome(tx, {"nobody", 1, false, std::nullopt, ""}); }),
                    TrialError);

    std::vector<CycleOutcome> full;
    for (std::size_t k = 1; k <= 5; ++k) full.push_back({"p2", k, false, std::nullopt, ""});
    s = advance_trial(s, cfg, full, StopPolicy::suspend, counter_clock());
    const auto* p2 = s.find("p2");
    CHECK(p2->closed(5));
    CHECK_FALSE(p2->dlt);
    CHECK(p2->doses == std::vector<double>(5, 5.0));
}

TEST_CASE("replaying the event log reconstructs the state") {
    const auto cfg = small_config();
    auto s = run(TrialState{}, cfg, [](Transaction& tx) {
        create_trial(tx, json::object());
        enroll_patient(tx, "a", std::nullopt);
    });
    std::vector<CycleOutcome> b{{"a", 1, false, 4.5, "k1"}};
    s = advance_trial(s, cfg, b, StopPolicy::suspend, counter_clock());
    const TrialState r = replay(cfg, s.event_log);
    CHECK(r == s);
    // Events survive a JSON round trip unchanged.
    for (const auto& e : s.event_log) CHECK(event_from_json(json::parse(to_json(e).dump())) == e);
}

TEST_CASE("idempotency keys suppress duplicate outcomes") {
    const auto cfg = small_config();
    auto s = run(TrialState{}, cfg, [](Transaction& tx) {
        create_trial(tx, json::object());
        enroll_patient(tx, "a", std::nullopt);
    });
    std::vector<CycleOutcome> b{{"a", 1, false, std::nullopt, "key-1"}};
    s = advance_trial(s, cfg, b, StopPolicy::suspend, counter_clock());
    const auto again = advance_trial(s, cfg, b, StopPolicy::suspend, counter_clock());
    CHECK(again == s);
}

TEST_CASE("a toxic first sequence suspends accrual and needs an audited resume") {
    const auto cfg = small_config();
    auto s = run(TrialState{}, cfg, [](Transaction& tx) {
        create_trial(tx, json::object());
        for (int i = 0; i < 5; ++i) enroll_patient(tx, "p" + std::to_string(i), 0);
    });
    std::vector<CycleOutcome> b;
    for (int i = 0; i < 5; ++i) b.push_back({"p" + std::to_string(i), 1, true, std::nullopt, ""});
    s = advance_trial(s, cfg, b, StopPolicy::suspend, counter_clock());
    CHECK(s.status == TrialStatus::accruing);  // five patients: below the guard
    CHECK(s.summary->exceedance > cfg.tau);
    s = run(s, cfg, [](Transaction& tx) { enroll_patient(tx, "p5", 0); });

    std::vector<CycleOutcome> sixth{{"p5", 1, true, std::nullopt, ""}};
    s = advance_trial(s, cfg, sixth, StopPolicy::suspend, counter_clock());
    CHECK(s.status == TrialStatus::suspended);
    CHECK(s.status_reason.find("exceeds tau_T") != std::string::npos);
    CHECK(s.summary->exceedance > cfg.tau);

    CHECK_THROWS_AS(run(s, cfg, [](Transaction& tx) { enroll_patient(tx, "late", 0); }), TrialError);
    CHECK_THROWS_AS(run(s, cfg, [](Transaction& tx) { resume_trial(tx, ""); }), TrialError);
    const auto resumed = run(s, cfg, [](Transaction& tx) { resume_trial(tx, "reviewed by DSMB"); });
    CHECK(resumed.status == TrialStatus::accruing);
    CHECK(resumed.event_log.back().payload.at("note") == "reviewed by DSMB");
    CHECK_THROWS_AS(run(resumed, cfg, [](Transaction& tx) { resume_trial(tx, "again"); }), TrialError);

    const auto stopped = run(s, cfg, [](Transaction& tx) { confirm_stop(tx, "confirmed"); });
    CHECK(stopped.status == TrialStatus::stopped_safety);
    CHECK(is_terminal(stopped.status));
    CHECK_THROWS_AS(run(stopped, cfg, [](Transaction& tx) { resume_trial(tx, "no"); }), TrialError);
    CHECK_THROWS_AS(run(stopped, cfg, [](Transaction& tx) { record_outcome(tx, {"p0", 2, false, std::nullopt, ""}); }),
                    TrialError);
}

TEST_CASE("terminate policy stops immediately") {
    const auto cfg = small_config();
    auto s = run(TrialState{}, cfg, [](Transaction& tx) {
        create_trial(tx, json::object());
        for (int i = 0; i < 6; ++i) enroll_patient(tx, "p" + std::to_string(i), 0);
    });
    std::vector<CycleOutcome> b;
    for (int i = 0; i < 6; ++i) b.push_back({"p" + std::to_string(i), 1, true, std::nullopt, ""});
    s = advance_trial(s, cfg, b, StopPolicy::terminate, counter_clock());
    CHECK(s.status == TrialStatus::stopped_safety);
}

TEST_CASE("a fully followed trial completes with an MTS") {
    auto cfg = small_config();
    cfg.max_sample_size = 3;
    auto s = run(TrialState{}, cfg, [](Transaction& tx) {
        create_trial(tx, json::object());
        enroll_patient(tx, "a", 0);
        enroll_patient(tx, "b", 1);
        enroll_patient(tx, "c", 2);
    });
    std::vector<CycleOutcome> b;
    for (const char* id : {"a", "b", "c"}) {
        for (std::size_t k = 1; k <= 5; ++k) b.push_back({id, k, false, std::nullopt, ""});
    }
    s = advance_trial(s, cfg, b, StopPolicy::suspend, counter_clock());
    CHECK(s.status == TrialStatus::completed);
    REQUIRE(s.final_mts.has_value());
    CHECK(*s.final_mts == closest_to_target(s.summary->estimate.back(), cfg.target));
}

TEST_CASE("apply_event rejects gaps in the index sequence") {
    const auto cfg = small_config();
    TrialState s;
    TrialEvent e;
    e.index = 3;
    CHECK_THROWS_AS(apply_event(s, cfg, e), TrialError);
}
