#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "dice/retrospective.hpp"
#include "dice/rng.hpp"
#include "dice/service.hpp"
#include "service_fuzz.hpp"
#include "test_data.hpp"

using namespace dice;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(DICE_DATA_DIR) / ".." / "configs";

json fast_trial() {
    json j = read_json_file(kConfigs / "trial_dice.json");
    j["sampler"] = {{"chains", 2}, {"draws_per_chain", 500}, {"burn_in", 250}};
    j["max_sample_size"] = 30;
    j["seed"] = 21;
    return j;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("dice-test-" + tag + "-" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ServiceOptions options(const fs::path& dir, TrialLog::FaultHook hook = {}) {
    ServiceOptions o;
    o.storage = dir;
    auto n = std::make_shared<int>(0);
    o.clock = [n] { return "2026-01-01T00:00:" + std::to_string((*n)++); };
    o.fault_hook = std::move(hook);
    return o;
}

int status_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ServiceError& e) {
        return e.status();
    }
    return 200;
}

json outcome(const std::string& p, std::size_t c, bool dlt) { return {{"patient", p}, {"cycle", c}, {"dlt", dlt}}; }

}  // namespace

TEST_CASE("creating a trial and reading it back") {
    TempDir dir("create");
    ConductService svc(options(dir.path));
    const auto t = svc.create_trial(fast_trial());
    const std::string id = t.at("id");
    CHECK(id == "T0001");
    CHECK(t.at("status") == "accruing");
    CHECK(t.at("recommendation") == 1);
    CHECK(svc.get_trial(id).at("config_fingerprint") == t.at("config_fingerprint"));
    CHECK(svc.list_trials().at("trials").size() == 1);
    CHECK(svc.health().at("status") == "ok");
    CHECK(status_of([&] { svc.get_trial("T9999"); }) == 404);
    // Wrapped form is accepted too.
    CHECK(svc.create_trial({{"config", fast_trial()}}).at("id") == "T0002");
}

TEST_CASE("invalid trial configs are rejected with 422") {
    TempDir dir("invalid");
    ConductService svc(options(dir.path));
    auto bad = fast_trial();
    bad["tau"] = 1.2;
    try {
        svc.create_trial(bad);
        FAIL("expected an error");
    } catch (const ServiceError& e) {
        CHECK(e.status() == 422);
        CHECK(std::string(e.what()).find("tau") != std::string::npos);
    }
    bad = fast_trial();
    bad["colour"] = "red";
    CHECK(status_of([&] { svc.create_trial(bad); }) == 422);
    CHECK(svc.trial_ids().empty());
}

TEST_CASE("enrollment and outcomes drive the recommendation") {
    TempDir dir("flow");
    ConductService svc(options(dir.path));
    const std::string id = svc.create_trial(fast_trial()).at("id");
    CHECK(svc.enroll(id, {{"patient", "p1"}}).at("applied") == true);
    CHECK(status_of([&] { svc.enroll(id, {{"patient", "p2"}, {"sequence", 3}}); }) == 409);  // skip
    CHECK(status_of([&] { svc.enroll(id, {{"patient", "p2"}, {"sequence", 0}}); }) == 400);
    CHECK(status_of([&] { svc.enroll(id, {{"name", "p2"}}); }) == 400);
    CHECK(status_of([&] { svc.record_outcomes(id, outcome("p1", 2, false)); }) == 409);  // out of order

    const auto r = svc.record_outcomes(id, {{"outcomes", {outcome("p1", 1, false), outcome("p1", 2, false)}}});
    CHECK(r.at("applied") == true);
    const auto rec = svc.recommendation(id);
    CHECK(rec.at("withheld") == false);
    CHECK(rec.at("sequence").get<int>() >= 1);
    CHECK(rec.at("sequence").get<int>() <= 2);
    CHECK(rec.at("max_allowed_sequence") == 2);
    CHECK(rec.at("estimates").size() == 5);
    CHECK(rec.at("posterior_seed").is_number());
}

TEST_CASE("predictions at horizon K agree with the recommendation estimates") {
    TempDir dir("pred");
    ConductService svc(options(dir.path));
    const std::string id = svc.create_trial(fast_trial()).at("id");
    CHECK(svc.predictions(id, 2).at("note") == "no outcome data yet");
    svc.enroll(id, {{"patient", "a"}});
    svc.record_outcomes(id, outcome("a", 1, false));
    const auto rec = svc.recommendation(id);
    const auto p5 = svc.predictions(id, 5);
    CHECK(p5.at("estimates") == rec.at("estimates"));
    const auto p1 = svc.predictions(id, 1);
    for (std::size_t j = 0; j < 5; ++j) {
        CHECK(p1.at("estimates")[j].get<double>() <= p5.at("estimates")[j].get<double>() + 1e-12);
        CHECK(p1.at("lower")[j].get<double>() <= p1.at("upper")[j].get<double>());
    }
    CHECK(status_of([&] { svc.predictions(id, 0); }) == 422);
    CHECK(status_of([&] { svc.predictions(id, 6); }) == 422);
}

TEST_CASE("safety suspension withholds recommendations until reviewed") {
    TempDir dir("suspend");
    ConductService svc(options(dir.path));
    const std::string id = svc.create_trial(fast_trial()).at("id");
    for (int i = 0; i < 6; ++i) svc.enroll(id, {{"patient", "p" + std::to_string(i)}, {"sequence", 1}});
    json batch = json::array();
    for (int i = 0; i < 6; ++i) batch.push_back(outcome("p" + std::to_string(i), 1, true));
    const auto after = svc.record_outcomes(id, {{"outcomes", batch}});
    CHECK(after.at("status") == "suspended");
    const auto rec = svc.recommendation(id);
    CHECK(rec.at("withheld") == true);
    CHECK(rec.at("sequence").is_null());
    CHECK(rec.at("reason").get<std::string>().find("suspended") != std::string::npos);
    CHECK(status_of([&] { svc.enroll(id, {{"patient", "late"}}); }) == 409);
    CHECK(status_of([&] { svc.resume(id, json::object()); }) == 409);  // note required

    CHECK(svc.resume(id, {{"note", "DSMB review"}}).at("status") == "accruing");
    CHECK(svc.confirm_stop(id, {{"note", "halt"}}).at("status") == "stopped_safety");
    CHECK(status_of([&] { svc.record_outcomes(id, outcome("p0", 2, false)); }) == 409);
    CHECK(status_of([&] { svc.resume(id, {{"note", "x"}}); }) == 409);
}

TEST_CASE("idempotency keys make retries safe") {
    TempDir dir("idem");
    ConductService svc(options(dir.path));
    const std::string id = svc.create_trial(fast_trial()).at("id");
    CHECK(svc.enroll(id, {{"patient", "a"}, {"idempotency_key", "e1"}}).at("applied") == true);
    CHECK(svc.enroll(id, {{"patient", "a"}, {"idempotency_key", "e1"}}).at("applied") == false);
    json o = outcome("a", 1, false);
    o["idempotency_key"] = "o1";
    CHECK(svc.record_outcomes(id, o).at("applied") == true);
    const auto n = svc.state(id).event_log.size();
    CHECK(svc.record_outcomes(id, o).at("applied") == false);
    CHECK(svc.state(id).event_log.size() == n);
}

TEST_CASE("a restarted service recovers every trial from its log") {
    TempDir dir("restart");
    TrialState before;
    std::string id;
    {
        ConductService svc(options(dir.path));
        id = svc.create_trial(fast_trial()).at("id").get<std::string>();
        svc.enroll(id, {{"patient", "a"}});
        svc.record_outcomes(id, outcome("a", 1, true));
        svc.create_trial(fast_trial());
        before = svc.state(id);
    }
    ConductService again(options(dir.path));
    CHECK(again.trial_ids().size() == 2);
    CHECK(again.state(id) == before);
    CHECK(again.create_trial(fast_trial()).at("id") == "T0003");
}

TEST_CASE("an unusable storage path is reported") {
    TempDir dir("badstore");
    const fs::path file = dir.path / "plain-file";
    std::ofstream(file) << "x";
    CHECK_THROWS_AS(ConductService(options(file)), ServiceError);
}

TEST_CASE("a torn tail is truncated on load") {
    TempDir dir("torn");
    std::string id;
    {
        ConductService svc(options(dir.path));
        id = svc.create_trial(fast_trial()).at("id").get<std::string>();
        svc.enroll(id, {{"patient", "a"}});
    }
    const fs::path log = dir.path / (id + ".jsonl");
    const auto good = fs::file_size(log);
    std::ofstream(log, std::ios::app) << R"({"index": 99, "kind": "enrolled")";
    ConductService svc(options(dir.path));
    CHECK(svc.state(id).patients.size() == 1);
    CHECK(fs::file_size(log) == good);
}

TEST_CASE("crash and replay over a fuzzed request script matches an uninterrupted run") {
    TempDir ref_dir("fuzz-ref"), crash_dir("fuzz-crash");
    const auto rep = testing::crash_replay_fuzz(testing::fuzz_trial_config(kConfigs), ref_dir.path, crash_dir.path, 50);
    MESSAGE("script steps: " << rep.steps << ", events: " << rep.events << ", crashes: " << rep.crashes);
    CHECK(rep.steps == 50);
    CHECK(rep.crashes > 3);
    CHECK(rep.live_equal);
    CHECK(rep.cold_equal);
}

TEST_CASE("HTTP contract") {
    TempDir dir("http");
    ConductService svc(options(dir.path));
    httplib::Server server;
    register_routes(server, svc);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto health = cli.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body).at("status") == "ok");

    auto created = cli.Post("/trials", fast_trial().dump(), "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    const std::string id = json::parse(created->body).at("id");

    auto bad = cli.Post("/trials", "{not json", "application/json");
    CHECK(bad->status == 400);
    CHECK(json::parse(bad->body).at("status") == 400);
    auto invalid = cli.Post("/trials", json{{"target", 2.0}}.dump(), "application/json");
    CHECK(invalid->status == 422);

    auto enrolled = cli.Post(("/trials/" + id + "/patients").c_str(), json{{"patient", "x"}}.dump(), "application/json");
    CHECK(enrolled->status == 200);
    auto out = cli.Post(("/trials/" + id + "/outcomes").c_str(), outcome("x", 1, false).dump(), "application/json");
    CHECK(out->status == 200);
    auto rec = cli.Get(("/trials/" + id + "/recommendation").c_str());
    CHECK(rec->status == 200);
    CHECK(json::parse(rec->body).at("withheld") == false);
    CHECK(cli.Get(("/trials/" + id + "/predictions?k=3").c_str())->status == 200);
    CHECK(cli.Get(("/trials/" + id + "/predictions?k=9").c_str())->status == 422);
    CHECK(cli.Get(("/trials/" + id + "/predictions?k=two").c_str())->status == 400);
    CHECK(cli.Get(("/trials/" + id + "/predictions").c_str())->status == 400);
    CHECK(cli.Get("/trials/T7777")->status == 404);
    CHECK(cli.Post(("/trials/" + id + "/resume").c_str(), json{{"note", "n"}}.dump(), "application/json")->status ==
          409);
    auto list = cli.Get("/trials");
    CHECK(json::parse(list->body).at("trials").size() == 1);

    server.stop();
    th.join();
}

TEST_CASE("retrospective import summarises the first and last cycle") {
    const auto cfg = trial_config_from_json(read_json_file(fs::path(DICE_DATA_DIR) / ".." / "configs" /
                                                           "retrospective_trial.json"));
    const auto rows = read_patient_csv(testing::data_path("examples/synthetic_retrospective.csv"));
    const auto records = records_from_rows(rows, cfg.panel);
    const auto r = retrospective_analysis(cfg, records);
    CHECK(r.patients == records.size());
    CHECK(r.summary.estimate.size() == cfg.panel.cycles());
    for (std::size_t k : {std::size_t{0}, cfg.panel.cycles() - 1}) {
        REQUIRE(r.summary.estimate[k].size() == cfg.panel.size());
        for (std::size_t j = 0; j < cfg.panel.size(); ++j) {
            CHECK(r.summary.lower[k][j] <= r.summary.estimate[k][j]);
            CHECK(r.summary.estimate[k][j] <= r.summary.upper[k][j]);
        }
    }
    CHECK((r.summary.exceedance >= 0.0 && r.summary.exceedance <= 1.0));
    CHECK(r.stop == (r.summary.exceedance > cfg.tau));
    const json j = to_json(r, cfg);
    CHECK(j.contains("stop"));

    std::istringstream broken("patient_id,sequence,cycle,dose,dlt\na,1,2,10,0\n");
    CHECK_THROWS(records_from_rows(read_patient_csv(broken), cfg.panel));
}

TEST_CASE("command-line exit codes") {
    const std::string cli = DICE_CLI;
    const auto code = [&](const std::string& args) {
        const int rc = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(rc);
    };
    CHECK(code("--help") == 0);
    CHECK(code("simulate /nonexistent/config.json") == 2);
    TempDir dir("cli");
    std::ofstream(dir.path / "bad.json") << R"({"name": "x", "n_sims": -4})";
    CHECK(code("simulate " + (dir.path / "bad.json").string()) == 1);
}
