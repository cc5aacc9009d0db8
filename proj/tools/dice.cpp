#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include <omp.h>

#include <CLI11.hpp>
#include <httplib.h>

#include "dice/config.hpp"
#include "dice/results.hpp"
#include "dice/retrospective.hpp"
#include "dice/service.hpp"

namespace fs = std::filesystem;
using namespace dice;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitMissingFile = 2;
constexpr int kExitRuntime = 3;

struct MissingFile : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw MissingFile(what + " not found: " + p.string());
}

int thread_count() {
    if (const char* env = std::getenv("DICE_THREADS")) {
        const int n = std::atoi(env);
        if (n < 1) {
            std::cerr << "DICE_THREADS must be a positive integer, got '" << env << "'\n";
            std::exit(kExitConfig);
        }
        omp_set_num_threads(n);
        return n;
    }
    return omp_get_max_threads();
}

json run_metadata(double seconds, int threads) {
    const auto now = system_clock()();
    return {{"generated_at", now}, {"elapsed_seconds", seconds}, {"threads", threads}, {"tool", "dice"}};
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// A scenario given by path is checked up front so a bad path gets its own exit code.
void check_scenario_path(const fs::path& config_path, const json& doc) {
    if (doc.is_object() && doc.contains("scenario") && doc["scenario"].is_string()) {
        const fs::path p = fs::path(doc["scenario"].get<std::string>());
        require_file(p.is_absolute() ? p : config_path.parent_path() / p, "scenario file");
    }
}

int cmd_simulate(const fs::path& config_path, const StudyOverrides& ov, bool serial, bool quiet) {
    require_file(config_path, "config file");
    const json doc = read_json_file(config_path);
    json study_doc = doc;
    // A results document can be fed back in; its embedded config is rerun.
    if (doc.contains("results") && doc["results"].contains("config")) study_doc = doc["results"]["config"];
    check_scenario_path(config_path, study_doc);
    const StudyConfig cfg = study_config_from_json(study_doc, config_path.parent_path(), ov);
    const int threads = thread_count();

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<MethodResult> results;
    for (Method m : cfg.methods) {
        MethodResult mr;
        mr.oc = serial ? run_study_serial(m, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed)
                       : run_study(m, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed);
        // The TITE-CRM working model has no cycle dimension, so only DICE predicts at earlier horizons.
        if (m == Method::dice) {
            for (std::size_t k : cfg.prediction_horizons) {
                mr.predictions[k] = predict_mts_study(mr.oc, k, cfg.scenario.target);
            }
        }
        results.push_back(std::move(mr));
    }
    const double secs = elapsed(t0);

    std::cout << cfg.name << ": scenario " << cfg.scenario.name << ", " << cfg.n_sims << " replicates, seed "
              << cfg.seed << ", true MTS = sequence " << cfg.scenario.true_mts(cfg.scenario.cycles()) + 1 << "\n";
    std::cout << table_header(cfg.scenario.sequences()) << "\n";
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& oc = results[i].oc;
        std::cout << table_row(oc, i == 0 ? oc.benchmark_selection : std::vector<double>{}) << "\n";
    }
    for (const auto& mr : results) {
        for (const auto& [k, dist] : mr.predictions) {
            std::printf("%s MTS_%zu (true %zu): none %.3f", to_string(mr.oc.method).c_str(), k,
                        cfg.scenario.true_mts(k) + 1, dist[0]);
            for (std::size_t j = 1; j < dist.size(); ++j) std::printf("  s%zu %.3f", j, dist[j]);
            std::printf("\n");
        }
        if (!quiet) {
            std::printf("%s PCS %.3f (MC s.e. %.3f), stopped %.3f [safety %.3f, interval %.3f]\n",
                        to_string(mr.oc.method).c_str(), mr.oc.pcs, mc_standard_error(mr.oc.pcs, mr.oc.n_sims),
                        mr.oc.proportion_stopped, mr.oc.none_safety, mr.oc.none_not_computable);
        }
    }
    std::printf("elapsed %.1fs on %d thread(s)\n", secs, threads);

    const json out = study_document(cfg, results, run_metadata(secs, threads));
    if (!cfg.out_json.empty()) {
        write_text_file(cfg.out_json, out.dump(2) + "\n");
        std::cout << "wrote " << cfg.out_json.string() << "\n";
    }
    if (!cfg.out_csv.empty()) {
        write_text_file(cfg.out_csv, study_results_csv(cfg, results));
        std::cout << "wrote " << cfg.out_csv.string() << "\n";
    }
    return 0;
}

int cmd_prior_check(const fs::path& config_path, const StudyOverrides& ov) {
    require_file(config_path, "config file");
    const auto cfg = prior_check_config_from_json(read_json_file(config_path), config_path.parent_path(), ov);
    thread_count();
    const auto rows = run_prior_check(cfg);
    std::cout << prior_check_table(rows);
    const bool any_error = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return !r.error.empty(); });
    if (!cfg.out_json.empty()) {
        write_text_file(cfg.out_json, prior_check_json(cfg, rows).dump(2) + "\n");
        std::cout << "wrote " << cfg.out_json.string() << "\n";
    }
    if (!cfg.out_csv.empty()) {
        write_text_file(cfg.out_csv, prior_density_csv(cfg));
        std::cout << "wrote " << cfg.out_csv.string() << "\n";
    }
    return any_error ? kExitRuntime : 0;
}

int cmd_fernandes(const fs::path& config_path, const StudyOverrides& ov) {
    require_file(config_path, "config file");
    const auto cfg = fernandes_config_from_json(read_json_file(config_path), config_path.parent_path(), ov);
    const int threads = thread_count();
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = fernandes_bias_study(cfg.study);
    const double secs = elapsed(t0);
    std::cout << fernandes_table(cfg, res);
    std::printf("elapsed %.1fs on %d thread(s)\n", secs, threads);
    if (!cfg.out_json.empty()) {
        json doc{{"results", fernandes_json(cfg, res)}, {"metadata", run_metadata(secs, threads)}};
        write_text_file(cfg.out_json, doc.dump(2) + "\n");
        std::cout << "wrote " << cfg.out_json.string() << "\n";
    }
    return 0;
}

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

int cmd_serve(const fs::path& config_path, std::optional<int> port, std::optional<fs::path> storage) {
    ServiceConfig cfg;
    if (!config_path.empty()) {
        require_file(config_path, "config file");
        cfg = service_config_from_json(read_json_file(config_path), config_path.parent_path());
    }
    if (port) cfg.port = *port;
    if (storage) cfg.storage = *storage;
    thread_count();

    ServiceOptions opts;
    opts.storage = cfg.storage;
    ConductService service(opts);
    httplib::Server server;
    server.new_task_queue = [n = cfg.threads] { return new httplib::ThreadPool(static_cast<std::size_t>(n)); };
    register_routes(server, service);

    int bound = cfg.port;
    if (cfg.port == 0) {
        bound = server.bind_to_any_port(cfg.host);
        if (bound < 0) throw std::runtime_error("could not bind " + cfg.host);
    } else if (!server.bind_to_port(cfg.host, cfg.port)) {
        throw std::runtime_error("could not bind " + cfg.host + ":" + std::to_string(cfg.port) +
                                 " (port in use or address unavailable)");
    }
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::thread watcher([&] {
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        server.stop();
    });
    std::cout << "listening on " << cfg.host << ":" << bound << " (storage " << cfg.storage.string() << ", "
              << service.trial_ids().size() << " trial(s) recovered)" << std::endl;
    server.listen_after_bind();
    g_stop = true;
    watcher.join();
    std::cout << "shut down" << std::endl;
    return 0;
}

int cmd_conduct_replay(const fs::path& log_path, bool print_events) {
    require_file(log_path, "trial log");
    TrialLog log(log_path);
    const auto events = log.load(false);
    if (events.empty()) throw std::runtime_error("log has no committed events: " + log_path.string());
    const TrialConfig cfg = trial_config_from_created(events.front());
    const TrialState state = replay(cfg, events);
    json out = to_json(state);
    out["committed_events"] = events.size();
    if (print_events) {
        json ev = json::array();
        for (const auto& e : events) ev.push_back(to_json(e));
        out["event_log"] = ev;
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_retrospective(const fs::path& config_path, const fs::path& data_path, const std::optional<fs::path>& out) {
    require_file(config_path, "config file");
    require_file(data_path, "patient data file");
    const TrialConfig cfg = trial_config_from_json(read_json_file(config_path), "");
    thread_count();
    const auto rows = read_patient_csv(data_path);
    const auto records = records_from_rows(rows, cfg.panel);
    const auto res = retrospective_analysis(cfg, records);
    std::cout << retrospective_table(res, cfg);
    if (out) {
        json doc = to_json(res, cfg);
        doc["config"] = to_json(cfg);
        write_text_file(*out, doc.dump(2) + "\n");
        std::cout << "wrote " << out->string() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DICE dose-finding: simulation studies, prior checks and live trial conduct"};
    app.require_subcommand(1);

    StudyOverrides ov;
    std::uint64_t seed = 0;
    std::size_t n_sims = 0, cohort = 0;
    std::string out_dir;
    auto add_overrides = [&](CLI::App* sub, bool with_cohort) {
        sub->add_option("--seed", seed, "override the base seed");
        sub->add_option("--n-sims", n_sims, "override the number of replicates / draws");
        if (with_cohort) sub->add_option("--cohort", cohort, "override the cohort size");
        sub->add_option("--out", out_dir, "write outputs into this directory");
    };

    std::string config;
    bool serial = false, quiet = false;
    auto* sim = app.add_subcommand("simulate", "run a simulation study");
    sim->add_option("config", config, "study config (or a results file to rerun)")->required();
    sim->add_flag("--serial", serial, "use the serial reference loop");
    sim->add_flag("--quiet", quiet, "only the table rows");
    add_overrides(sim, true);

    auto* pc = app.add_subcommand("prior-check", "induced prior ESS and median per sequence");
    pc->add_option("config", config, "prior-check config")->required();
    add_overrides(pc, false);

    auto* fern = app.add_subcommand("fernandes", "bias study of the conditional-hazard model");
    fern->add_option("config", config, "study config")->required();
    add_overrides(fern, false);

    int port = -1;
    std::string storage;
    auto* serve = app.add_subcommand("serve", "run the trial conduct service");
    serve->add_option("config", config, "service config");
    serve->add_option("--port", port, "listen port (0 picks a free port)");
    serve->add_option("--storage", storage, "event log directory");

    std::string log_path;
    bool print_events = false;
    auto* rep = app.add_subcommand("conduct-replay", "rebuild a trial's state from its event log");
    rep->add_option("log", log_path, "trial event log (.jsonl)")->required();
    rep->add_flag("--events", print_events, "include the committed events");

    std::string data_path, out_file;
    auto* retro = app.add_subcommand("retrospective", "fit the model to imported patient data");
    retro->add_option("config", config, "trial config")->required();
    retro->add_option("--data", data_path, "patient-cycle CSV")->required();
    retro->add_option("--out", out_file, "write the analysis document here");

    CLI11_PARSE(app, argc, argv);

    auto overrides = [&](CLI::App* sub) {
        if (sub->count("--seed")) ov.seed = seed;
        if (sub->count("--n-sims")) ov.n_sims = n_sims;
        if (sub->get_option_no_throw("--cohort") && sub->count("--cohort")) ov.cohort = cohort;
        if (sub->count("--out")) ov.out = fs::path(out_dir);
    };

    try {
        if (*sim) {
            overrides(sim);
            return cmd_simulate(config, ov, serial, quiet);
        }
        if (*pc) {
            overrides(pc);
            return cmd_prior_check(config, ov);
        }
        if (*fern) {
            overrides(fern);
            return cmd_fernandes(config, ov);
        }
        if (*serve) {
            return cmd_serve(config, port >= 0 ? std::optional<int>(port) : std::nullopt,
                             storage.empty() ? std::nullopt : std::optional<fs::path>(storage));
        }
        if (*rep) return cmd_conduct_replay(log_path, print_events);
        if (*retro) {
            return cmd_retrospective(config, data_path,
                                     out_file.empty() ? std::nullopt : std::optional<fs::path>(out_file));
        }
    } catch (const MissingFile& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissingFile;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
