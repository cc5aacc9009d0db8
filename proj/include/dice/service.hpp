#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dice/config.hpp"
#include "dice/design.hpp"

namespace httplib {
class Server;
}

namespace dice {

// Carries the HTTP status the failure maps to.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, const std::string& msg) : std::runtime_error(msg), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

/*
 * Append-only per-trial log. Each line is one JSON object: either an event
 * or a commit marker closing a batch. Events after the last commit marker
 * (a torn or interrupted batch) are dropped on load.
 */
class TrialLog {
public:
    enum class Fault { none, torn_line, drop_line };
    // Called before every line write with this log's running line count; returning a
    // fault simulates the process dying at that point.
    using FaultHook = std::function<Fault(std::size_t line)>;

    TrialLog(std::filesystem::path path, FaultHook hook = {});

    const std::filesystem::path& path() const { return path_; }
    // Writes the batch and its commit marker, fsyncing once at the end.
    void append_batch(const std::vector<TrialEvent>& events);
    // Committed events only; a trailing partial batch is truncated away.
    std::vector<TrialEvent> load(bool repair = true);

private:
    std::filesystem::path path_;
    FaultHook hook_;
    std::size_t batches_ = 0;
    std::size_t lines_written_ = 0;
};

// Thrown by the fault hook path; the service treats it like a crash.
struct SimulatedCrash : std::runtime_error {
    SimulatedCrash() : std::runtime_error("simulated crash") {}
};

struct ServiceOptions {
    std::filesystem::path storage;
    Clock clock = system_clock();
    StopPolicy stop_policy = StopPolicy::suspend;
    TrialLog::FaultHook fault_hook;
};

class ConductService {
public:
    explicit ConductService(ServiceOptions opts);

    nlohmann::json health() const;
    nlohmann::json list_trials() const;
    nlohmann::json create_trial(const nlohmann::json& body);
    nlohmann::json get_trial(const std::string& id) const;
    nlohmann::json enroll(const std::string& id, const nlohmann::json& body);
    nlohmann::json record_outcomes(const std::string& id, const nlohmann::json& body);
    nlohmann::json recommendation(const std::string& id) const;
    nlohmann::json predictions(const std::string& id, std::size_t k) const;
    nlohmann::json resume(const std::string& id, const nlohmann::json& body);
    nlohmann::json confirm_stop(const std::string& id, const nlohmann::json& body);

    // Snapshot of a trial's state; throws ServiceError(404) when unknown.
    TrialState state(const std::string& id) const;
    std::vector<std::string> trial_ids() const;

private:
    struct Entry {
        std::mutex write_mu;
        mutable std::mutex snap_mu;
        std::unique_ptr<TrialConfig> cfg;
        std::shared_ptr<const TrialState> snapshot;
        std::unique_ptr<TrialLog> log;
        std::uint64_t config_fingerprint = 0;
        std::size_t enroll_seq = 0;

        std::shared_ptr<const TrialState> read() const {
            std::lock_guard lk(snap_mu);
            return snapshot;
        }
    };

    Entry& entry(const std::string& id) const;
    void load_all();
    nlohmann::json view(const Entry& e, const TrialState& s) const;
    // Runs f on a transaction, persists the new events and publishes the snapshot.
    template <class F>
    nlohmann::json mutate(const std::string& id, F&& f);

    ServiceOptions opts_;
    mutable std::mutex registry_mu_;
    std::map<std::string, std::unique_ptr<Entry>> trials_;
    std::size_t next_id_ = 1;
};

TrialConfig trial_config_from_created(const TrialEvent& created);

// Registers every endpoint on the server.
void register_routes(httplib::Server& server, ConductService& service);

// Validates that the storage directory exists (creating it) and is writable.
void check_storage(const std::filesystem::path& dir);

}  // namespace dice
