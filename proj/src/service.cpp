#include "dice/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <httplib.h>

namespace dice {

namespace fs = std::filesystem;

namespace {

void write_all(int fd, const std::string& s) {
    const char* p = s.data();
    std::size_t left = s.size();
    while (left > 0) {
        const ssize_t n = ::write(fd, p, left);
        if (n < 0) throw std::runtime_error("write failed: " + std::string(std::strerror(errno)));
        p += n;
        left -= static_cast<std::size_t>(n);
    }
}

struct Fd {
    int fd;
    ~Fd() {
        if (fd >= 0) ::close(fd);
    }
};

}  // namespace

TrialLog::TrialLog(fs::path path, FaultHook hook) : path_(std::move(path)), hook_(std::move(hook)) {}

void TrialLog::append_batch(const std::vector<TrialEvent>& events) {
    if (events.empty()) return;
    Fd f{::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644)};
    if (f.fd < 0) throw std::runtime_error("cannot open log '" + path_.string() + "': " + std::strerror(errno));
    std::vector<std::string> lines;
    for (const auto& e : events) lines.push_back(to_json(e).dump());
    lines.push_back(json{{"commit", ++batches_}, {"events", events.size()}, {"last_index", events.back().index}}.dump());
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const Fault fault = hook_ ? hook_(lines_written_++) : Fault::none;
        if (fault == Fault::drop_line) throw SimulatedCrash();
        if (fault == Fault::torn_line) {
            write_all(f.fd, lines[i].substr(0, lines[i].size() / 2));
            throw SimulatedCrash();
        }
        write_all(f.fd, lines[i] + "\n");
    }
    if (::fsync(f.fd) != 0) throw std::runtime_error("fsync failed for '" + path_.string() + "'");
}

std::vector<TrialEvent> TrialLog::load(bool repair) {
    std::vector<TrialEvent> committed, pending;
    std::ifstream in(path_, std::ios::binary);
    if (!in) return committed;
    std::string line;
    std::streamoff good_end = 0, pos = 0;
    batches_ = 0;
    bool clean = true;
    while (std::getline(in, line)) {
        const bool complete_line = !in.eof();
        pos += static_cast<std::streamoff>(line.size()) + (complete_line ? 1 : 0);
        if (!complete_line) {
            clean = false;
            break;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error&) {
            clean = false;
            break;
        }
        if (j.contains("commit")) {
            if (j.at("events").get<std::size_t>() != pending.size()) {
                clean = false;
                break;
            }
            committed.insert(committed.end(), pending.begin(), pending.end());
            pending.clear();
            batches_ = j.at("commit").get<std::size_t>();
            good_end = pos;
        } else {
            pending.push_back(event_from_json(j));
        }
    }
    if (!pending.empty()) clean = false;
    in.close();
    if (!clean && repair) fs::resize_file(path_, static_cast<std::uintmax_t>(good_end));
    return committed;
}

void check_storage(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw ServiceError(500, "storage path '" + dir.string() + "' is not a usable directory" +
                                    (ec ? ": " + ec.message() : ""));
    }
    const fs::path probe = dir / ".write-probe";
    {
        std::ofstream out(probe);
        if (!out || !(out << "ok")) throw ServiceError(500, "storage path '" + dir.string() + "' is not writable");
    }
    fs::remove(probe, ec);
}

TrialConfig trial_config_from_created(const TrialEvent& created) {
    if (created.kind != EventKind::created) throw TrialError("log does not start with a created event");
    return trial_config_from_json(created.payload.at("config"), "config");
}

ConductService::ConductService(ServiceOptions opts) : opts_(std::move(opts)) {
    check_storage(opts_.storage);
    load_all();
}

void ConductService::load_all() {
    std::vector<fs::path> files;
    for (const auto& de : fs::directory_iterator(opts_.storage)) {
        if (de.is_regular_file() && de.path().extension() == ".jsonl") files.push_back(de.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        auto log = std::make_unique<TrialLog>(f, opts_.fault_hook);
        const auto events = log->load(true);
        if (events.empty()) {
            fs::remove(f);
            continue;
        }
        auto e = std::make_unique<Entry>();
        e->cfg = std::make_unique<TrialConfig>(trial_config_from_created(events.front()));
        e->config_fingerprint = fingerprint(events.front().payload.at("config"));
        e->snapshot = std::make_shared<const TrialState>(replay(*e->cfg, events));
        e->log = std::move(log);
        const std::string id = f.stem().string();
        if (id.size() > 1 && id[0] == 'T') {
            try {
                next_id_ = std::max(next_id_, std::stoul(id.substr(1)) + 1);
            } catch (const std::exception&) {
            }
        }
        trials_.emplace(id, std::move(e));
    }
}

ConductService::Entry& ConductService::entry(const std::string& id) const {
    std::lock_guard lk(registry_mu_);
    auto it = trials_.find(id);
    if (it == trials_.end()) throw ServiceError(404, "unknown trial '" + id + "'");
    return *it->second;
}

std::vector<std::string> ConductService::trial_ids() const {
    std::lock_guard lk(registry_mu_);
    std::vector<std::string> ids;
    for (const auto& [id, e] : trials_) ids.push_back(id);
    return ids;
}

TrialState ConductService::state(const std::string& id) const { return *entry(id).read(); }

json ConductService::health() const {
    std::lock_guard lk(registry_mu_);
    return {{"schema_version", kSchemaVersion}, {"status", "ok"}, {"trials", trials_.size()}};
}

json ConductService::list_trials() const {
    json out = json::array();
    for (const auto& id : trial_ids()) {
        const auto s = entry(id).read();
        out.push_back({{"id", id}, {"status", to_string(s->status)}, {"patients", s->patients.size()}});
    }
    return {{"schema_version", kSchemaVersion}, {"trials", out}};
}

namespace {

bool recommendation_open(const TrialState& s) { return s.status == TrialStatus::accruing; }

json summary_at(const PosteriorSummary& sum, std::size_t k) {
    return {{"estimate", sum.estimate[k - 1]}, {"lower", sum.lower[k - 1]}, {"upper", sum.upper[k - 1]}};
}

}  // namespace

json ConductService::view(const Entry& e, const TrialState& s) const {
    json j = to_json(s);
    j["schema_version"] = kSchemaVersion;
    j["config_fingerprint"] = hex64(e.config_fingerprint);
    j["recommendation"] = recommendation_open(s) ? json(s.current_recommendation + 1) : json(nullptr);
    if (s.summary) {
        j["estimates"] = s.summary->estimate.back();
        j["exceedance"] = s.summary->exceedance;
    } else {
        j["estimates"] = nullptr;
        j["exceedance"] = nullptr;
    }
    return j;
}

template <class F>
json ConductService::mutate(const std::string& id, F&& f) {
    Entry& e = entry(id);
    std::lock_guard lk(e.write_mu);
    const auto base = e.read();
    Transaction tx(*base, *e.cfg, opts_.clock);
    json extra = f(tx);
    if (!tx.events().empty()) {
        try {
            e.log->append_batch(tx.events());
        } catch (const SimulatedCrash&) {
            throw;
        } catch (const std::exception& ex) {
            e.log->load(true);
            throw ServiceError(500, std::string("could not persist events: ") + ex.what());
        }
        std::lock_guard sl(e.snap_mu);
        e.snapshot = std::make_shared<const TrialState>(std::move(tx).take());
    }
    json out = view(e, *e.read());
    out["id"] = id;
    for (auto it = extra.begin(); it != extra.end(); ++it) out[it.key()] = it.value();
    return out;
}

json ConductService::create_trial(const json& body) {
    json doc = body.contains("config") && body.size() == 1 ? body.at("config") : body;
    std::unique_ptr<TrialConfig> cfg;
    try {
        cfg = std::make_unique<TrialConfig>(trial_config_from_json(doc, ""));
    } catch (const ConfigError& ex) {
        throw ServiceError(422, ex.what());
    }
    const json resolved = to_json(*cfg);

    std::unique_lock lk(registry_mu_);
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "T%04zu", next_id_++);
    const std::string id = idbuf;
    auto e = std::make_unique<Entry>();
    e->cfg = std::move(cfg);
    e->config_fingerprint = fingerprint(resolved);
    e->log = std::make_unique<TrialLog>(opts_.storage / (id + ".jsonl"), opts_.fault_hook);
    Transaction tx(TrialState{}, *e->cfg, opts_.clock);
    dice::create_trial(tx, resolved);
    e->log->append_batch(tx.events());
    e->snapshot = std::make_shared<const TrialState>(std::move(tx).take());
    Entry& ref = *e;
    trials_.emplace(id, std::move(e));
    lk.unlock();
    json out = view(ref, *ref.read());
    out["id"] = id;
    return out;
}

json ConductService::get_trial(const std::string& id) const {
    const Entry& e = entry(id);
    json out = view(e, *e.read());
    out["id"] = id;
    return out;
}

namespace {

template <class T>
T body_field(FieldReader& r, const std::string& key) {
    try {
        return r.required<T>(key);
    } catch (const ConfigError& ex) {
        throw ServiceError(400, ex.what());
    }
}

template <class T>
T body_optional(FieldReader& r, const std::string& key, T fallback) {
    try {
        return r.optional<T>(key, fallback);
    } catch (const ConfigError& ex) {
        throw ServiceError(400, ex.what());
    }
}

void body_finish(const FieldReader& r) {
    try {
        r.finish();
    } catch (const ConfigError& ex) {
        throw ServiceError(400, ex.what());
    }
}

FieldReader body_reader(const json& j, const std::string& path) {
    try {
        FieldReader r(j, path);
        check_schema(r);
        return r;
    } catch (const ConfigError& ex) {
        throw ServiceError(400, ex.what());
    }
}

CycleOutcome parse_outcome(const json& j, const std::string& path) {
    FieldReader r = body_reader(j, path);
    CycleOutcome o;
    o.patient_id = body_field<std::string>(r, "patient");
    o.cycle = body_field<std::size_t>(r, "cycle");
    o.dlt = body_field<bool>(r, "dlt");
    if (r.has("dose") && !j.at("dose").is_null()) o.dose = body_field<double>(r, "dose");
    else if (r.has("dose")) r.raw("dose");
    o.idempotency_key = body_optional<std::string>(r, "idempotency_key", "");
    body_finish(r);
    return o;
}

template <class F>
auto trial_errors(F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const TrialError& ex) {
        throw ServiceError(409, ex.what());
    }
}

}  // namespace

json ConductService::enroll(const std::string& id, const json& body) {
    FieldReader r = body_reader(body, "");
    const auto patient = body_field<std::string>(r, "patient");
    std::optional<std::size_t> seq;
    if (r.has("sequence")) {
        const long s = body_field<long>(r, "sequence");
        if (s < 1) throw ServiceError(400, "sequence: must be >= 1");
        seq = static_cast<std::size_t>(s - 1);
    }
    const auto key = body_optional<std::string>(r, "idempotency_key", "");
    body_finish(r);
    return mutate(id, [&](Transaction& tx) {
        if (!key.empty()) {
            if (const TrialPatient* p = tx.state().find(patient); p && (!seq || *seq == p->sequence)) {
                return json{{"applied", false}};
            }
        }
        trial_errors([&] {
            enroll_patient(tx, patient, seq);
            return 0;
        });
        return json{{"applied", true}};
    });
}

json ConductService::record_outcomes(const std::string& id, const json& body) {
    std::vector<CycleOutcome> batch;
    if (body.is_object() && body.contains("outcomes")) {
        FieldReader r = body_reader(body, "");
        const json& arr = r.raw("outcomes");
        body_finish(r);
        if (!arr.is_array() || arr.empty()) throw ServiceError(400, "outcomes: expected a non-empty list");
        for (std::size_t i = 0; i < arr.size(); ++i) batch.push_back(parse_outcome(arr[i], "outcomes[" + std::to_string(i) + "]"));
    } else {
        batch.push_back(parse_outcome(body, ""));
    }
    return mutate(id, [&](Transaction& tx) {
        bool changed = false;
        trial_errors([&] {
            if (is_terminal(tx.state().status)) {
                throw TrialError("trial is " + to_string(tx.state().status) + "; no further outcomes accepted");
            }
            for (const auto& o : batch) changed = record_outcome(tx, o) || changed;
            if (changed) reestimate(tx, opts_.stop_policy);
            return 0;
        });
        return json{{"applied", changed}};
    });
}

json ConductService::recommendation(const std::string& id) const {
    const Entry& e = entry(id);
    const auto s = e.read();
    json out{{"schema_version", kSchemaVersion},
             {"id", id},
             {"status", to_string(s->status)},
             {"config_fingerprint", hex64(e.config_fingerprint)}};
    const std::size_t cap = s->highest_tried ? *s->highest_tried + 2 : 1;
    out["max_allowed_sequence"] = std::min(cap, e.cfg->panel.size());
    if (s->summary) {
        out["estimates"] = s->summary->estimate.back();
        out["exceedance"] = s->summary->exceedance;
        out["posterior_seed"] = s->summary->seed;
        out["convergence_warning"] = s->summary->convergence_warning;
    } else {
        out["estimates"] = nullptr;
        out["exceedance"] = nullptr;
    }
    if (recommendation_open(*s)) {
        out["sequence"] = s->current_recommendation + 1;
        out["withheld"] = false;
    } else {
        out["sequence"] = nullptr;
        out["withheld"] = true;
        out["reason"] = s->status == TrialStatus::completed
                            ? std::string("trial completed")
                            : "trial " + to_string(s->status) + (s->status_reason.empty() ? "" : ": " + s->status_reason);
    }
    out["final_mts"] = s->final_mts ? json(*s->final_mts + 1) : json(nullptr);
    return out;
}

json ConductService::predictions(const std::string& id, std::size_t k) const {
    const Entry& e = entry(id);
    const std::size_t K = e.cfg->panel.cycles();
    if (k < 1 || k > K) {
        throw ServiceError(422, "k: horizon must lie in 1.." + std::to_string(K) + " (no extrapolation beyond K)");
    }
    const auto s = e.read();
    json out{{"schema_version", kSchemaVersion}, {"id", id}, {"k", k}, {"config_fingerprint", hex64(e.config_fingerprint)}};
    if (!s->summary) {
        out["estimates"] = nullptr;
        out["mts"] = nullptr;
        out["note"] = "no outcome data yet";
        return out;
    }
    const json at = summary_at(*s->summary, k);
    out["estimates"] = at["estimate"];
    out["lower"] = at["lower"];
    out["upper"] = at["upper"];
    out["mts"] = *select_mts(s->summary->estimate[k - 1], e.cfg->target, false) + 1;
    return out;
}

namespace {

std::string note_from(const json& body) {
    FieldReader r = body_reader(body, "");
    const auto note = body_optional<std::string>(r, "note", "");
    body_finish(r);
    return note;
}

}  // namespace

json ConductService::resume(const std::string& id, const json& body) {
    const std::string note = note_from(body);
    return mutate(id, [&](Transaction& tx) {
        trial_errors([&] {
            resume_trial(tx, note);
            return 0;
        });
        return json::object();
    });
}

json ConductService::confirm_stop(const std::string& id, const json& body) {
    const std::string note = note_from(body);
    return mutate(id, [&](Transaction& tx) {
        trial_errors([&] {
            dice::confirm_stop(tx, note);
            return 0;
        });
        return json::object();
    });
}

namespace {

void send(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(2), "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& f, int ok_status = 200) {
    try {
        send(res, ok_status, f());
    } catch (const ServiceError& e) {
        send(res, e.status(), json{{"error", e.what()}, {"status", e.status()}});
    } catch (const json::exception& e) {
        send(res, 400, json{{"error", std::string("malformed request: ") + e.what()}, {"status", 400}});
    } catch (const std::exception& e) {
        send(res, 500, json{{"error", e.what()}, {"status", 500}});
    }
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        return json::parse(req.body);
    } catch (const json::parse_error& e) {
        throw ServiceError(400, std::string("body is not valid JSON: ") + e.what());
    }
}

}  // namespace

void register_routes(httplib::Server& server, ConductService& svc) {
    server.Get("/health", [&](const httplib::Request&, httplib::Response& res) {
        guarded(res, [&] { return svc.health(); });
    });
    server.Get("/trials", [&](const httplib::Request&, httplib::Response& res) {
        guarded(res, [&] { return svc.list_trials(); });
    });
    server.Post("/trials", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return svc.create_trial(parse_body(req)); }, 201);
    });
    server.Get(R"(/trials/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return svc.get_trial(req.matches[1]); });
    });
    server.Post(R"(/trials/([^/]+)/patients)", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return svc.enroll(req.matches[1], parse_body(req)); });
    });
    server.Post(R"(/trials/([^/]+)/outcomes)", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return svc.record_outcomes(req.matches[1], parse_body(req)); });
    });
    server.Get(R"(/trials/([^/]+)/recommendation)", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return svc.recommendation(req.matches[1]); });
    });
    server.Get(R"(/trials/([^/]+)/predictions)", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            if (!req.has_param("k")) throw ServiceError(400, "k: query parameter required");
            const std::string ks = req.get_param_value("k");
            std::size_t pos = 0;
            long k = 0;
            try {
                k = std::stol(ks, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            if (pos == 0 || pos != ks.size()) throw ServiceError(400, "k: expected an integer, got '" + ks + "'");
            return svc.predictions(req.matches[1], k < 1 ? 0 : static_cast<std::size_t>(k));
        });
    });
    server.Post(R"(/trials/([^/]+)/resume)", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return svc.resume(req.matches[1], parse_body(req)); });
    });
    server.Post(R"(/trials/([^/]+)/confirm-stop)", [&](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { return svc.confirm_stop(req.matches[1], parse_body(req)); });
    });
}

}  // namespace dice
