#include "dice/retrospective.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace dice {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    for (auto& s : out) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }
    return out;
}

bool parse_flag(const std::string& s, std::size_t line) {
    if (s == "1" || s == "true" || s == "TRUE" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "FALSE" || s == "no") return false;
    throw TrialError("line " + std::to_string(line) + ": dlt must be 0/1, got '" + s + "'");
}

template <class T>
T parse_number(const std::string& s, std::size_t line, const char* what) {
    std::istringstream in(s);
    T v{};
    in >> v;
    if (in.fail() || !in.eof()) {
        throw TrialError("line " + std::to_string(line) + ": " + what + " is not a number: '" + s + "'");
    }
    return v;
}

}  // namespace

std::vector<PatientCycleRow> read_patient_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw TrialError("patient file is empty");
    const auto header = split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* c : {"patient_id", "sequence", "cycle", "dose", "dlt"}) {
        if (!col.count(c)) throw TrialError(std::string("patient file header lacks column '") + c + "'");
    }
    std::vector<PatientCycleRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = split_csv_line(line);
        if (f.size() != header.size()) {
            throw TrialError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                             " fields, found " + std::to_string(f.size()));
        }
        PatientCycleRow r;
        r.patient = f[col["patient_id"]];
        if (r.patient.empty()) throw TrialError("line " + std::to_string(lineno) + ": empty patient id");
        r.sequence = parse_number<std::size_t>(f[col["sequence"]], lineno, "sequence");
        r.cycle = parse_number<std::size_t>(f[col["cycle"]], lineno, "cycle");
        r.dose = parse_number<double>(f[col["dose"]], lineno, "dose");
        r.dlt = parse_flag(f[col["dlt"]], lineno);
        rows.push_back(r);
    }
    return rows;
}

std::vector<PatientCycleRow> read_patient_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw TrialError("cannot open patient file '" + path.string() + "'");
    return read_patient_csv(in);
}

std::vector<PatientRecord> records_from_rows(const std::vector<PatientCycleRow>& rows, const DosePanel& panel) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const PatientCycleRow*>> by_patient;
    for (const auto& r : rows) {
        if (!by_patient.count(r.patient)) order.push_back(r.patient);
        by_patient[r.patient].push_back(&r);
    }
    std::vector<PatientRecord> out;
    for (const auto& id : order) {
        auto cycles = by_patient[id];
        std::sort(cycles.begin(), cycles.end(), [](auto* a, auto* b) { return a->cycle < b->cycle; });
        PatientRecord rec;
        rec.id = id;
        const std::size_t seq = cycles.front()->sequence;
        if (seq < 1 || seq > panel.size()) {
            throw TrialError("patient '" + id + "': sequence " + std::to_string(seq) + " not in panel");
        }
        rec.assigned_sequence = seq - 1;
        for (std::size_t i = 0; i < cycles.size(); ++i) {
            const auto& c = *cycles[i];
            if (c.sequence != seq) throw TrialError("patient '" + id + "': sequence changes between cycles");
            if (c.cycle != i + 1) {
                throw TrialError("patient '" + id + "': cycles must run 1, 2, ... without gaps (found " +
                                 std::to_string(c.cycle) + ")");
            }
            if (rec.dlt) throw TrialError("patient '" + id + "': cycles recorded after a DLT");
            rec.administered_doses.push_back(c.dose);
            rec.dlt = c.dlt;
        }
        rec.validate(panel.cycles());
        out.push_back(std::move(rec));
    }
    return out;
}

RetrospectiveResult retrospective_analysis(const TrialConfig& cfg, const std::vector<PatientRecord>& records) {
    cfg.validate();
    if (records.empty()) throw TrialError("no patient data");
    const LikelihoodTerms ll(records, cfg.panel, cfg.cycle_weight);
    const PosteriorDraws draws = sample_posterior(ll, cfg.prior, cfg.sampler, cfg.seed);
    RetrospectiveResult r;
    r.summary = summarize_posterior(draws, cfg, records.size());
    r.patients = records.size();
    for (const auto& p : records) r.dlts += p.dlt ? 1 : 0;
    r.stop = check_stopping(records.size(), r.summary.exceedance, cfg) == StopDecision::stop;
    for (std::size_t k = 1; k <= cfg.panel.cycles(); ++k) {
        r.mts.push_back(select_mts(r.summary.estimate[k - 1], cfg.target, r.stop));
    }
    return r;
}

nlohmann::json to_json(const RetrospectiveResult& r, const TrialConfig& cfg) {
    nlohmann::json cycles = nlohmann::json::array();
    for (std::size_t k = 1; k <= cfg.panel.cycles(); ++k) {
        nlohmann::json seqs = nlohmann::json::array();
        for (std::size_t j = 0; j < cfg.panel.size(); ++j) {
            seqs.push_back({{"sequence", j + 1},
                            {"estimate", r.summary.estimate[k - 1][j]},
                            {"lower", r.summary.lower[k - 1][j]},
                            {"upper", r.summary.upper[k - 1][j]}});
        }
        cycles.push_back({{"k", k},
                          {"sequences", seqs},
                          {"mts", r.mts[k - 1] ? nlohmann::json(*r.mts[k - 1] + 1) : nlohmann::json(nullptr)}});
    }
    return {{"patients", r.patients},
            {"dlts", r.dlts},
            {"exceedance", r.summary.exceedance},
            {"tau", cfg.tau},
            {"stop", r.stop},
            {"posterior", to_json(r.summary)},
            {"cycles", cycles}};
}

std::string retrospective_table(const RetrospectiveResult& r, const TrialConfig& cfg) {
    std::ostringstream out;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%zu patients, %zu DLTs; P(p_T(seq 1) > %.2f) = %.3f -> %s\n", r.patients, r.dlts,
                  cfg.target, r.summary.exceedance, r.stop ? "STOP" : "continue");
    out << buf;
    for (std::size_t k = 1; k <= cfg.panel.cycles(); ++k) {
        std::snprintf(buf, sizeof buf, "k=%zu", k);
        out << buf;
        for (std::size_t j = 0; j < cfg.panel.size(); ++j) {
            std::snprintf(buf, sizeof buf, "  s%zu %.3f [%.3f, %.3f]", j + 1, r.summary.estimate[k - 1][j],
                          r.summary.lower[k - 1][j], r.summary.upper[k - 1][j]);
            out << buf;
        }
        out << "  MTS_" << k << " = " << (r.mts[k - 1] ? std::to_string(*r.mts[k - 1] + 1) : std::string("none"))
            << '\n';
    }
    return out.str();
}

}  // namespace dice
