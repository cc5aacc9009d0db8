#pragma once

#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dice/design.hpp"

namespace dice {

// One row per patient-cycle, sequence and cycle 1-based.
struct PatientCycleRow {
    std::string patient;
    std::size_t sequence = 0;
    std::size_t cycle = 0;
    double dose = 0.0;
    bool dlt = false;
};

// Header: patient_id,sequence,cycle,dose,dlt (any column order).
std::vector<PatientCycleRow> read_patient_csv(std::istream& in);
std::vector<PatientCycleRow> read_patient_csv(const std::filesystem::path& path);

// Groups rows into histories; cycles must be consecutive from 1 and a DLT ends follow-up.
std::vector<PatientRecord> records_from_rows(const std::vector<PatientCycleRow>& rows, const DosePanel& panel);

struct RetrospectiveResult {
    PosteriorSummary summary;
    std::vector<std::optional<std::size_t>> mts;  // MTS_k for k = 1..K
    bool stop = false;
    std::size_t patients = 0;
    std::size_t dlts = 0;
};

RetrospectiveResult retrospective_analysis(const TrialConfig& cfg, const std::vector<PatientRecord>& records);

nlohmann::json to_json(const RetrospectiveResult& r, const TrialConfig& cfg);
std::string retrospective_table(const RetrospectiveResult& r, const TrialConfig& cfg);

}  // namespace dice
