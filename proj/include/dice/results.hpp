#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dice/config.hpp"
#include "dice/sim.hpp"

namespace dice {

struct MethodResult {
    OperatingCharacteristics oc;
    std::map<std::size_t, std::vector<double>> predictions;  // horizon k -> distribution (index 0 = none)
};

// Binomial Monte Carlo standard error of a proportion.
double mc_standard_error(double p, std::size_t n);

// Deterministic part of a study's results; contains no timestamps.
json study_results_json(const StudyConfig& cfg, const std::vector<MethodResult>& results);

// Full document: {"results": ..., "metadata": {...}}.
json study_document(const StudyConfig& cfg, const std::vector<MethodResult>& results, const json& metadata);

// Long-format table: study,method,cohort,metric,sequence,value.
std::string study_results_csv(const StudyConfig& cfg, const std::vector<MethodResult>& results);

// One console line per method in the layout of the operating-characteristics table.
std::string table_row(const OperatingCharacteristics& oc, const std::vector<double>& reference_selection);
std::string table_header(std::size_t sequences);

struct PriorCheckRow {
    std::size_t sequence = 0;  // 0-based
    EssFit fit;
    std::string error;
};

std::vector<PriorCheckRow> run_prior_check(const PriorCheckConfig& cfg);
json prior_check_json(const PriorCheckConfig& cfg, const std::vector<PriorCheckRow>& rows);
std::string prior_check_table(const std::vector<PriorCheckRow>& rows);
// Per-sequence draws of p_T for plotting: sequence,draw,p.
std::string prior_density_csv(const PriorCheckConfig& cfg);

json fernandes_json(const FernandesConfig& cfg, const FernandesStudyResult& r);
std::string fernandes_table(const FernandesConfig& cfg, const FernandesStudyResult& r);

}  // namespace dice
