#include "dice/results.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace dice {

double mc_standard_error(double p, std::size_t n) {
    if (n == 0) return 0.0;
    return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

namespace {

json oc_json(const MethodResult& mr) {
    const auto& oc = mr.oc;
    json preds = json::object();
    for (const auto& [k, dist] : mr.predictions) {
        const std::vector<double> sel(dist.begin() + 1, dist.end());
        preds[std::to_string(k)] = {{"none", dist.front()}, {"selection", sel}};
    }
    std::vector<std::uint64_t> seeds;
    seeds.reserve(oc.n_sims);
    for (std::size_t r = 0; r < oc.n_sims; ++r) seeds.push_back(replicate_seed(oc.base_seed, r));
    return {{"method", to_string(oc.method)},
            {"scenario", oc.scenario},
            {"cohort_size", oc.cohort_size},
            {"n_sims", oc.n_sims},
            {"true_mts", oc.true_mts + 1},
            {"selection", oc.selection},
            {"none", oc.none},
            {"none_breakdown", {{"safety", oc.none_safety}, {"interval_not_computable", oc.none_not_computable}}},
            {"pcs", oc.pcs},
            {"pcs_mcse", mc_standard_error(oc.pcs, oc.n_sims)},
            {"allocation", oc.allocation},
            {"dlt", {{"median", oc.dlt_median}, {"q1", oc.dlt_q1}, {"q3", oc.dlt_q3}}},
            {"proportion_stopped", oc.proportion_stopped},
            {"benchmark", {{"selection", oc.benchmark_selection}, {"pcs", oc.benchmark_pcs}}},
            {"predictions", preds},
            {"seeds", {{"base", oc.base_seed}, {"derivation", "derive_seed(base, r); lattice derive_seed(rep, 0); trial derive_seed(rep, 1)"}, {"replicates", seeds}}}};
}

std::string fmt(double v, int prec = 3) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

}  // namespace

json study_results_json(const StudyConfig& cfg, const std::vector<MethodResult>& results) {
    const json resolved = cfg.resolved();
    json methods = json::array();
    for (const auto& r : results) methods.push_back(oc_json(r));
    return {{"schema_version", kSchemaVersion},
            {"config", resolved},
            {"config_fingerprint", hex64(fingerprint(resolved))},
            {"methods", methods}};
}

json study_document(const StudyConfig& cfg, const std::vector<MethodResult>& results, const json& metadata) {
    return {{"results", study_results_json(cfg, results)}, {"metadata", metadata}};
}

std::string study_results_csv(const StudyConfig& cfg, const std::vector<MethodResult>& results) {
    std::ostringstream out;
    out << "study,method,cohort,metric,sequence,value\n";
    auto row = [&](const OperatingCharacteristics& oc, const std::string& metric, const std::string& seq, double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << cfg.name << ',' << to_string(oc.method) << ',' << oc.cohort_size << ',' << metric << ',' << seq << ','
            << buf << '\n';
    };
    for (const auto& mr : results) {
        const auto& oc = mr.oc;
        for (std::size_t j = 0; j < oc.selection.size(); ++j) {
            const auto s = std::to_string(j + 1);
            row(oc, "selection", s, oc.selection[j]);
            row(oc, "allocation", s, oc.allocation[j]);
            row(oc, "benchmark_selection", s, oc.benchmark_selection[j]);
        }
        row(oc, "selection", "none", oc.none);
        row(oc, "pcs", "", oc.pcs);
        row(oc, "benchmark_pcs", "", oc.benchmark_pcs);
        row(oc, "dlt_median", "", oc.dlt_median);
        row(oc, "dlt_q1", "", oc.dlt_q1);
        row(oc, "dlt_q3", "", oc.dlt_q3);
        row(oc, "proportion_stopped", "", oc.proportion_stopped);
        for (const auto& [k, dist] : mr.predictions) {
            const std::string metric = "mts_" + std::to_string(k);
            row(oc, metric, "none", dist.front());
            for (std::size_t j = 1; j < dist.size(); ++j) row(oc, metric, std::to_string(j), dist[j]);
        }
    }
    return out.str();
}

std::string table_header(std::size_t sequences) {
    std::ostringstream out;
    out << "method    c  ";
    for (std::size_t j = 0; j < sequences; ++j) out << "  s" << j + 1 << "   ";
    out << " none  | allocation";
    out << std::string(sequences * 7 - 10 > 0 ? sequences * 7 - 10 : 1, ' ');
    out << "| DLT med (Q1, Q3)";
    return out.str();
}

std::string table_row(const OperatingCharacteristics& oc, const std::vector<double>& reference_selection) {
    std::ostringstream out;
    std::string name = to_string(oc.method);
    name.resize(9, ' ');
    out << name << ' ' << oc.cohort_size << "  ";
    for (std::size_t j = 0; j < oc.selection.size(); ++j) {
        out << (j == oc.true_mts ? '*' : ' ') << fmt(oc.selection[j]) << ' ';
    }
    out << ' ' << fmt(oc.none) << " |";
    for (double a : oc.allocation) out << ' ' << fmt(a) << "  ";
    out << "| " << fmt(oc.dlt_median, 0) << " (" << fmt(oc.dlt_q1, 0) << ", " << fmt(oc.dlt_q3, 0) << ")";
    if (!reference_selection.empty()) {
        out << "\nbenchmark    ";
        for (std::size_t j = 0; j < reference_selection.size(); ++j) {
            out << (j == oc.true_mts ? '*' : ' ') << fmt(reference_selection[j]) << ' ';
        }
    }
    return out.str();
}

std::vector<PriorCheckRow> run_prior_check(const PriorCheckConfig& cfg) {
    std::vector<PriorCheckRow> rows;
    const auto& t = cfg.trial;
    for (std::size_t j = 0; j < t.panel.size(); ++j) {
        PriorCheckRow row;
        row.sequence = j;
        try {
            row.fit = induced_prior_ess(t.prior, t.panel, t.cycle_weight, j, cfg.n_draws, cfg.seed);
        } catch (const InferenceError& e) {
            row.error = e.what();
        }
        rows.push_back(row);
    }
    return rows;
}

json prior_check_json(const PriorCheckConfig& cfg, const std::vector<PriorCheckRow>& rows) {
    json seqs = json::array();
    for (const auto& r : rows) {
        json o{{"sequence", r.sequence + 1}};
        if (!r.error.empty()) {
            o["error"] = r.error;
        } else {
            o.update({{"a", r.fit.a},
                      {"b", r.fit.b},
                      {"ess", r.fit.ess},
                      {"ess_capped", r.fit.capped},
                      {"mean", r.fit.mean},
                      {"variance", r.fit.variance},
                      {"median", r.fit.median}});
        }
        seqs.push_back(o);
    }
    const json resolved{{"trial", to_json(cfg.trial)}, {"n_draws", cfg.n_draws}, {"seed", cfg.seed}};
    return {{"schema_version", kSchemaVersion},
            {"config", resolved},
            {"config_fingerprint", hex64(fingerprint(resolved))},
            {"sequences", seqs}};
}

std::string prior_check_table(const std::vector<PriorCheckRow>& rows) {
    std::ostringstream out;
    out << "sequence      ESS   median     mean        a        b\n";
    for (const auto& r : rows) {
        char buf[160];
        if (!r.error.empty()) {
            std::snprintf(buf, sizeof buf, "%8zu  error: %s\n", r.sequence + 1, r.error.c_str());
        } else {
            std::snprintf(buf, sizeof buf, "%8zu %8.3f%s %8.4f %8.4f %8.4f %8.4f\n", r.sequence + 1, r.fit.ess,
                          r.fit.capped ? "*" : " ", r.fit.median, r.fit.mean, r.fit.a, r.fit.b);
        }
        out << buf;
    }
    return out.str();
}

std::string prior_density_csv(const PriorCheckConfig& cfg) {
    const auto& t = cfg.trial;
    const PosteriorDraws d = draw_prior(t.prior, cfg.density_samples, cfg.seed);
    std::ostringstream out;
    out << "sequence,draw,p\n";
    for (std::size_t j = 0; j < t.panel.size(); ++j) {
        const auto p = sequence_pT_sample(d, t.panel, t.cycle_weight, j, t.panel.cycles());
        for (std::size_t i = 0; i < p.size(); ++i) {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.10g", p[i]);
            out << j + 1 << ',' << i << ',' << buf << '\n';
        }
    }
    return out.str();
}

namespace {

json param_json(const ParameterSummary& s) {
    return {{"truth", s.truth},
            {"estimate", {{"median", s.estimate_median}, {"q1", s.estimate_q1}, {"q3", s.estimate_q3}}},
            {"bias", {{"median", s.bias_median}, {"q1", s.bias_q1}, {"q3", s.bias_q3}}}};
}

}  // namespace

json fernandes_json(const FernandesConfig& cfg, const FernandesStudyResult& r) {
    const auto& s = cfg.study;
    const json resolved{
        {"name", cfg.label},
        {"truth", {{"alpha", s.truth.alpha}, {"beta", s.truth.beta}, {"rho", s.truth.rho}}},
        {"doses", s.doses},
        {"patients_per_dose", s.patients_per_dose},
        {"cycles", s.cycles},
        {"n_sims", s.n_sims},
        {"seed", s.seed},
        {"prior",
         {{"alpha", {{"logmean", s.prior.alpha_logmean}, {"precision", s.prior.alpha_precision}}},
          {"beta", {{"logmean", s.prior.beta_logmean}, {"precision", s.prior.beta_precision}}},
          {"rho", {{"a", s.prior.rho_a}, {"b", s.prior.rho_b}}}}},
        {"sampler", to_json(s.sampler)}};
    return {{"schema_version", kSchemaVersion},
            {"config", resolved},
            {"config_fingerprint", hex64(fingerprint(resolved))},
            {"replicates_used", r.replicates_used},
            {"replicates_excluded", r.replicates_excluded},
            {"alpha", param_json(r.alpha)},
            {"beta", param_json(r.beta)},
            {"rho", param_json(r.rho)}};
}

std::string fernandes_table(const FernandesConfig& cfg, const FernandesStudyResult& r) {
    std::ostringstream out;
    out << cfg.label << "  (" << r.replicates_used << " replicates, " << r.replicates_excluded << " excluded)\n";
    out << "param   truth   estimate median (Q1, Q3)     bias median (Q1, Q3)\n";
    auto line = [&](const char* name, const ParameterSummary& s) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-6s %6.3f   %6.3f (%6.3f, %6.3f)     %6.3f (%6.3f, %6.3f)\n", name, s.truth,
                      s.estimate_median, s.estimate_q1, s.estimate_q3, s.bias_median, s.bias_q1, s.bias_q3);
        out << buf;
    };
    line("alpha", r.alpha);
    line("beta", r.beta);
    line("rho", r.rho);
    return out.str();
}

}  // namespace dice
