#include "dice/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace dice {

namespace fs = std::filesystem;

FieldReader::FieldReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError((path_.empty() ? std::string("document") : path_) + ": expected an object");
}

const json& FieldReader::raw(const std::string& key) {
    if (!obj_.contains(key)) throw ConfigError(field(key) + ": required field missing");
    used_.insert(key);
    return obj_.at(key);
}

FieldReader FieldReader::child(const std::string& key) { return FieldReader(raw(key), field(key)); }

void FieldReader::finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
        if (!used_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown field");
    }
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("'" + path.string() + "': " + e.what());
    }
}

void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot write '" + path.string() + "'");
        out << text;
        if (!out) throw ConfigError("write failed for '" + path.string() + "'");
    }
    fs::rename(tmp, path);
}

void check_schema(FieldReader& r) {
    if (!r.has("schema_version")) return;
    const int v = r.required<int>("schema_version");
    if (v != kSchemaVersion) {
        throw ConfigError(r.field("schema_version") + ": unsupported version " + std::to_string(v) + " (expected " +
                          std::to_string(kSchemaVersion) + ")");
    }
}

namespace {

template <class F>
auto wrap(const std::string& path, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

fs::path resolve(const fs::path& base, const fs::path& p) {
    if (p.empty() || p.is_absolute()) return p;
    return (base / p).lexically_normal();
}

std::size_t one_based(FieldReader& r, const std::string& key, std::size_t count) {
    const long v = r.required<long>(key);
    if (v < 1 || static_cast<std::size_t>(v) > count) {
        throw ConfigError(r.field(key) + ": must lie in 1.." + std::to_string(count));
    }
    return static_cast<std::size_t>(v - 1);
}

std::size_t positive(FieldReader& r, const std::string& key, std::size_t fallback) {
    const long v = r.optional<long>(key, static_cast<long>(fallback));
    if (v < 1) throw ConfigError(r.field(key) + ": must be >= 1");
    return static_cast<std::size_t>(v);
}

}  // namespace

DosePanel panel_from_json(const json& j, const std::string& path) {
    FieldReader r(j, path);
    std::vector<DoseSequence> seqs;
    if (r.has("levels")) {
        const auto levels = r.required<std::vector<double>>("levels");
        const auto cycles = r.required<std::size_t>("cycles");
        if (cycles < 1) throw ConfigError(r.field("cycles") + ": must be >= 1");
        for (double d : levels) seqs.push_back({std::vector<double>(cycles, d), ""});
    } else {
        const auto rows = r.required<std::vector<std::vector<double>>>("sequences");
        for (const auto& row : rows) seqs.push_back({row, ""});
    }
    if (r.has("labels")) {
        const auto labels = r.required<std::vector<std::string>>("labels");
        if (labels.size() != seqs.size()) throw ConfigError(r.field("labels") + ": one label per sequence");
        for (std::size_t i = 0; i < seqs.size(); ++i) seqs[i].label = labels[i];
    }
    if (seqs.empty()) throw ConfigError(path + ": panel has no sequences");
    const std::size_t ref = r.has("reference") ? one_based(r, "reference", seqs.size()) : seqs.size() / 2;
    r.finish();
    return wrap(path, [&] { return DosePanel(std::move(seqs), ref); });
}

json to_json(const DosePanel& panel) {
    json rows = json::array();
    json labels = json::array();
    bool any_label = false;
    for (const auto& s : panel.sequences()) {
        rows.push_back(s.doses);
        labels.push_back(s.label);
        any_label = any_label || !s.label.empty();
    }
    json out{{"sequences", rows}, {"reference", panel.reference_index() + 1}};
    if (any_label) out["labels"] = labels;
    return out;
}

CycleWeight cycle_weight_from_json(const json& j, std::size_t cycles, const std::string& path) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "linear") return CycleWeight::linear(cycles);
        if (s == "constant") return CycleWeight::constant(cycles);
        throw ConfigError(path + ": unknown cycle weight '" + s + "' (linear | constant | list)");
    }
    if (j.is_array()) {
        return wrap(path, [&] { return CycleWeight(j.get<std::vector<double>>()); });
    }
    throw ConfigError(path + ": expected \"linear\", \"constant\" or a list of weights");
}

json to_json(const CycleWeight& g) { return std::vector<double>(g.values().begin(), g.values().end()); }

namespace {

NormalPrior normal_from_json(FieldReader r, NormalPrior d) {
    d.mean = r.optional<double>("mean", d.mean);
    d.sd = r.optional<double>("sd", d.sd);
    r.finish();
    return d;
}

}  // namespace

PriorSpec prior_from_json(const json& j, const std::string& path) {
    FieldReader r(j, path);
    PriorSpec p;
    if (r.has("alpha")) p.alpha = normal_from_json(r.child("alpha"), p.alpha);
    if (r.has("beta")) p.beta = normal_from_json(r.child("beta"), p.beta);
    if (r.has("gamma")) p.gamma = normal_from_json(r.child("gamma"), p.gamma);
    if (r.has("alpha_bounds")) {
        const auto b = r.required<std::vector<double>>("alpha_bounds");
        if (b.size() != 2) throw ConfigError(r.field("alpha_bounds") + ": expected [lower, upper]");
        p.alpha_lower = b[0];
        p.alpha_upper = b[1];
    }
    r.finish();
    wrap(path, [&] {
        p.validate();
        return 0;
    });
    return p;
}

json to_json(const PriorSpec& p) {
    return {{"alpha", {{"mean", p.alpha.mean}, {"sd", p.alpha.sd}}},
            {"beta", {{"mean", p.beta.mean}, {"sd", p.beta.sd}}},
            {"gamma", {{"mean", p.gamma.mean}, {"sd", p.gamma.sd}}},
            {"alpha_bounds", {p.alpha_lower, p.alpha_upper}}};
}

SamplerConfig sampler_from_json(const json& j, SamplerConfig s, const std::string& path) {
    FieldReader r(j, path);
    s.chains = positive(r, "chains", s.chains);
    s.draws_per_chain = positive(r, "draws_per_chain", s.draws_per_chain);
    s.burn_in = r.optional<std::size_t>("burn_in", s.burn_in);
    s.thin = positive(r, "thin", s.thin);
    s.adapt_window = positive(r, "adapt_window", s.adapt_window);
    if (r.has("target_accept")) {
        const auto band = r.required<std::vector<double>>("target_accept");
        if (band.size() != 2) throw ConfigError(r.field("target_accept") + ": expected [low, high]");
        s.target_accept_low = band[0];
        s.target_accept_high = band[1];
    }
    s.rhat_threshold = r.optional<double>("rhat_threshold", s.rhat_threshold);
    s.min_draws = r.optional<std::size_t>("min_draws", s.min_draws);
    s.parallel_chains = r.optional<bool>("parallel_chains", s.parallel_chains);
    r.finish();
    wrap(path, [&] {
        s.validate();
        return 0;
    });
    return s;
}

json to_json(const SamplerConfig& s) {
    return {{"chains", s.chains},
            {"draws_per_chain", s.draws_per_chain},
            {"burn_in", s.burn_in},
            {"thin", s.thin},
            {"adapt_window", s.adapt_window},
            {"target_accept", {s.target_accept_low, s.target_accept_high}},
            {"rhat_threshold", s.rhat_threshold},
            {"min_draws", s.min_draws},
            {"parallel_chains", s.parallel_chains}};
}

TrialConfig trial_config_from_json(const json& j, const std::string& path, SamplerConfig sampler_defaults,
                                   std::optional<double> default_target) {
    FieldReader r(j, path);
    check_schema(r);
    DosePanel panel = panel_from_json(r.raw("panel"), r.field("panel"));
    CycleWeight g = r.has("cycle_weight")
                        ? cycle_weight_from_json(r.raw("cycle_weight"), panel.cycles(), r.field("cycle_weight"))
                        : CycleWeight::linear(panel.cycles());
    TrialConfig c(std::move(panel), std::move(g));
    c.target = default_target ? r.optional<double>("target", *default_target) : r.required<double>("target");
    c.tau = r.optional<double>("tau", c.tau);
    c.cohort_size = positive(r, "cohort_size", c.cohort_size);
    c.max_sample_size = positive(r, "max_sample_size", c.max_sample_size);
    c.min_patients_for_stopping = r.optional<std::size_t>("min_patients_for_stopping", c.min_patients_for_stopping);
    if (r.has("estimator")) {
        const auto e = r.required<std::string>("estimator");
        c.estimator = wrap(r.field("estimator"), [&] { return parse_estimator(e); });
    }
    if (r.has("prior")) c.prior = prior_from_json(r.raw("prior"), r.field("prior"));
    c.sampler = r.has("sampler") ? sampler_from_json(r.raw("sampler"), sampler_defaults, r.field("sampler"))
                                 : sampler_defaults;
    c.seed = r.optional<std::uint64_t>("seed", c.seed);
    r.finish();
    // Map validation failures onto the field they concern.
    try {
        c.validate();
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        std::string key = "panel";
        if (msg.rfind("target", 0) == 0) key = "target";
        else if (msg.rfind("tau_T", 0) == 0) key = "tau";
        else if (msg.rfind("cohort_size", 0) == 0) key = "cohort_size";
        else if (msg.rfind("max_sample_size", 0) == 0) key = "max_sample_size";
        else if (msg.rfind("cycle weight", 0) == 0) key = "cycle_weight";
        throw ConfigError(r.field(key) + ": " + msg);
    }
    return c;
}

json to_json(const TrialConfig& c) {
    return {{"schema_version", kSchemaVersion},
            {"panel", to_json(c.panel)},
            {"cycle_weight", to_json(c.cycle_weight)},
            {"target", c.target},
            {"tau", c.tau},
            {"cohort_size", c.cohort_size},
            {"max_sample_size", c.max_sample_size},
            {"min_patients_for_stopping", c.min_patients_for_stopping},
            {"estimator", to_string(c.estimator)},
            {"prior", to_json(c.prior)},
            {"sampler", to_json(c.sampler)},
            {"seed", c.seed}};
}

ScenarioSpec scenario_from_json(const json& j, const std::string& path) {
    FieldReader r(j, path);
    check_schema(r);
    ScenarioSpec s;
    s.name = r.required<std::string>("name");
    s.target = r.optional<double>("target", s.target);
    s.cumulative = r.required<std::vector<std::vector<double>>>("cumulative");
    r.finish();
    wrap(path, [&] {
        s.validate();
        return 0;
    });
    return s;
}

ScenarioSpec load_scenario(const fs::path& path) { return scenario_from_json(read_json_file(path), path.string()); }

json to_json(const ScenarioSpec& s) {
    return {{"schema_version", kSchemaVersion}, {"name", s.name}, {"target", s.target}, {"cumulative", s.cumulative}};
}

Skeleton skeleton_from_json(const json& j, std::size_t levels, double target, TiteConfig& tite,
                            const std::string& path) {
    FieldReader r(j, path);
    tite.prior_sd = r.optional<double>("prior_sd", tite.prior_sd);
    tite.grid_intervals = r.optional<std::size_t>("grid_intervals", tite.grid_intervals);
    tite.grid_halfwidth = r.optional<double>("grid_halfwidth", tite.grid_halfwidth);
    if (!(tite.prior_sd > 0.0)) throw ConfigError(r.field("prior_sd") + ": must be > 0");
    if (tite.grid_intervals < 2 || tite.grid_intervals % 2) {
        throw ConfigError(r.field("grid_intervals") + ": must be even and >= 2");
    }
    if (!(tite.grid_halfwidth > 0.0)) throw ConfigError(r.field("grid_halfwidth") + ": must be > 0");
    const double intercept = r.optional<double>("intercept", 3.0);
    Skeleton sk;
    if (r.has("skeleton")) {
        sk.probabilities = r.required<std::vector<double>>("skeleton");
        if (sk.probabilities.size() != levels) throw ConfigError(r.field("skeleton") + ": one value per sequence");
        for (std::size_t i = 0; i < levels; ++i) {
            const double p = sk.probabilities[i];
            if (!(p > 0.0 && p < 1.0) || (i > 0 && !(p > sk.probabilities[i - 1]))) {
                throw ConfigError(r.field("skeleton") + ": must be strictly increasing within (0, 1)");
            }
        }
        sk.intercept = intercept;
        sk.prior_mtd = r.has("prior_mtd") ? one_based(r, "prior_mtd", levels) : closest_to_target(sk.probabilities, target);
        sk.halfwidth = r.optional<double>("halfwidth", 0.0);
    } else {
        const std::size_t mtd = r.has("prior_mtd") ? one_based(r, "prior_mtd", levels) : levels / 2;
        const double hw = r.optional<double>("halfwidth", 0.1);
        sk = wrap(path, [&] { return skeleton_indifference(levels, target, mtd, hw, intercept); });
    }
    r.finish();
    return sk;
}

namespace {

json tite_to_json(const Skeleton& sk, const TiteConfig& t) {
    return {{"skeleton", sk.probabilities},     {"prior_mtd", sk.prior_mtd + 1},
            {"halfwidth", sk.halfwidth},        {"intercept", sk.intercept},
            {"prior_sd", t.prior_sd},           {"grid_intervals", t.grid_intervals},
            {"grid_halfwidth", t.grid_halfwidth}};
}

}  // namespace

json StudyConfig::resolved() const {
    json methods_j = json::array();
    for (auto m : methods) methods_j.push_back(to_string(m));
    json out{{"schema_version", kSchemaVersion},
             {"name", name},
             {"methods", methods_j},
             {"scenario", to_json(scenario)},
             {"trial", to_json(settings.trial)},
             {"tite", tite_to_json(settings.skeleton, settings.tite)},
             {"accrual", {{"policy", to_string(settings.accrual)}, {"interval", settings.accrual_interval}}},
             {"n_sims", n_sims},
             {"seed", seed},
             {"prediction_horizons", prediction_horizons}};
    return out;
}

StudyConfig study_config_from_json(const json& j, const fs::path& base_dir, const StudyOverrides& ov) {
    FieldReader r(j, "");
    check_schema(r);
    StudyConfig c;
    c.name = r.required<std::string>("name");
    if (r.has("methods")) {
        for (const auto& m : r.required<std::vector<std::string>>("methods")) {
            c.methods.push_back(wrap(r.field("methods"), [&] { return parse_method(m); }));
        }
    } else {
        c.methods = {Method::dice};
    }
    if (c.methods.empty()) throw ConfigError(r.field("methods") + ": at least one method required");

    const json& sc = r.raw("scenario");
    if (sc.is_string()) {
        c.scenario_path = resolve(base_dir, sc.get<std::string>());
        if (!fs::exists(c.scenario_path)) {
            throw ConfigError(r.field("scenario") + ": file not found: " + c.scenario_path.string());
        }
        c.scenario = load_scenario(c.scenario_path);
    } else {
        c.scenario = scenario_from_json(sc, r.field("scenario"));
    }

    TrialConfig trial =
        trial_config_from_json(r.raw("trial"), r.field("trial"), SamplerConfig::simulation_default(), c.scenario.target);
    if (ov.cohort) {
        if (*ov.cohort < 1) throw ConfigError("--cohort: must be >= 1");
        trial.cohort_size = *ov.cohort;
    }
    if (trial.panel.size() != c.scenario.sequences() || trial.panel.cycles() != c.scenario.cycles()) {
        throw ConfigError(r.field("trial.panel") + ": panel is " + std::to_string(trial.panel.size()) + "x" +
                          std::to_string(trial.panel.cycles()) + " but scenario is " +
                          std::to_string(c.scenario.sequences()) + "x" + std::to_string(c.scenario.cycles()));
    }
    if (trial.target != c.scenario.target) {
        throw ConfigError(r.field("trial.target") + ": differs from the scenario target");
    }
    c.settings.trial = std::move(trial);
    if (r.has("tite")) {
        c.settings.skeleton = skeleton_from_json(r.raw("tite"), c.settings.trial.panel.size(), c.scenario.target,
                                                 c.settings.tite, r.field("tite"));
    } else {
        c.settings.skeleton = skeleton_from_json(json::object(), c.settings.trial.panel.size(), c.scenario.target,
                                                 c.settings.tite, r.field("tite"));
    }
    if (r.has("accrual")) {
        FieldReader a = r.child("accrual");
        if (a.has("policy")) {
            const auto p = a.required<std::string>("policy");
            c.settings.accrual = wrap(a.field("policy"), [&] { return parse_accrual(p); });
        }
        c.settings.accrual_interval = positive(a, "interval", c.settings.accrual_interval);
        a.finish();
    }
    c.n_sims = ov.n_sims.value_or(r.optional<std::size_t>("n_sims", c.n_sims));
    if (c.n_sims < 1) throw ConfigError(std::string(ov.n_sims ? "--n-sims" : "n_sims") + ": must be >= 1");
    c.seed = ov.seed.value_or(r.optional<std::uint64_t>("seed", c.seed));
    c.prediction_horizons = r.optional<std::vector<std::size_t>>("prediction_horizons", {});
    for (auto k : c.prediction_horizons) {
        if (k < 1 || k > c.scenario.cycles()) {
            throw ConfigError(r.field("prediction_horizons") + ": horizon " + std::to_string(k) + " outside 1.." +
                              std::to_string(c.scenario.cycles()));
        }
    }
    if (r.has("output")) {
        FieldReader o = r.child("output");
        c.out_json = resolve(base_dir, o.optional<std::string>("json", ""));
        c.out_csv = resolve(base_dir, o.optional<std::string>("csv", ""));
        o.finish();
    }
    if (ov.out) {
        c.out_json = *ov.out / (c.name + ".json");
        c.out_csv = *ov.out / (c.name + ".csv");
    }
    r.finish();
    return c;
}

StudyConfig load_study_config(const fs::path& path, const StudyOverrides& ov) {
    return study_config_from_json(read_json_file(path), path.parent_path(), ov);
}

PriorCheckConfig prior_check_config_from_json(const json& j, const fs::path& base_dir, const StudyOverrides& ov) {
    FieldReader r(j, "");
    check_schema(r);
    PriorCheckConfig c;
    c.trial = trial_config_from_json(r.raw("trial"), r.field("trial"), SamplerConfig{}, 0.3);
    c.n_draws = ov.n_sims.value_or(r.optional<std::size_t>("n_draws", c.n_draws));
    if (c.n_draws < 1000) throw ConfigError(r.field("n_draws") + ": at least 1000 draws required");
    c.seed = ov.seed.value_or(r.optional<std::uint64_t>("seed", c.seed));
    c.density_samples = r.optional<std::size_t>("density_samples", c.density_samples);
    if (c.density_samples > c.n_draws) throw ConfigError(r.field("density_samples") + ": exceeds n_draws");
    if (r.has("output")) {
        FieldReader o = r.child("output");
        c.out_json = resolve(base_dir, o.optional<std::string>("json", ""));
        c.out_csv = resolve(base_dir, o.optional<std::string>("csv", ""));
        o.finish();
    }
    if (ov.out) {
        c.out_json = *ov.out / "prior_check.json";
        c.out_csv = *ov.out / "prior_check_density.csv";
    }
    r.finish();
    return c;
}

FernandesConfig fernandes_config_from_json(const json& j, const fs::path& base_dir, const StudyOverrides& ov) {
    FieldReader r(j, "");
    check_schema(r);
    FernandesConfig c;
    c.label = r.optional<std::string>("name", "fernandes");
    auto& s = c.study;
    if (r.has("truth")) {
        FieldReader t = r.child("truth");
        s.truth.alpha = t.optional<double>("alpha", s.truth.alpha);
        s.truth.beta = t.optional<double>("beta", s.truth.beta);
        s.truth.rho = t.optional<double>("rho", s.truth.rho);
        t.finish();
        if (!(s.truth.alpha > 0 && s.truth.beta > 0 && s.truth.rho > 0 && s.truth.rho < 1)) {
            throw ConfigError(r.field("truth") + ": need alpha > 0, beta > 0, 0 < rho < 1");
        }
    }
    s.doses = r.optional<std::vector<double>>("doses", s.doses);
    if (s.doses.empty()) throw ConfigError(r.field("doses") + ": at least one dose required");
    for (double d : s.doses) {
        if (!(d > 0.0)) throw ConfigError(r.field("doses") + ": doses must be positive");
    }
    s.patients_per_dose = positive(r, "patients_per_dose", s.patients_per_dose);
    s.cycles = positive(r, "cycles", s.cycles);
    s.n_sims = ov.n_sims.value_or(r.optional<std::size_t>("n_sims", s.n_sims));
    if (s.n_sims < 1) throw ConfigError(std::string(ov.n_sims ? "--n-sims" : "n_sims") + ": must be >= 1");
    s.seed = ov.seed.value_or(r.optional<std::uint64_t>("seed", s.seed));
    if (r.has("prior")) {
        FieldReader p = r.child("prior");
        auto& pr = s.prior;
        if (p.has("alpha")) {
            FieldReader a = p.child("alpha");
            pr.alpha_logmean = a.optional<double>("logmean", pr.alpha_logmean);
            pr.alpha_precision = a.optional<double>("precision", pr.alpha_precision);
            a.finish();
        }
        if (p.has("beta")) {
            FieldReader b = p.child("beta");
            pr.beta_logmean = b.optional<double>("logmean", pr.beta_logmean);
            pr.beta_precision = b.optional<double>("precision", pr.beta_precision);
            b.finish();
        }
        if (p.has("rho")) {
            FieldReader b = p.child("rho");
            pr.rho_a = b.optional<double>("a", pr.rho_a);
            pr.rho_b = b.optional<double>("b", pr.rho_b);
            b.finish();
        }
        p.finish();
        if (!(pr.alpha_precision > 0 && pr.beta_precision > 0 && pr.rho_a > 0 && pr.rho_b > 0)) {
            throw ConfigError(r.field("prior") + ": precisions and beta shapes must be positive");
        }
    }
    if (r.has("sampler")) s.sampler = sampler_from_json(r.raw("sampler"), s.sampler, r.field("sampler"));
    if (r.has("output")) {
        FieldReader o = r.child("output");
        c.out_json = resolve(base_dir, o.optional<std::string>("json", ""));
        o.finish();
    }
    if (ov.out) c.out_json = *ov.out / (c.label + ".json");
    r.finish();
    return c;
}

ServiceConfig service_config_from_json(const json& j, const fs::path& base_dir) {
    FieldReader r(j, "");
    check_schema(r);
    ServiceConfig c;
    c.host = r.optional<std::string>("host", c.host);
    c.port = r.optional<int>("port", c.port);
    if (c.port < 0 || c.port > 65535) throw ConfigError(r.field("port") + ": must lie in 0..65535");
    c.storage = resolve(base_dir, r.optional<std::string>("storage", c.storage.string()));
    c.threads = r.optional<int>("threads", c.threads);
    if (c.threads < 1) throw ConfigError(r.field("threads") + ": must be >= 1");
    r.finish();
    return c;
}

std::uint64_t fingerprint(const json& j) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace dice
