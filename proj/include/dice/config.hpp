#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dice/comparators.hpp"
#include "dice/design.hpp"
#include "dice/sim.hpp"

namespace dice {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// Configuration problem; the message names the offending field.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/*
 * Typed access to one JSON object. Every key must be consumed before
 * finish(); leftovers are reported as unknown fields.
 */
class FieldReader {
public:
    FieldReader(const json& obj, std::string path);

    bool has(const std::string& key) const { return obj_.contains(key); }
    const json& raw(const std::string& key);
    FieldReader child(const std::string& key);

    template <class T>
    T required(const std::string& key) {
        if (!obj_.contains(key)) throw ConfigError(field(key) + ": required field missing");
        return convert<T>(key);
    }

    template <class T>
    T optional(const std::string& key, T fallback) {
        if (!obj_.contains(key)) return fallback;
        return convert<T>(key);
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    void finish() const;

private:
    template <class T>
    T convert(const std::string& key) {
        used_.insert(key);
        try {
            return obj_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(field(key) + ": wrong type (" + e.what() + ")");
        }
    }

    const json& obj_;
    std::string path_;
    std::set<std::string> used_;
};

json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);
void check_schema(FieldReader& r);

DosePanel panel_from_json(const json& j, const std::string& path = "panel");
json to_json(const DosePanel& panel);

CycleWeight cycle_weight_from_json(const json& j, std::size_t cycles, const std::string& path = "cycle_weight");
json to_json(const CycleWeight& g);

PriorSpec prior_from_json(const json& j, const std::string& path = "prior");
json to_json(const PriorSpec& p);

SamplerConfig sampler_from_json(const json& j, SamplerConfig defaults, const std::string& path = "sampler");
json to_json(const SamplerConfig& s);

// Trial settings; schema_version is accepted but optional when embedded in another document.
TrialConfig trial_config_from_json(const json& j, const std::string& path = "",
                                   SamplerConfig sampler_defaults = SamplerConfig{},
                                   std::optional<double> default_target = std::nullopt);
json to_json(const TrialConfig& c);

ScenarioSpec scenario_from_json(const json& j, const std::string& path = "scenario");
ScenarioSpec load_scenario(const std::filesystem::path& path);
json to_json(const ScenarioSpec& s);

Skeleton skeleton_from_json(const json& j, std::size_t levels, double target, TiteConfig& tite,
                            const std::string& path = "tite");

// Minimal valid trial used to default-construct holders before parsing.
inline TrialConfig placeholder_trial() {
    return TrialConfig(DosePanel::constant(std::vector<double>{1.0}, 1), CycleWeight::linear(1));
}

struct StudyConfig {
    std::string name;
    std::vector<Method> methods;
    std::filesystem::path scenario_path;
    ScenarioSpec scenario;
    SimSettings settings{placeholder_trial(), {}, {}};
    std::size_t n_sims = 1000;
    std::uint64_t seed = 1;
    std::vector<std::size_t> prediction_horizons;
    std::filesystem::path out_json;
    std::filesystem::path out_csv;

    json resolved() const;
};

struct StudyOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> n_sims;
    std::optional<std::size_t> cohort;
    std::optional<std::filesystem::path> out;
};

StudyConfig study_config_from_json(const json& j, const std::filesystem::path& base_dir,
                                   const StudyOverrides& overrides = {});
StudyConfig load_study_config(const std::filesystem::path& path, const StudyOverrides& overrides = {});

struct PriorCheckConfig {
    TrialConfig trial = placeholder_trial();
    std::size_t n_draws = 50000;
    std::uint64_t seed = 1;
    std::size_t density_samples = 2000;
    std::filesystem::path out_json;
    std::filesystem::path out_csv;
};

PriorCheckConfig prior_check_config_from_json(const json& j, const std::filesystem::path& base_dir,
                                              const StudyOverrides& overrides = {});

struct FernandesConfig {
    FernandesStudyConfig study;
    std::string label;
    std::filesystem::path out_json;
};

FernandesConfig fernandes_config_from_json(const json& j, const std::filesystem::path& base_dir,
                                           const StudyOverrides& overrides = {});

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path storage = "trials";
    int threads = 4;
};

ServiceConfig service_config_from_json(const json& j, const std::filesystem::path& base_dir);

// 64-bit FNV-1a over the canonical dump of a document.
std::uint64_t fingerprint(const json& j);
std::string hex64(std::uint64_t v);

}  // namespace dice
