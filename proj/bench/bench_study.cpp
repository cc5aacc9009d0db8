#include <benchmark/benchmark.h>

#include <omp.h>

#include "dice/config.hpp"
#include "dice/core_model.hpp"
#include "dice/sim.hpp"

using namespace dice;

namespace {

const std::filesystem::path kConfigs = std::filesystem::path(DICE_CONFIG_DIR);

StudyConfig study(std::size_t n_sims) {
    StudyOverrides o;
    o.n_sims = n_sims;
    return load_study_config(kConfigs / "scenario1.json", o);
}

void BM_StudyParallel(benchmark::State& state) {
    const auto cfg = study(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        auto oc = run_study(Method::dice, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed);
        benchmark::DoNotOptimize(oc.pcs);
    }
    state.counters["threads"] = omp_get_max_threads();
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_StudySerial(benchmark::State& state) {
    const auto cfg = study(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        auto oc = run_study_serial(Method::dice, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed);
        benchmark::DoNotOptimize(oc.pcs);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_TiteStudyParallel(benchmark::State& state) {
    const auto cfg = study(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        auto oc = run_study(Method::tite_crm, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed);
        benchmark::DoNotOptimize(oc.pcs);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_TiteStudySerial(benchmark::State& state) {
    const auto cfg = study(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        auto oc = run_study_serial(Method::tite_crm, cfg.scenario, cfg.settings, cfg.n_sims, cfg.seed);
        benchmark::DoNotOptimize(oc.pcs);
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

// Aggregated likelihood against the per-patient sum.
std::vector<PatientRecord> cohort() {
    const double levels[] = {5, 7, 10, 15, 20};
    const auto panel = DosePanel::constant(levels, 5);
    std::vector<PatientRecord> pts;
    for (int i = 0; i < 30; ++i) {
        const auto j = static_cast<std::size_t>(i % 5);
        const std::size_t k = 1 + static_cast<std::size_t>(i % 5);
        pts.push_back({std::to_string(i), j, std::vector<double>(k, levels[j]), i % 7 == 0});
    }
    return pts;
}

void BM_LikelihoodNaive(benchmark::State& state) {
    const double levels[] = {5, 7, 10, 15, 20};
    const auto panel = DosePanel::constant(levels, 5);
    const auto g = CycleWeight::linear(5);
    const auto pts = cohort();
    ModelParams t{-2.0, 0.1, 0.2};
    for (auto _ : state) {
        t.alpha += 1e-9;
        benchmark::DoNotOptimize(log_likelihood(t, pts, panel, g));
    }
}

void BM_LikelihoodAggregated(benchmark::State& state) {
    const double levels[] = {5, 7, 10, 15, 20};
    const auto panel = DosePanel::constant(levels, 5);
    const auto g = CycleWeight::linear(5);
    const LikelihoodTerms terms(cohort(), panel, g);
    ModelParams t{-2.0, 0.1, 0.2};
    for (auto _ : state) {
        t.alpha += 1e-9;
        benchmark::DoNotOptimize(terms(t));
    }
}

}  // namespace

BENCHMARK(BM_StudyParallel)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_StudySerial)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_TiteStudyParallel)->Arg(64)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_TiteStudySerial)->Arg(64)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_LikelihoodNaive);
BENCHMARK(BM_LikelihoodAggregated);

BENCHMARK_MAIN();
