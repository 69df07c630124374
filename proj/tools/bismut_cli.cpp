// Experiment driver: bismut_cli --config <file> [--seed <u64>] [--out <dir>] [--threads <n>]
// Exit codes: 0 success, 2 config error, 3 numerical-quality failure, 4 internal error.

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <optional>

#include "bismut/experiments.hpp"

namespace {

int exit_code_for(bismut::ErrorCode code) {
    using bismut::ErrorCode;
    switch (code) {
        case ErrorCode::ConfigError:
        case ErrorCode::InvalidParams:
        case ErrorCode::DegenerateMode:
        case ErrorCode::InvalidTime:
        case ErrorCode::UnsupportedDirection:
        case ErrorCode::UnsupportedFunctional:
        case ErrorCode::WindowMismatch:
        case ErrorCode::NonDifferentiableDrift:
        case ErrorCode::NonLipschitzGenerator: return 2;
        case ErrorCode::SingularProjection:
        case ErrorCode::IllConditionedRegression:
        case ErrorCode::BudgetExceeded:
        case ErrorCode::Overflow: return 3;
    }
    return 4;
}

int report(int exit_code, std::string_view code, const std::string& message) {
    const bismut::json record{{"status", "error"}, {"exit_code", exit_code}, {"code", code}, {"message", message}};
    std::cerr << record.dump() << '\n';
    return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Spectral Galerkin Bismut-formula experiments"};
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    int threads = 1;
    app.add_option("--config", config_path, "experiment configuration (JSON)")->required();
    app.add_option("--seed", seed, "overrides sim.seed");
    app.add_option("--out", out_dir, "output directory (overrides the config's output)");
    app.add_option("--threads", threads, "worker threads; never affects results")->check(CLI::Range(1, 1024));
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }
    bismut::set_worker_count(threads);
    try {
        bismut::ExperimentConfig cfg = bismut::load_config(config_path);
        if (seed) cfg.sim.seed = *seed;
        if (!out_dir.empty()) cfg.output = out_dir;
        const auto start = std::chrono::steady_clock::now();
        const bismut::ExperimentResult res = bismut::run_experiment(cfg);
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bismut::write_results(cfg.output, cfg, res, wall);
        for (const auto& [name, value] : res.metrics) std::printf("%s = %.10g\n", name.c_str(), value);
        if (!res.failed_checks.empty()) {
            std::string names;
            for (const auto& n : res.failed_checks) names += (names.empty() ? "" : ", ") + n;
            return report(3, "ThresholdViolated", "checks failed: " + names);
        }
        return 0;
    } catch (const bismut::Error& e) {
        const int code = exit_code_for(e.code());
        return report(code, bismut::to_string(e.code()), e.what());
    } catch (const std::exception& e) {
        return report(4, "Internal", e.what());
    }
}
