// spi_cli: sensor parameter identification from the command line.
//
//   spi_cli schedule    --config c.json [--out dir]
//   spi_cli covariance  --config c.json
//   spi_cli pcrb-trace  --config c.json
//   spi_cli simulate    --config c.json [--seed n]
//   spi_cli estimate    --config c.json --input dir
//   spi_cli experiment  --config c.json --experiment rate-sweep|covariance-sweep [--jobs n]

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "spi/harness/commands.hpp"

namespace {

using namespace spi::harness;

struct Globals
{
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    int jobs = 1;
    bool timing = false;
};

void add_globals(CLI::App* cmd, Globals& g)
{
    cmd->add_option("--config", g.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", g.out, "Output directory (default: output.directory from the config)");
    cmd->add_option("--seed", g.seed, "Base seed (overrides trials.base_seed)");
    cmd->add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_flag("--timing", g.timing, "Record solver wall times in outputs (breaks byte-identical reruns)");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Sensor parameter identification: minimal query rate or loosest sensor covariance for a "
                 "target trajectory-estimation accuracy"};
    app.require_subcommand(1);
    Globals g;
    std::string experiment = "rate-sweep";
    std::string input_dir;

    auto* schedule = app.add_subcommand("schedule", "Minimal sensor query rate per accuracy value");
    auto* covariance = app.add_subcommand("covariance", "Loosest sensor covariance per accuracy value");
    auto* trace = app.add_subcommand("pcrb-trace", "Per-step bound trace lambda_max(J^-1)");
    auto* simulate = app.add_subcommand("simulate", "Ground truth, inputs and measurements for one trial");
    auto* estimate = app.add_subcommand("estimate", "Batch MAP estimate from simulate output");
    auto* exp = app.add_subcommand("experiment", "Seeded Monte Carlo sweep over the accuracy grid");
    for (auto* c : {schedule, covariance, trace, simulate, estimate, exp})
        add_globals(c, g);
    estimate->add_option("--input", input_dir, "Directory written by simulate")->required()->check(CLI::ExistingDirectory);
    exp->add_option("--experiment", experiment, "rate-sweep or covariance-sweep")
        ->check(CLI::IsMember({"rate-sweep", "covariance-sweep"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfig;
    }

    try {
        const ExperimentConfig cfg = load_config(g.config);
        RunOptions ro;
        ro.jobs = g.jobs;
        for (auto* c : {schedule, covariance, trace, simulate, estimate, exp})
            if (c->parsed() && c->count("--seed"))
                ro.seed = g.seed;
        if (g.timing)
            ro.timing = true;

        CommandOutput out;
        if (schedule->parsed())
            out = cmd_schedule(cfg, ro);
        else if (covariance->parsed())
            out = cmd_covariance(cfg, ro);
        else if (trace->parsed())
            out = cmd_pcrb_trace(cfg, ro);
        else if (simulate->parsed())
            out = cmd_simulate(cfg, ro);
        else if (estimate->parsed())
            out = cmd_estimate(cfg, input_dir, ro);
        else
            out = cmd_experiment(cfg, experiment == "rate-sweep" ? ExperimentKind::rate_sweep
                                                                 : ExperimentKind::covariance_sweep,
                                 ro);

        const std::string dir = g.out.empty() ? cfg.output.directory : g.out;
        write_outputs(out, dir);
        std::cout << out.summary;
        for (const auto& f : out.files)
            std::cout << "wrote " << (std::filesystem::path(dir) / f.name).string() << "\n";
        return out.exit_code;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
