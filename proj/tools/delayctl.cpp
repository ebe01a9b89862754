#include <iostream>

#include "CLI11.hpp"

#include "delayctl/cli.hpp"

int main(int argc, char** argv) {
    using delayctl::cli::Options;
    Options opt;
    CLI::App app{"Solvers and optimality checks for delayed stochastic control"};
    app.require_subcommand(1);
    app.set_version_flag("--version", delayctl::version);

    std::string ladder;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "INI configuration file")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", opt.out, "output directory (default: $DELAYCTL_OUTPUT_DIR or ./delayctl-out)");
        sub->add_option("--seed", opt.seed, "Monte Carlo seed, overrides mc.seed");
        sub->add_option("--threads", opt.threads, "worker threads")->check(CLI::Range(1u, 1024u));
    };

    auto* bsde = app.add_subcommand("solve-bsde", "linear BSDE with a window terminal datum");
    common(bsde);
    auto* absde = app.add_subcommand("solve-absde", "anticipated BSDE by Picard iteration");
    common(absde);
    absde->add_flag("--oracle", opt.oracle, "compare against the direct sparse solve (lattice, N <= 12)");
    absde->add_option("--approx-ladder", ladder, "comma-separated mollification indices");
    auto* smp = app.add_subcommand("check-smp", "maximum-principle residuals of a candidate control");
    common(smp);
    smp->add_option("--candidate", opt.candidate, "control CSV (time,scenario,component,value)")
        ->required()
        ->check(CLI::ExistingFile);
    smp->add_option("--directions", opt.directions, "number of comparison controls");
    auto* model = app.add_subcommand("run-model", "simulate a model, solve its adjoint and check optimality");
    common(model);
    model->add_option("model", opt.model, "advertising | portfolio");
    model->add_option("--directions", opt.directions, "number of comparison controls");
    auto* study = app.add_subcommand("convergence-study", "measure-approximation or grid-refinement ladder");
    common(study);
    study->add_option("--approx-ladder", ladder, "comma-separated mollification indices");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    opt.command = app.get_subcommands().front()->get_name();
    if (!ladder.empty()) {
        try {
            for (double v : delayctl::Config::parse_list("--approx-ladder", ladder)) {
                if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v)))
                    throw delayctl::Error(delayctl::ErrorCode::schema, "--approx-ladder expects positive integers");
                opt.ladder.push_back(static_cast<std::size_t>(v));
            }
        } catch (const delayctl::Error& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 2;
        }
    }
    return delayctl::cli::run(opt);
}
