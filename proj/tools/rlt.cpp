// Experiment driver for the robust-ticket dynamic-ensemble toolkit.
//
// Subcommands: prune, validate, transfer-matrix, ensemble-eval, report.
// Exit codes: 0 success, 1 usage, 2 integrity, 3 experiment failure.

#include "rlt/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

int dispatch(const std::string& cmd, const std::string& config_file, const std::string& run_dir,
             int jobs_override) {
    using namespace rlt;
    if (cmd == "report") {
        run_report(run_dir, std::cout);
        std::cout << "report written to " << (std::filesystem::path(run_dir) / "report.md")
                  << "\n";
        return 0;
    }

    ExperimentConfig cfg = ExperimentConfig::load(config_file);
    if (jobs_override > 0) cfg.jobs = jobs_override;

    if (cmd == "prune") {
        PruneResult r = run_prune(cfg, std::cout);
        return r.failures.empty() ? 0 : 3;
    }
    if (cmd == "validate") {
        LibraryStore store(cfg.library_root);
        auto report = store.validate();
        for (const auto& err : report.manifest_errors)
            std::cout << "manifest: FAIL " << err << "\n";
        for (const auto& e : report.entries)
            std::cout << e.ticket_id << ": " << (e.ok ? "ok" : "FAIL " + e.detail) << "\n";
        std::cout << (report.ok ? "library valid" : "library INVALID") << "\n";
        return report.ok ? 0 : 2;
    }
    if (cmd == "transfer-matrix") {
        run_transfer(cfg, std::cout);
        return 0;
    }
    if (cmd == "ensemble-eval") {
        run_ensemble_eval(cfg, std::cout);
        return 0;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"robust lottery ticket library, dynamic stochastic ensemble and attack harness"};
    app.require_subcommand(1);

    std::string config_file;
    std::string run_dir;
    int jobs = 0;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_file, "experiment config (JSON)")->required();
        sub->add_option("-j,--jobs", jobs, "worker count (overrides config; 1 = deterministic)");
    };
    add_config(app.add_subcommand("prune", "train and store the configured tickets"));
    add_config(app.add_subcommand("validate", "check manifest invariants and blob checksums"));
    add_config(app.add_subcommand("transfer-matrix",
                                  "pairwise transferability matrix, CSV + heatmap"));
    add_config(app.add_subcommand("ensemble-eval",
                                  "dense / R2S / dynamic ensemble comparison and epsilon sweep"));
    app.add_subcommand("report", "collate run artifacts into report.md")
        ->add_option("run_dir", run_dir, "output directory of a previous run")
        ->required();

    try {
        app.parse(argc, argv);
        return dispatch(app.get_subcommands().front()->get_name(), config_file, run_dir, jobs);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;  // usage errors exit 1
    } catch (const rlt::IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 2;
    } catch (const rlt::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const rlt::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "experiment failed: " << e.what() << "\n";
        return 3;
    }
}
