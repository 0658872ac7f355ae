#pragma once

#include "rlt/attacks.hpp"
#include "rlt/dataset.hpp"
#include "rlt/ensemble.hpp"
#include "rlt/pruning.hpp"
#include "rlt/store.hpp"
#include "rlt/transfer.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace rlt {

struct TicketTask {
    std::string arch_id;
    std::vector<double> ratios;
};

struct ExperimentConfig {
    SyntheticSpec dataset;
    std::filesystem::path library_root = "library";
    std::vector<TicketTask> tickets;
    TrainingConfig training;
    AttackConfig attack;  // evaluation attack (pgd)
    SamplerConfig sampler;
    std::vector<double> epsilon_sweep;
    int theta_draws = 16;        // K seeded draws behind the randomized-defense estimate
    Index transfer_subset = 1000;
    std::filesystem::path output_dir = "out";
    int jobs = 1;

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    // reads a JSON config file; RLT_LIBRARY_ROOT overrides library_root
    static ExperimentConfig load(const std::filesystem::path& file);

    std::string digest() const;
    void validate() const;
};

struct PruneResult {
    std::vector<std::string> ticket_ids;
    std::vector<std::string> failures;  // "(arch, ratio): reason"
};

// Trains and stores every configured ticket (skipping (arch, ratio) pairs
// already present), then writes tickets.csv plus the per-structure
// library_summary.csv.
PruneResult run_prune(const ExperimentConfig& cfg, std::ostream& log);

// Full pairwise transfer run over the library; writes transfer.csv,
// transfer_summary.json and transfer_heatmap.bmp.
TransferGapStats run_transfer(const ExperimentConfig& cfg, std::ostream& log);

struct EnsembleEvalRow {
    std::string method;
    double epsilon = 0;
    double accuracy = 0;
    double std_error = 0;
};

// Dense adversarial-training baseline, per-structure R2S and the dynamic
// ensemble, clean and under attack for every epsilon in the sweep; writes
// ensemble_eval.csv and sweep.csv.
std::vector<EnsembleEvalRow> run_ensemble_eval(const ExperimentConfig& cfg, std::ostream& log);

// Collates run artifacts into report.md; missing artifacts are listed as
// placeholders and the report is still produced. Byte-stable given the same
// inputs.
std::filesystem::path run_report(const std::filesystem::path& run_dir, std::ostream& log);

}  // namespace rlt
