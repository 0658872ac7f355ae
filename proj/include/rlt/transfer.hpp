#pragma once

#include "rlt/attacks.hpp"
#include "rlt/store.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rlt {

// Source x target grid of robust accuracies: entry (i,j) is the accuracy of
// target j on adversarial examples crafted against source i. Directional by
// construction; no symmetry is assumed.
struct TransferMatrix {
    std::vector<std::string> sources;  // ticket ids
    std::vector<std::string> targets;
    Mat values;
    AttackConfig attack;
    std::string dataset_digest;
};

// Generates one adversarial test set per source (optionally cached on disk,
// keyed by source id, dataset digest and attack digest) and evaluates every
// target against it.
TransferMatrix transfer_matrix(const LibraryStore& store,
                               const std::vector<std::string>& source_ids,
                               const std::vector<std::string>& target_ids, const Dataset& data,
                               const AttackConfig& attack,
                               const std::optional<std::filesystem::path>& cache_dir = {},
                               int jobs = 1);

struct TransferGapStats {
    double same_structure_mean = 0;   // off-diagonal, source and target share a structure
    double cross_structure_mean = 0;
    double gap = 0;  // cross - same; positive means cross-structure transfers worse
};

// structure_of maps ticket id -> arch id; throws std::invalid_argument when
// fewer than two structures are represented.
TransferGapStats transfer_gap_stats(const TransferMatrix& matrix,
                                    const std::map<std::string, std::string>& structure_of);

void write_transfer_csv(const TransferMatrix& matrix, const std::filesystem::path& path,
                        const std::string& header_comment = {});

}  // namespace rlt
