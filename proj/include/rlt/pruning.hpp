#pragma once

#include "rlt/attacks.hpp"
#include "rlt/dataset.hpp"
#include "rlt/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace rlt {

struct TrainingConfig {
    std::string loss = "cross_entropy";
    double epsilon = 8.0 / 255.0;    // training-time L-inf budget
    int inner_steps = 7;             // PGD steps of the inner maximization
    double inner_step_size = (8.0 / 255.0) / 4.0;
    bool inner_random_start = true;
    int epochs = 12;
    Index batch_size = 64;
    double score_learning_rate = 2.0;
    double momentum = 0.9;
    bool cosine_decay = true;
    std::uint64_t rng_seed = 0;
    MaskScope mask_scope = MaskScope::per_layer;
    // evaluation attack used for the recorded robust metric
    int eval_steps = 20;
    Index eval_cap = 256;  // at most this many validation samples per metric pass

    void validate() const;
    nlohmann::json to_json() const;
    static TrainingConfig from_json(const nlohmann::json& j);
};

struct TicketMetrics {
    double clean_accuracy = 0;
    double robust_accuracy = 0;
};

// One library entry: everything needed to rebuild the subnetwork is the
// (arch, seed) pair plus the trained mask.
struct RobustTicket {
    std::string arch_id;
    double remaining_ratio = 1.0;
    std::uint64_t omega_seed = 0;
    std::vector<MaskVec> mask;
    TicketMetrics metrics;
    TrainingConfig training_config;

    MaskedModel build_model() const;
};

// Inner maximization of the saddle objective: PGD on the current masked
// model, using the training-time attack parameters.
Mat inner_maximize(const MaskedModel& model, const Mat& x, const IntVec& y,
                   const TrainingConfig& cfg, std::uint64_t step_seed);

// Straight-through gradient of the loss wrt the scores: the binarization is
// treated as identity, so every entry (masked or not) receives
// d loss / d w_eff * omega.
std::vector<Vec> straight_through_score_grad(const MaskedModel& model, const Mat& x_adv,
                                             const IntVec& y);

// Trains the mask (never omega) by alternating inner PGD maximization and
// straight-through score descent with a top-k refresh after every step.
// Emits one JSON line per epoch to event_log when provided.
RobustTicket train_ticket(const std::string& arch_id, double remaining_ratio,
                          const SplitDataset& data, const TrainingConfig& cfg,
                          std::ostream* event_log = nullptr);

// Madry-style adversarial training of an unmasked model: the comparison
// baseline. Unlike tickets this updates omega itself.
MaskedModel train_dense_baseline(const std::string& arch_id, const SplitDataset& data,
                                 const TrainingConfig& cfg, std::ostream* event_log = nullptr);

}  // namespace rlt
