#pragma once

#include "rlt/rng.hpp"
#include "rlt/store.hpp"

#include <nlohmann/json_fwd.hpp>

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace rlt {

struct SamplerConfig {
    double structure_inclusion_prob = 0.5;  // P(alpha_i = 1), independently per structure
    double count_prob_one = 0.65;           // p(n_i = 1); p(n_i = 2) is the complement
    // remaining-ratio pool per structure; every pool entry must resolve to a
    // loaded ticket
    std::map<std::string, std::vector<double>> pools;
    std::uint64_t rng_seed = 0;
    bool average_probabilities = false;  // mean of softmax instead of mean of logits

    void validate() const;
    nlohmann::json to_json() const;
    static SamplerConfig from_json(const nlohmann::json& j);
};

// One draw of the ensemble variable theta(alpha, n, s).
struct ThetaSample {
    std::vector<std::string> structures;        // fixed order (sorted arch ids)
    std::vector<std::uint8_t> alpha;            // structure selected?
    std::vector<int> counts;                    // n_i in {1,2} when selected, else 0
    std::vector<std::vector<double>> picks;     // distinct ratios per structure
    int total = 0;                              // n = sum alpha_i * n_i

    void check_invariants() const;  // throws ValidationError on violation
    nlohmann::json to_json() const;
};

// Steps: draw alpha per structure (re-drawn until non-zero), then n_i from
// the count distribution, then n_i distinct ratios uniformly without
// replacement. Deterministic given the rng state.
ThetaSample sample_theta(const TicketLibrary& library, const SamplerConfig& cfg, Rng& rng);

// R2S baseline: one fixed structure, counts and ratios drawn as above.
ThetaSample sample_r2s(const std::string& arch_id, const TicketLibrary& library,
                       const SamplerConfig& cfg, Rng& rng);

// Mean of member logits (or softmax probabilities when configured);
// member-order independent.
Mat ensemble_forward(const ThetaSample& theta, const TicketLibrary& library, const Mat& x,
                     bool average_probabilities = false);

struct DynamicPrediction {
    IntVec labels;
    ThetaSample theta;
};

// Re-samples theta on every call (the dynamic defense) and logs the draw as
// one JSON line when audit_log is given.
DynamicPrediction dynamic_predict(const TicketLibrary& library, const SamplerConfig& cfg,
                                  const Mat& x, Rng& rng, std::ostream* audit_log = nullptr);

}  // namespace rlt
