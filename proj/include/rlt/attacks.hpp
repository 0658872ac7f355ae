#pragma once

#include "rlt/dataset.hpp"
#include "rlt/model.hpp"
#include "rlt/types.hpp"

#include <nlohmann/json_fwd.hpp>

#include <functional>
#include <vector>

namespace rlt {

enum class AttackFamily { none, pgd, eot };

struct AttackConfig {
    AttackFamily family = AttackFamily::pgd;
    double epsilon = 8.0 / 255.0;  // L-inf budget as a fraction of [0,1]
    int steps = 20;
    double step_size = (8.0 / 255.0) / 4.0;
    bool random_start = true;
    std::uint64_t rng_seed = 0;
    std::string norm = "linf";
    // off by default: the adaptive attack averages over ALL announced members
    bool eot_sample_subset = false;
    int eot_subset_size = 0;

    void validate() const;
    std::string digest() const;
    nlohmann::json to_json() const;
    static AttackConfig from_json(const nlohmann::json& j);
};

AttackFamily attack_family_from_string(const std::string& s);
std::string to_string(AttackFamily f);

// PGD under L-inf: signed-gradient steps, projected into the epsilon ball
// intersected with [0,1]. Deterministic given (model, batch, config).
Mat pgd_attack(const MaskedModel& model, const Mat& x, const IntVec& y, const AttackConfig& cfg);

// Same loop with the per-step gradient replaced by the mean of the member
// gradients (pairwise summation, order-independent).
Mat eot_attack(const std::vector<const MaskedModel*>& models, const Mat& x, const IntVec& y,
               const AttackConfig& cfg);

// Order-independent mean of equally shaped matrices.
Mat pairwise_mean(const std::vector<Mat>& terms);

// What evaluate_accuracy attacks and queries. For family pgd a model is
// required; for eot a non-empty member list.
struct Predictor {
    std::function<Mat(const Mat&)> logits;
    const MaskedModel* model = nullptr;
    std::vector<const MaskedModel*> members;

    static Predictor of(const MaskedModel& m);
    static Predictor of_members(std::vector<const MaskedModel*> members);
    static Predictor of_fn(std::function<Mat(const Mat&)> fn);
};

// Fraction of samples classified correctly after the configured attack is run
// against the predictor (family none evaluates clean accuracy).
double evaluate_accuracy(const Predictor& predictor, const Mat& x, const IntVec& y,
                         const AttackConfig& attack, Index batch_size = 64);
double evaluate_accuracy(const Predictor& predictor, const Dataset& data,
                         const AttackConfig& attack, Index batch_size = 64);

}  // namespace rlt
