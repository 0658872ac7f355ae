#include "rlt/ensemble.hpp"

#include "rlt/attacks.hpp"
#include "rlt/sha256.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <ostream>

namespace rlt {

void SamplerConfig::validate() const {
    if (structure_inclusion_prob <= 0.0 || structure_inclusion_prob > 1.0)
        throw std::invalid_argument("structure_inclusion_prob must lie in (0,1]");
    if (count_prob_one < 0.0 || count_prob_one > 1.0)
        throw std::invalid_argument("count_prob_one must lie in [0,1]");
    if (pools.empty()) throw ConfigError("sampler has no structure pools");
    for (const auto& [arch, pool] : pools)
        if (pool.empty()) throw ConfigError("empty sparsity pool for structure " + arch);
}

nlohmann::json SamplerConfig::to_json() const {
    nlohmann::json jp = nlohmann::json::object();
    for (const auto& [arch, pool] : pools) jp[arch] = pool;
    return {{"structure_inclusion_prob", structure_inclusion_prob},
            {"count_probs", {count_prob_one, 1.0 - count_prob_one}},
            {"pools", jp},
            {"rng_seed", rng_seed},
            {"average_probabilities", average_probabilities}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
    SamplerConfig c;
    c.structure_inclusion_prob = j.value("structure_inclusion_prob", c.structure_inclusion_prob);
    if (j.contains("count_probs")) {
        auto probs = j["count_probs"].get<std::vector<double>>();
        if (probs.size() != 2 || std::abs(probs[0] + probs[1] - 1.0) > 1e-9)
            throw ConfigError("count_probs must be two values summing to 1");
        c.count_prob_one = probs[0];
    }
    if (j.contains("pools"))
        for (const auto& [arch, pool] : j["pools"].items())
            c.pools[arch] = pool.get<std::vector<double>>();
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.average_probabilities = j.value("average_probabilities", c.average_probabilities);
    return c;
}

void ThetaSample::check_invariants() const {
    const std::size_t k = structures.size();
    if (alpha.size() != k || counts.size() != k || picks.size() != k)
        throw ValidationError("theta sample: ragged fields");
    int sum = 0;
    bool any = false;
    for (std::size_t i = 0; i < k; ++i) {
        if (alpha[i]) {
            any = true;
            if (counts[i] < 1 || counts[i] > 2)
                throw ValidationError("theta sample: count outside {1,2}");
            if (static_cast<int>(picks[i].size()) != counts[i])
                throw ValidationError("theta sample: picks do not match count");
            std::vector<double> sorted = picks[i];
            std::sort(sorted.begin(), sorted.end());
            if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
                throw ValidationError("theta sample: duplicate ratio pick");
        } else {
            if (counts[i] != 0 || !picks[i].empty())
                throw ValidationError("theta sample: unselected structure carries members");
        }
        sum += alpha[i] ? counts[i] : 0;
    }
    if (!any) throw ValidationError("theta sample: no structure selected");
    if (sum != total) throw ValidationError("theta sample: total mismatch");
    if (total < 1 || total > 2 * static_cast<int>(k))
        throw ValidationError("theta sample: total out of range");
}

nlohmann::json ThetaSample::to_json() const {
    return {{"structures", structures},
            {"alpha", alpha},
            {"counts", counts},
            {"picks", picks},
            {"total", total}};
}

namespace {

std::vector<std::string> pool_structures(const SamplerConfig& cfg) {
    std::vector<std::string> out;
    for (const auto& [arch, _] : cfg.pools) out.push_back(arch);  // map order: sorted
    return out;
}

void require_resolvable(const TicketLibrary& library, const SamplerConfig& cfg,
                        const std::vector<std::string>& structures) {
    for (const auto& arch : structures)
        for (double ratio : cfg.pools.at(arch))
            if (!library.contains(arch, ratio))
                throw ConfigError("sampler pool entry (" + arch + ", " + std::to_string(ratio) +
                                  ") has no ticket in the library");
}

ThetaSample draw(const std::vector<std::string>& structures,
                 const std::vector<std::uint8_t>& alpha, const SamplerConfig& cfg, Rng& rng) {
    ThetaSample theta;
    theta.structures = structures;
    theta.alpha = alpha;
    theta.counts.assign(structures.size(), 0);
    theta.picks.assign(structures.size(), {});
    for (std::size_t i = 0; i < structures.size(); ++i) {
        if (!alpha[i]) continue;
        const std::vector<double>& pool = cfg.pools.at(structures[i]);
        int n = rng.uniform() < cfg.count_prob_one ? 1 : 2;
        n = std::min<int>(n, static_cast<int>(pool.size()));
        theta.counts[i] = n;
        std::vector<double> remaining = pool;
        for (int d = 0; d < n; ++d) {
            int pick = rng.uniform_int(static_cast<int>(remaining.size()));
            theta.picks[i].push_back(remaining[pick]);
            remaining.erase(remaining.begin() + pick);
        }
        theta.total += n;
    }
    theta.check_invariants();
    return theta;
}

}  // namespace

ThetaSample sample_theta(const TicketLibrary& library, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<std::string> structures = pool_structures(cfg);
    require_resolvable(library, cfg, structures);

    std::vector<std::uint8_t> alpha(structures.size(), 0);
    bool any = false;
    do {  // re-draw the all-zero event
        any = false;
        for (std::size_t i = 0; i < structures.size(); ++i) {
            alpha[i] = rng.bernoulli(cfg.structure_inclusion_prob) ? 1 : 0;
            any = any || alpha[i];
        }
    } while (!any);
    return draw(structures, alpha, cfg, rng);
}

ThetaSample sample_r2s(const std::string& arch_id, const TicketLibrary& library,
                       const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    if (cfg.pools.find(arch_id) == cfg.pools.end())
        throw ConfigError("r2s structure has no pool: " + arch_id);
    SamplerConfig single = cfg;
    single.pools = {{arch_id, cfg.pools.at(arch_id)}};
    require_resolvable(library, single, {arch_id});
    return draw({arch_id}, {1}, single, rng);
}

Mat ensemble_forward(const ThetaSample& theta, const TicketLibrary& library, const Mat& x,
                     bool average_probabilities) {
    theta.check_invariants();
    std::vector<Mat> outputs;
    for (std::size_t i = 0; i < theta.structures.size(); ++i) {
        for (double ratio : theta.picks[i]) {
            const MaskedModel& m = library.resolve(theta.structures[i], ratio);
            Mat logits = m.forward(x);
            if (average_probabilities) {
                for (Index j = 0; j < logits.cols(); ++j) {
                    Vec col = (logits.col(j).array() - logits.col(j).maxCoeff()).exp();
                    logits.col(j) = col / col.sum();
                }
            }
            outputs.push_back(std::move(logits));
        }
    }
    return pairwise_mean(outputs);
}

DynamicPrediction dynamic_predict(const TicketLibrary& library, const SamplerConfig& cfg,
                                  const Mat& x, Rng& rng, std::ostream* audit_log) {
    DynamicPrediction out;
    out.theta = sample_theta(library, cfg, rng);
    Mat logits = ensemble_forward(out.theta, library, x, cfg.average_probabilities);
    out.labels = argmax_labels(logits);

    if (audit_log != nullptr) {
        nlohmann::json record = out.theta.to_json();
        record["timestamp_ns"] = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                     std::chrono::system_clock::now().time_since_epoch())
                                     .count();
        record["prediction_digest"] =
            Sha256::hex_of(out.labels.data(),
                           sizeof(int) * static_cast<std::size_t>(out.labels.size()))
                .substr(0, 16);
        (*audit_log) << record.dump() << "\n";
    }
    return out;
}

}  // namespace rlt
