#include "rlt/attacks.hpp"

#include "rlt/rng.hpp"
#include "rlt/sha256.hpp"

#include <nlohmann/json.hpp>

#include <cmath>

namespace rlt {

void AttackConfig::validate() const {
    if (epsilon < 0) throw std::invalid_argument("attack epsilon must be >= 0");
    if (family != AttackFamily::none) {
        if (steps < 1) throw std::invalid_argument("attack steps must be >= 1");
        if (step_size <= 0) throw std::invalid_argument("attack step_size must be > 0");
    }
    if (norm != "linf") throw std::invalid_argument("only the linf norm is supported");
}

AttackFamily attack_family_from_string(const std::string& s) {
    if (s == "none") return AttackFamily::none;
    if (s == "pgd") return AttackFamily::pgd;
    if (s == "eot") return AttackFamily::eot;
    throw ConfigError("unknown attack family: " + s);
}

std::string to_string(AttackFamily f) {
    switch (f) {
        case AttackFamily::none: return "none";
        case AttackFamily::pgd: return "pgd";
        case AttackFamily::eot: return "eot";
    }
    return "?";
}

nlohmann::json AttackConfig::to_json() const {
    return {{"family", to_string(family)},
            {"epsilon", epsilon},
            {"steps", steps},
            {"step_size", step_size},
            {"random_start", random_start},
            {"rng_seed", rng_seed},
            {"norm", norm},
            {"eot_sample_subset", eot_sample_subset},
            {"eot_subset_size", eot_subset_size}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.family = attack_family_from_string(j.value("family", "pgd"));
    c.epsilon = j.value("epsilon", c.epsilon);
    c.steps = j.value("steps", c.steps);
    c.step_size = j.value("step_size", c.step_size);
    c.random_start = j.value("random_start", c.random_start);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.norm = j.value("norm", c.norm);
    c.eot_sample_subset = j.value("eot_sample_subset", c.eot_sample_subset);
    c.eot_subset_size = j.value("eot_subset_size", c.eot_subset_size);
    return c;
}

std::string AttackConfig::digest() const { return Sha256::hex_of(to_json().dump()); }

Mat pairwise_mean(const std::vector<Mat>& terms) {
    if (terms.empty()) throw std::invalid_argument("pairwise_mean of empty list");
    // pairwise reduction keeps the result independent of accumulation order
    std::vector<Mat> level = terms;
    while (level.size() > 1) {
        std::vector<Mat> next;
        for (std::size_t i = 0; i + 1 < level.size(); i += 2)
            next.push_back(level[i] + level[i + 1]);
        if (level.size() % 2 == 1) next.push_back(level.back());
        level = std::move(next);
    }
    return level[0] / static_cast<Scalar>(terms.size());
}

namespace {

using GradFn = std::function<Mat(const Mat&)>;

Mat projected_ascent(const Mat& x, const AttackConfig& cfg, const GradFn& grad) {
    const Scalar eps = cfg.epsilon;
    Mat lo = (x.array() - eps).cwiseMax(0.0).matrix();
    Mat hi = (x.array() + eps).cwiseMin(1.0).matrix();

    Mat x_adv = x;
    if (cfg.random_start && eps > 0) {
        Rng rng(cfg.rng_seed);
        for (Index j = 0; j < x_adv.cols(); ++j)
            for (Index i = 0; i < x_adv.rows(); ++i)
                x_adv(i, j) += rng.uniform(-eps, eps);
        x_adv = x_adv.cwiseMax(lo).cwiseMin(hi);
    }
    for (int t = 0; t < cfg.steps; ++t) {
        Mat g = grad(x_adv);
        x_adv += cfg.step_size * g.array().sign().matrix();
        x_adv = x_adv.cwiseMax(lo).cwiseMin(hi);
    }
    return x_adv;
}

}  // namespace

Mat pgd_attack(const MaskedModel& model, const Mat& x, const IntVec& y, const AttackConfig& cfg) {
    cfg.validate();
    if (cfg.family != AttackFamily::pgd)
        throw std::invalid_argument("pgd_attack requires family=pgd");
    return projected_ascent(x, cfg, [&](const Mat& xa) {
        return model.forward_backward(xa, y, false, true).input_grad;
    });
}

Mat eot_attack(const std::vector<const MaskedModel*>& models, const Mat& x, const IntVec& y,
               const AttackConfig& cfg) {
    cfg.validate();
    if (cfg.family != AttackFamily::eot)
        throw std::invalid_argument("eot_attack requires family=eot");
    if (models.empty()) throw std::invalid_argument("eot_attack requires a non-empty model list");

    Rng subset_rng(derive_seed(cfg.rng_seed, 0x0e07));
    return projected_ascent(x, cfg, [&](const Mat& xa) {
        std::vector<const MaskedModel*> active = models;
        if (cfg.eot_sample_subset && cfg.eot_subset_size > 0 &&
            cfg.eot_subset_size < static_cast<int>(models.size())) {
            active.clear();
            std::vector<const MaskedModel*> pool = models;
            for (int i = 0; i < cfg.eot_subset_size; ++i) {
                int pick = subset_rng.uniform_int(static_cast<int>(pool.size()));
                active.push_back(pool[pick]);
                pool.erase(pool.begin() + pick);
            }
        }
        std::vector<Mat> grads;
        grads.reserve(active.size());
        for (const MaskedModel* m : active)
            grads.push_back(m->forward_backward(xa, y, false, true).input_grad);
        return pairwise_mean(grads);
    });
}

Predictor Predictor::of(const MaskedModel& m) {
    Predictor p;
    p.model = &m;
    p.logits = [&m](const Mat& x) { return m.forward(x); };
    return p;
}

Predictor Predictor::of_members(std::vector<const MaskedModel*> members) {
    if (members.empty()) throw std::invalid_argument("predictor needs at least one member");
    Predictor p;
    p.members = std::move(members);
    p.logits = [ms = p.members](const Mat& x) {
        std::vector<Mat> outs;
        outs.reserve(ms.size());
        for (const MaskedModel* m : ms) outs.push_back(m->forward(x));
        return pairwise_mean(outs);
    };
    return p;
}

Predictor Predictor::of_fn(std::function<Mat(const Mat&)> fn) {
    Predictor p;
    p.logits = std::move(fn);
    return p;
}

double evaluate_accuracy(const Predictor& predictor, const Mat& x, const IntVec& y,
                         const AttackConfig& attack, Index batch_size) {
    attack.validate();
    if (x.cols() == 0) throw std::invalid_argument("evaluate_accuracy on empty dataset");
    if (!predictor.logits) throw std::invalid_argument("predictor has no logits function");

    long correct = 0;
    Index batch_index = 0;
    for (Index begin = 0; begin < x.cols(); begin += batch_size, ++batch_index) {
        const Index count = std::min(batch_size, x.cols() - begin);
        Mat xb = x.middleCols(begin, count);
        IntVec yb = y.segment(begin, count);

        Mat x_eval;
        AttackConfig batch_cfg = attack;
        batch_cfg.rng_seed = derive_seed(attack.rng_seed, static_cast<std::uint64_t>(batch_index));
        switch (attack.family) {
            case AttackFamily::none:
                x_eval = xb;
                break;
            case AttackFamily::pgd:
                if (predictor.model == nullptr)
                    throw std::invalid_argument("pgd evaluation requires a white-box model");
                x_eval = pgd_attack(*predictor.model, xb, yb, batch_cfg);
                break;
            case AttackFamily::eot:
                if (predictor.members.empty())
                    throw std::invalid_argument("eot evaluation requires announced members");
                x_eval = eot_attack(predictor.members, xb, yb, batch_cfg);
                break;
        }
        IntVec pred = argmax_labels(predictor.logits(x_eval));
        for (Index j = 0; j < count; ++j)
            if (pred[j] == yb[j]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(x.cols());
}

double evaluate_accuracy(const Predictor& predictor, const Dataset& data,
                         const AttackConfig& attack, Index batch_size) {
    return evaluate_accuracy(predictor, data.x, data.y, attack, batch_size);
}

}  // namespace rlt
