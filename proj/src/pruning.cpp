#include "rlt/pruning.hpp"

#include "rlt/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

namespace rlt {

void TrainingConfig::validate() const {
    if (loss != "cross_entropy") throw std::invalid_argument("unsupported loss: " + loss);
    if (epsilon < 0) throw std::invalid_argument("training epsilon must be >= 0");
    if (inner_steps < 1) throw std::invalid_argument("inner_steps must be >= 1");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

nlohmann::json TrainingConfig::to_json() const {
    return {{"loss", loss},
            {"epsilon", epsilon},
            {"inner_steps", inner_steps},
            {"inner_step_size", inner_step_size},
            {"inner_random_start", inner_random_start},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"score_learning_rate", score_learning_rate},
            {"momentum", momentum},
            {"cosine_decay", cosine_decay},
            {"rng_seed", rng_seed},
            {"mask_scope", mask_scope == MaskScope::per_layer ? "per_layer" : "global"},
            {"eval_steps", eval_steps},
            {"eval_cap", eval_cap}};
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j) {
    TrainingConfig c;
    c.loss = j.value("loss", c.loss);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.inner_step_size = j.value("inner_step_size", c.inner_step_size);
    c.inner_random_start = j.value("inner_random_start", c.inner_random_start);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.score_learning_rate = j.value("score_learning_rate", c.score_learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.mask_scope = j.value("mask_scope", "per_layer") == std::string("global")
                       ? MaskScope::global
                       : MaskScope::per_layer;
    c.eval_steps = j.value("eval_steps", c.eval_steps);
    c.eval_cap = j.value("eval_cap", c.eval_cap);
    return c;
}

MaskedModel RobustTicket::build_model() const {
    MaskedModel m = MaskedModel::build(arch_id, omega_seed);
    m.set_mask(mask);
    return m;
}

Mat inner_maximize(const MaskedModel& model, const Mat& x, const IntVec& y,
                   const TrainingConfig& cfg, std::uint64_t step_seed) {
    if (cfg.epsilon == 0) return x;
    AttackConfig a;
    a.family = AttackFamily::pgd;
    a.epsilon = cfg.epsilon;
    a.steps = cfg.inner_steps;
    a.step_size = cfg.inner_step_size;
    a.random_start = cfg.inner_random_start;
    a.rng_seed = step_seed;
    return pgd_attack(model, x, y, a);
}

std::vector<Vec> straight_through_score_grad(const MaskedModel& model, const Mat& x_adv,
                                             const IntVec& y) {
    auto fb = model.forward_backward(x_adv, y, true, false);
    std::vector<Vec> grads(model.layer_count());
    for (std::size_t l = 0; l < model.layer_count(); ++l)
        grads[l] = fb.weight_grad[l].cwiseProduct(model.layer(l).omega);
    return grads;
}

namespace {

AttackConfig eval_attack_for(const TrainingConfig& cfg, std::uint64_t seed) {
    AttackConfig a;
    a.family = AttackFamily::pgd;
    a.epsilon = cfg.epsilon;
    a.steps = cfg.eval_steps;
    a.step_size = cfg.epsilon > 0 ? cfg.epsilon / 4.0 : 1e-3;
    a.random_start = true;
    a.rng_seed = seed;
    return a;
}

TicketMetrics measure(const MaskedModel& model, const Dataset& val, const TrainingConfig& cfg) {
    Dataset probe = val.subset(0, std::min(cfg.eval_cap, val.size()));
    TicketMetrics m;
    AttackConfig none;
    none.family = AttackFamily::none;
    m.clean_accuracy = evaluate_accuracy(Predictor::of(model), probe, none);
    if (cfg.epsilon > 0) {
        m.robust_accuracy = evaluate_accuracy(Predictor::of(model), probe,
                                              eval_attack_for(cfg, derive_seed(cfg.rng_seed, 77)));
    } else {
        m.robust_accuracy = m.clean_accuracy;
    }
    return m;
}

void log_epoch(std::ostream* log, int epoch, double loss, const TicketMetrics& m) {
    if (log == nullptr) return;
    nlohmann::json j = {{"epoch", epoch},
                        {"loss", loss},
                        {"clean_acc", m.clean_accuracy},
                        {"robust_acc", m.robust_accuracy}};
    (*log) << j.dump() << "\n";
}

// shared epoch loop; update(model, fb, lr) applies either the score update
// or the dense weight update
template <typename UpdateFn>
double run_epochs(MaskedModel& model, const SplitDataset& data, const TrainingConfig& cfg,
                  std::ostream* event_log, UpdateFn&& update) {
    const Index n = data.train.size();
    if (n == 0) throw std::invalid_argument("empty training dataset");
    const long batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = std::max<long>(1, batches_per_epoch * cfg.epochs);

    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index(0));

    double last_loss = 0;
    long global_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.rng_seed, 1000 + epoch));
        for (Index i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(static_cast<int>(i + 1))]);

        double epoch_loss = 0;
        long epoch_batches = 0;
        for (Index begin = 0; begin < n; begin += cfg.batch_size, ++global_step) {
            const Index count = std::min(cfg.batch_size, n - begin);
            Mat xb(data.train.x.rows(), count);
            IntVec yb(count);
            for (Index j = 0; j < count; ++j) {
                xb.col(j) = data.train.x.col(order[begin + j]);
                yb[j] = data.train.y[order[begin + j]];
            }

            Mat x_adv = inner_maximize(model, xb, yb, cfg,
                                       derive_seed(cfg.rng_seed, 0x10000 + global_step));
            auto fb = model.forward_backward(x_adv, yb, true, false);
            if (!std::isfinite(fb.loss)) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << " step " << global_step
                    << " (loss=" << fb.loss << ", arch=" << model.spec().arch_id << ")";
                throw ExperimentError(msg.str());
            }
            double lr = cfg.score_learning_rate;
            if (cfg.cosine_decay)
                lr *= 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(global_step) /
                                            static_cast<double>(total_steps)));
            update(model, fb, lr);
            epoch_loss += fb.loss;
            ++epoch_batches;
        }
        last_loss = epoch_loss / std::max<long>(1, epoch_batches);
        log_epoch(event_log, epoch, last_loss, measure(model, data.test, cfg));
    }
    return last_loss;
}

}  // namespace

RobustTicket train_ticket(const std::string& arch_id, double remaining_ratio,
                          const SplitDataset& data, const TrainingConfig& cfg,
                          std::ostream* event_log) {
    cfg.validate();
    if (remaining_ratio <= 0 || remaining_ratio > 1)
        throw std::invalid_argument("remaining_ratio must lie in (0,1]");

    MaskedModel model = MaskedModel::build(arch_id, derive_seed(cfg.rng_seed, 0));
    model.set_sparsity(remaining_ratio, cfg.mask_scope);

    std::vector<Vec> velocity(model.layer_count());
    for (std::size_t l = 0; l < model.layer_count(); ++l)
        velocity[l] = Vec::Zero(model.layer(l).omega.size());

    run_epochs(model, data, cfg, event_log,
               [&](MaskedModel& m, const MaskedModel::Backward& fb, double lr) {
                   for (std::size_t l = 0; l < m.layer_count(); ++l) {
                       Vec g = fb.weight_grad[l].cwiseProduct(m.layer(l).omega);
                       velocity[l] = cfg.momentum * velocity[l] - lr * g;
                       m.layer(l).scores += velocity[l];
                   }
                   m.refresh_mask();
               });

    RobustTicket ticket;
    ticket.arch_id = arch_id;
    ticket.remaining_ratio = remaining_ratio;
    ticket.omega_seed = model.omega_seed();
    ticket.mask = model.mask();
    ticket.training_config = cfg;
    ticket.metrics = measure(model, data.test, cfg);
    return ticket;
}

MaskedModel train_dense_baseline(const std::string& arch_id, const SplitDataset& data,
                                 const TrainingConfig& cfg, std::ostream* event_log) {
    cfg.validate();
    MaskedModel model = MaskedModel::build(arch_id, derive_seed(cfg.rng_seed, 0));

    std::vector<Vec> velocity(model.layer_count());
    for (std::size_t l = 0; l < model.layer_count(); ++l)
        velocity[l] = Vec::Zero(model.layer(l).omega.size());

    run_epochs(model, data, cfg, event_log,
               [&](MaskedModel& m, const MaskedModel::Backward& fb, double lr) {
                   for (std::size_t l = 0; l < m.layer_count(); ++l) {
                       velocity[l] = cfg.momentum * velocity[l] - lr * fb.weight_grad[l];
                       m.layer(l).omega += velocity[l];
                   }
               });
    return model;
}

}  // namespace rlt
