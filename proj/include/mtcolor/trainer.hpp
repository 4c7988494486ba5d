#pragma once

// L2 noise-prediction objective, AdamW with linear warmup, and the two-stage
// training loop with per-stage parameter freezing.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <type_traits>
#include <vector>

#include "mtcolor/checkpoint.hpp"
#include "mtcolor/config.hpp"
#include "mtcolor/denoiser.hpp"
#include "mtcolor/diffusion.hpp"

namespace mtcolor {

// One training pair: RGB target in [0,1] as [3,H,W] plus its conditions.
struct TrainingExample {
    std::vector<float> rgb;
    Conditioning cond;
};

// Random quantities of one sample, drawn up front so that the forward/backward
// work can be scheduled freely.
struct SampleDraw {
    std::size_t index = 0;
    int t = 1;
    bool drop = false;
    std::vector<float> eps;
};

inline std::set<ParamGroup> trainable_groups(int stage, const TrainConfig& cfg) {
    if (stage == 1) return {ParamGroup::backbone, ParamGroup::guidance};
    if (stage == 2) {
        std::set<ParamGroup> g{ParamGroup::condition};
        if (cfg.stage2_train_backbone) g.insert(ParamGroup::backbone);
        return g;
    }
    throw InvalidArgument("stage must be 1 or 2");
}

inline double learning_rate(int iteration, const TrainConfig& cfg) {
    if (cfg.warmup <= 0) return cfg.lr;
    return cfg.lr * std::min(1.0, static_cast<double>(iteration + 1) / cfg.warmup);
}

inline std::vector<float> to_model_range(const std::vector<float>& rgb) {
    std::vector<float> x(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) x[i] = 2.0f * rgb[i] - 1.0f;
    return x;
}

template <typename Rng>
SampleDraw draw_sample(std::size_t dataset_size, int T, std::size_t numel, double dropout, Rng& rng) {
    SampleDraw d;
    d.index = std::uniform_int_distribution<std::size_t>(0, dataset_size - 1)(rng);
    d.t = std::uniform_int_distribution<int>(1, T)(rng);
    d.drop = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < dropout;
    std::normal_distribution<double> nd;
    d.eps.resize(numel);
    for (auto& e : d.eps) e = static_cast<float>(nd(rng));
    return d;
}

// Per-sample loss ‖eps − ε̂(z_t, t, c)‖² / numel; when grads is non-null the
// gradients of every trainable parameter are added into it (indexed like
// the store, empty entries untouched).
template <typename T>
double sample_loss(const Denoiser<T>& model, const TrainingExample& ex, const SampleDraw& d,
                   const NoiseSchedule& sched, const std::set<ParamGroup>& trainable,
                   std::type_identity_t<std::vector<std::vector<T>>>* grads) {
    const int s = model.config().image_size;
    const auto x0 = to_model_range(ex.rgb);
    std::vector<T> x0t(x0.begin(), x0.end()), epst(d.eps.begin(), d.eps.end());
    auto zt = q_sample<T>(x0t, d.t, epst, sched);
    Binder<T> b(model.params(), grads ? trainable : std::set<ParamGroup>{});
    const Conditioning c = d.drop ? null_conditioning(ex.cond) : ex.cond;
    auto pred = model.forward(b, ag::Var<T>::constant({model.config().channels, s, s}, std::move(zt)), d.t, c);
    auto loss = ag::mse(pred, std::span<const T>(epst));
    const double value = loss.item();
    if (grads) {
        ag::backward(loss);
        for (const auto& [idx, var] : b.bound()) {
            auto g = var.grad();
            if (g.empty()) continue;
            auto& acc = (*grads)[idx];
            if (acc.empty()) acc.assign(g.size(), T(0));
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
    }
    return value;
}

// Mean L2 objective over a batch (no gradients).
template <typename T, typename Rng>
double training_loss(const Denoiser<T>& model, const std::vector<TrainingExample>& batch, const NoiseSchedule& sched,
                     double dropout, Rng& rng) {
    if (batch.empty()) throw InvalidArgument("empty batch");
    const int s = model.config().image_size;
    double total = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto d = draw_sample(1, sched.T, static_cast<std::size_t>(model.config().channels) * s * s, dropout, rng);
        total += sample_loss(model, batch[i], d, sched, {}, nullptr);
    }
    return total / batch.size();
}

class AdamW {
public:
    AdamW() = default;
    explicit AdamW(const ParamStore<float>& store) {
        for (const auto& p : store.all()) {
            state_.m.emplace_back(p.value.size(), 0.0f);
            state_.v.emplace_back(p.value.size(), 0.0f);
        }
    }
    explicit AdamW(OptimizerState s) : state_(std::move(s)) {}

    // grads indexed like the store; empty entries are treated as zero for
    // trainable parameters and skipped for frozen ones.
    void step(ParamStore<float>& store, const std::vector<std::vector<float>>& grads, double lr,
              const std::set<ParamGroup>& trainable, const TrainConfig& cfg) {
        ++state_.step;
        const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
        for (std::size_t k = 0; k < store.size(); ++k) {
            auto& p = store[k];
            if (!trainable.count(p.group)) continue;
            auto& m = state_.m[k];
            auto& v = state_.v[k];
            const auto& g = grads[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double gi = g.empty() ? 0.0 : g[i];
                m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * gi);
                v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * gi * gi);
                const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
                p.value[i] = static_cast<float>(p.value[i] - lr * (upd + cfg.weight_decay * p.value[i]));
            }
        }
    }

    // Exponential weight average with the usual (1+n)/(10+n) ramp. Frozen
    // groups are never touched, so their average stays bit-equal.
    void average(const ParamStore<float>& store, const std::set<ParamGroup>& trainable, double decay) {
        if (state_.ema.empty())
            for (const auto& p : store.all()) state_.ema.push_back(p.value);
        const double n = static_cast<double>(state_.step);
        const double d = std::min(decay, (1.0 + n) / (10.0 + n));
        for (std::size_t k = 0; k < store.size(); ++k) {
            const auto& p = store[k];
            if (!trainable.count(p.group)) continue;
            auto& e = state_.ema[k];
            for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>(d * e[i] + (1 - d) * p.value[i]);
        }
    }

    const OptimizerState& state() const { return state_; }

private:
    OptimizerState state_;
};

struct TrainLog {
    std::vector<double> losses; // per iteration, batch mean
};

using TrainCallback = std::function<void(int iteration, double loss, double lr)>;

class Trainer {
public:
    Trainer(Denoiser<float>& model, RunConfig rc, int stage, std::optional<OptimizerState> opt = {},
            int start_iteration = 0, std::string rng_state = {})
        : model_(model), rc_(std::move(rc)), stage_(stage), sched_(rc_.schedule.make()),
          trainable_(trainable_groups(stage, rc_.train)), iteration_(start_iteration),
          rng_(rc_.train.seed * 1000003ull + static_cast<std::uint64_t>(stage)) {
        rc_.train.validate();
        adam_ = opt ? AdamW(std::move(*opt)) : AdamW(model_.params());
        if (!rng_state.empty()) {
            std::istringstream in(rng_state);
            in >> rng_;
            if (!in) throw CheckpointError("cannot restore trainer rng state");
        }
    }

    int iteration() const { return iteration_; }
    int stage() const { return stage_; }
    const std::set<ParamGroup>& trainable() const { return trainable_; }
    const NoiseSchedule& schedule() const { return sched_; }

    // One optimizer update on a freshly drawn batch; returns the batch loss.
    double step(const std::vector<TrainingExample>& data) {
        if (data.empty()) throw InvalidArgument("training set is empty");
        const auto& cfg = rc_.train;
        const int s = model_.config().image_size;
        const std::size_t numel = static_cast<std::size_t>(model_.config().channels) * s * s;
        std::vector<SampleDraw> draws;
        for (int b = 0; b < cfg.batch_size; ++b)
            draws.push_back(draw_sample(data.size(), sched_.T, numel, cfg.dropout, rng_));

        const std::size_t np = model_.params().size();
        std::vector<std::vector<std::vector<float>>> per(draws.size(), std::vector<std::vector<float>>(np));
        std::vector<double> losses(draws.size());
        auto work = [&](std::size_t i) {
            losses[i] = sample_loss(model_, data[draws[i].index], draws[i], sched_, trainable_, &per[i]);
        };
        const int threads = std::min<int>(cfg.threads, static_cast<int>(draws.size()));
        if (threads <= 1) {
            for (std::size_t i = 0; i < draws.size(); ++i) work(i);
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < threads; ++w)
                pool.emplace_back([&, w] {
                    for (std::size_t i = w; i < draws.size(); i += threads) work(i);
                });
            for (auto& th : pool) th.join();
        }

        // Fixed-order reduction keeps the update independent of scheduling.
        std::vector<std::vector<float>> grads(np);
        double loss = 0;
        for (std::size_t i = 0; i < draws.size(); ++i) {
            loss += losses[i];
            for (std::size_t k = 0; k < np; ++k) {
                const auto& g = per[i][k];
                if (g.empty()) continue;
                if (grads[k].empty()) grads[k].assign(g.size(), 0.0f);
                for (std::size_t j = 0; j < g.size(); ++j) grads[k][j] += g[j];
            }
        }
        const float inv = 1.0f / static_cast<float>(draws.size());
        double sq = 0;
        for (auto& g : grads)
            for (auto& x : g) {
                x *= inv;
                sq += static_cast<double>(x) * x;
            }
        if (cfg.grad_clip > 0) {
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) {
                const float f = static_cast<float>(cfg.grad_clip / norm);
                for (auto& g : grads)
                    for (auto& x : g) x *= f;
            }
        }
        adam_.step(model_.params(), grads, learning_rate(iteration_, cfg), trainable_, cfg);
        if (cfg.ema_decay > 0) adam_.average(model_.params(), trainable_, cfg.ema_decay);
        ++iteration_;
        return loss / draws.size();
    }

    Checkpoint checkpoint(bool complete, std::vector<int> stages_done) const {
        Checkpoint c;
        std::ostringstream rs;
        rs << rng_;
        c.meta = {{"format", "mtcolor"},
                  {"model", to_json(model_.config())},
                  {"schedule", to_json(rc_.schedule)},
                  {"train", to_json(rc_.train)},
                  {"stage", stage_},
                  {"iteration", iteration_},
                  {"complete", complete},
                  {"stages_done", stages_done},
                  {"rng_state", rs.str()}};
        c.params = model_.params();
        c.optimizer = adam_.state();
        // A finished stage exports the averaged weights; partial checkpoints
        // keep the live ones so that resuming is exact.
        if (complete && !c.optimizer->ema.empty())
            for (std::size_t k = 0; k < c.params.size(); ++k) c.params[k].value = c.optimizer->ema[k];
        return c;
    }

private:
    Denoiser<float>& model_;
    RunConfig rc_;
    int stage_;
    NoiseSchedule sched_;
    std::set<ParamGroup> trainable_;
    int iteration_;
    std::mt19937_64 rng_;
    AdamW adam_;
};

// Stages recorded as finished in a checkpoint.
inline std::vector<int> completed_stages(const Checkpoint& c) {
    return c.meta.value("stages_done", std::vector<int>{});
}

struct StageResult {
    Checkpoint checkpoint;
    TrainLog log;
};

// Runs (or resumes) one training stage. Stage 2 requires a checkpoint that
// completed stage 1; a checkpoint of the same unfinished stage is resumed.
inline StageResult train_stage(int stage, const std::vector<TrainingExample>& data, RunConfig rc,
                               const Checkpoint* prior = nullptr, const std::string& out_path = {},
                               const TrainCallback& on_step = {}) {
    rc.train.stage = stage;
    rc.train.validate();
    std::vector<int> done;
    std::optional<OptimizerState> opt;
    int start = 0;
    std::string rng_state;
    std::optional<Denoiser<float>> model;
    if (prior) {
        done = completed_stages(*prior);
        const int prior_stage = prior->meta.value("stage", 0);
        const bool prior_complete = prior->meta.value("complete", false);
        rc.model = denoiser_config_from_json(prior->meta.at("model"));
        rc.schedule = schedule_config_from_json(prior->meta.at("schedule"));
        model.emplace(rc.model, prior->params);
        if (prior_stage == stage && !prior_complete) {
            opt = prior->optimizer;
            start = prior->meta.value("iteration", 0);
            rng_state = prior->meta.value("rng_state", "");
        }
    } else {
        model.emplace(rc.model, rc.train.seed);
    }
    if (stage == 2 && std::find(done.begin(), done.end(), 1) == done.end())
        throw InvalidArgument("stage 2 requires a stage-1 checkpoint (none completed stage 1)");

    Trainer tr(*model, rc, stage, std::move(opt), start, rng_state);
    StageResult res;
    while (tr.iteration() < rc.train.iterations) {
        const double loss = tr.step(data);
        res.log.losses.push_back(loss);
        if (on_step) on_step(tr.iteration(), loss, learning_rate(tr.iteration() - 1, rc.train));
        if (!out_path.empty() && rc.train.checkpoint_every > 0 && tr.iteration() % rc.train.checkpoint_every == 0 &&
            tr.iteration() < rc.train.iterations)
            save_checkpoint(out_path, tr.checkpoint(false, done));
    }
    if (std::find(done.begin(), done.end(), stage) == done.end()) done.push_back(stage);
    res.checkpoint = tr.checkpoint(true, done);
    if (!out_path.empty()) save_checkpoint(out_path, res.checkpoint);
    return res;
}

// Model reconstructed from a checkpoint.
inline Denoiser<float> load_model(const Checkpoint& c) {
    return Denoiser<float>(denoiser_config_from_json(c.meta.at("model")), c.params);
}

inline NoiseSchedule load_schedule(const Checkpoint& c) {
    return schedule_config_from_json(c.meta.at("schedule")).make();
}

} // namespace mtcolor
