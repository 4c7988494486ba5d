#pragma once

// Noise schedule, forward noising, DDIM stepping and classifier-free
// guidance, plus a plain single-pass DDIM sampler.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "mtcolor/denoiser.hpp"
#include "mtcolor/error.hpp"

namespace mtcolor {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;      // index 1..T (index 0 unused, 0)
    std::vector<double> alpha_bars; // index 0..T, alpha_bars[0] = 1

    double alpha_bar(int t) const {
        if (t < 0 || t > T) throw InvalidArgument("timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + "]");
        return alpha_bars[t];
    }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw InvalidArgument("schedule needs T >= 1");
    if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1))
        throw InvalidArgument("need 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.assign(T + 1, 0.0);
    s.alpha_bars.assign(T + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.betas[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        s.alpha_bars[t] = s.alpha_bars[t - 1] * (1.0 - s.betas[t]);
    }
    return s;
}

template <typename T>
void check_same_size(std::span<const T> a, std::span<const T> b, const char* what) {
    if (a.size() != b.size())
        throw DimensionMismatch(std::string(what) + ": sizes " + std::to_string(a.size()) + " and " +
                                std::to_string(b.size()) + " differ");
}

// z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) eps
template <typename T>
std::vector<T> q_sample(std::span<const T> z0, int t, std::span<const T> eps, const NoiseSchedule& s) {
    check_same_size(z0, eps, "q_sample");
    if (t < 1 || t > s.T) throw InvalidArgument("q_sample timestep must be in [1,T]");
    const double a = std::sqrt(s.alpha_bars[t]), b = std::sqrt(1.0 - s.alpha_bars[t]);
    std::vector<T> out(z0.size());
    for (std::size_t i = 0; i < z0.size(); ++i) out[i] = static_cast<T>(a * z0[i] + b * eps[i]);
    return out;
}

// One DDIM update t -> t_prev. eta > 0 adds fresh noise drawn from rng.
// clip_x0 clamps the predicted clean sample to [-1,1] and re-derives the
// noise direction from it.
template <typename T>
std::vector<T> ddim_step(std::span<const T> z, std::span<const T> eps_hat, int t, int t_prev, const NoiseSchedule& s,
                         double eta = 0.0, std::mt19937_64* rng = nullptr, bool clip_x0 = false) {
    check_same_size(z, eps_hat, "ddim_step");
    if (!(t_prev < t)) throw InvalidArgument("ddim_step needs t_prev < t");
    if (eta != 0.0 && rng == nullptr) throw InvalidArgument("ddim_step with eta != 0 requires an rng");
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
    double sigma = 0.0;
    if (eta != 0.0) sigma = eta * std::sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev));
    const double sa = std::sqrt(ab), sb = std::sqrt(1 - ab);
    const double dir = std::sqrt(std::max(0.0, 1 - ab_prev - sigma * sigma));
    const double sp = std::sqrt(ab_prev);
    std::normal_distribution<double> nd;
    std::vector<T> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        double x0 = (z[i] - sb * eps_hat[i]) / sa;
        double e = eps_hat[i];
        if (clip_x0 && (x0 > 1.0 || x0 < -1.0)) {
            x0 = std::clamp(x0, -1.0, 1.0);
            e = (z[i] - sa * x0) / sb;
        }
        double v = sp * x0 + dir * e;
        if (sigma != 0.0) v += sigma * nd(*rng);
        out[i] = static_cast<T>(v);
    }
    return out;
}

template <typename T>
std::vector<T> cfg_combine(std::span<const T> eps_cond, std::span<const T> eps_uncond, double w) {
    check_same_size(eps_cond, eps_uncond, "cfg_combine");
    std::vector<T> out(eps_cond.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(eps_uncond[i] + w * (eps_cond[i] - eps_uncond[i]));
    return out;
}

// Descending timesteps of an S-step DDIM chain over a T-step schedule:
// t_k = round(k T / S) for k = S..1, followed by 0.
inline std::vector<int> ddim_timesteps(int T, int S) {
    if (S < 1 || S > T) throw InvalidArgument("DDIM steps must be in [1,T]");
    std::vector<int> ts;
    for (int k = S; k >= 1; --k) ts.push_back(static_cast<int>(std::lround(static_cast<double>(k) * T / S)));
    ts.push_back(0);
    return ts;
}

// literal: z = β·m_g∘z_g + Σ m_i∘z_i
// convex:  background keeps z_g; instance pixels get β·z_g + (1-β)·z_i
enum class FuseMode { literal, convex };

inline const char* to_string(FuseMode m) { return m == FuseMode::literal ? "literal" : "convex"; }

inline FuseMode fuse_mode_from_string(const std::string& s) {
    if (s == "literal") return FuseMode::literal;
    if (s == "convex") return FuseMode::convex;
    throw InvalidArgument("unknown fuse mode '" + s + "'");
}

struct SamplerConfig {
    int ddim_steps = 20;
    double eta = 0.0;
    double guidance = 3.0;
    double alpha = 0.2;
    double beta = 0.2;
    std::uint64_t seed = 0;
    FuseMode fuse_mode = FuseMode::literal;
    bool fuse_first_match = true; // pre-assign overlapping pixels to the lowest-index instance
    bool luma_lock = false;
    bool clip_x0 = false; // clamp x̂_0 to the data range at every step
    int threads = 1; // instance branches run concurrently when > 1

    void validate(int T) const {
        if (ddim_steps < 1 || ddim_steps > T)
            throw InvalidArgument("ddim_steps must be in [1," + std::to_string(T) + "], got " + std::to_string(ddim_steps));
        if (!(alpha >= 0 && alpha <= 1)) throw InvalidArgument("alpha must be in [0,1]");
        if (!(beta >= 0 && beta <= 1)) throw InvalidArgument("beta must be in [0,1]");
        if (eta < 0) throw InvalidArgument("eta must be >= 0");
    }
};

// Standard-normal [3,H,W] starting noise for a seed.
template <typename T>
std::vector<T> initial_noise(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<T> z(n);
    for (auto& v : z) v = static_cast<T>(nd(rng));
    return z;
}

// Classifier-free guided noise estimate. w == 1 skips the unconditional pass.
template <typename T>
std::vector<T> guided_eps(const Denoiser<T>& model, const std::vector<T>& z, int t, const Conditioning& c, double w,
                          const ForwardOptions& opt = {}) {
    auto cond = model.predict(z, t, c, opt);
    if (w == 1.0) return cond;
    auto uncond = model.predict(z, t, null_conditioning(c), opt);
    return cfg_combine<T>(cond, uncond, w);
}

// Called once per executed DDIM step: (phase, branch, t, t_prev). Branch is
// -1 for the global chain.
using StepHook = std::function<void(const char*, int, int, int)>;

// Plain DDIM from seeded noise with CFG; no instance phase.
template <typename T>
std::vector<T> ddim_sample(const Denoiser<T>& model, const Conditioning& c, const NoiseSchedule& s,
                           const SamplerConfig& sc, const ForwardOptions& opt = {}, const StepHook& hook = {}) {
    sc.validate(s.T);
    const int size = model.config().image_size;
    auto z = initial_noise<T>(static_cast<std::size_t>(model.config().channels) * size * size, sc.seed);
    std::mt19937_64 rng(sc.seed ^ 0x9e3779b97f4a7c15ull);
    const auto ts = ddim_timesteps(s.T, sc.ddim_steps);
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
        auto eps = guided_eps(model, z, ts[k], c, sc.guidance, opt);
        z = ddim_step<T>(z, eps, ts[k], ts[k + 1], s, sc.eta, &rng, sc.clip_x0);
        if (hook) hook("plain", -1, ts[k], ts[k + 1]);
    }
    return z;
}

} // namespace mtcolor
